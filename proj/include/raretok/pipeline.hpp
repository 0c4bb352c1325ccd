#pragma once

// Stage orchestration shared by the CLI: sweep -> phases -> spectra -> geometry, each stage
// independently runnable from earlier-stage outputs. Every output embeds the run parameters
// and input checksums.

#include <openssl/evp.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raretok/ablation.hpp"
#include "raretok/corpus.hpp"
#include "raretok/geometry.hpp"
#include "raretok/model.hpp"
#include "raretok/phases.hpp"
#include "raretok/random.hpp"
#include "raretok/spectra.hpp"

namespace raretok {

inline constexpr const char* kToolkitVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitInternal = 1, kExitInput = 2, kExitUsage = 64 };

// An error tagged with the pipeline stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message, int exit_code)
      : std::runtime_error(message), stage_(std::move(stage)), exit_code_(exit_code) {}
  const std::string& stage() const { return stage_; }
  int exit_code() const { return exit_code_; }
  std::string to_json() const { return nlohmann::json{{"stage", stage_}, {"message", what()}}.dump(); }

 private:
  std::string stage_;
  int exit_code_;
};

template <typename F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e.what(), kExitInput);
  } catch (const nlohmann::json::exception& e) {
    throw StageError(stage, e.what(), kExitInput);
  } catch (const std::filesystem::filesystem_error& e) {
    throw StageError(stage, e.what(), kExitInput);
  } catch (const std::exception& e) {
    throw StageError(stage, e.what(), kExitInternal);
  }
}

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

inline std::string file_sha256(const std::filesystem::path& p) { return sha256_hex(io::read_file(p)); }

// Digest over the manifest and every tensor file it names.
inline std::string model_sha256(const std::filesystem::path& manifest_path) {
  const auto manifest = nlohmann::json::parse(io::read_file(manifest_path));
  std::string acc = file_sha256(manifest_path);
  for (const auto& [name, rel] : manifest.at("tensors").items()) {
    std::filesystem::path p = rel.get<std::string>();
    if (p.is_relative()) p = manifest_path.parent_path() / p;
    acc += name + ":" + file_sha256(p);
  }
  return sha256_hex(acc);
}

struct RunConfig {
  std::filesystem::path manifest;
  std::vector<std::filesystem::path> extra_checkpoints;
  std::filesystem::path tokens;
  std::filesystem::path mask;
  std::optional<std::filesystem::path> frequencies;
  std::filesystem::path out_dir;
  double percentile = 50.0;
  std::size_t context_len = 64;
  std::size_t group_size = 50;
  std::uint64_t seed = 0;
  std::size_t window = 9;
  double plateau_threshold = 0.1;
  double tau = 0.90;
  double cluster_threshold = 0.5;
  std::size_t bins = 64;
  std::string normalization = "correlation";
  std::string weight_slice = "mlp_in";
  std::size_t max_positions = 0;
  std::size_t workers = 0;
};

inline nlohmann::json parameters_json(const RunConfig& c) {
  return {{"percentile", c.percentile},
          {"context_len", c.context_len},
          {"group_size", c.group_size},
          {"seed", c.seed},
          {"window", c.window},
          {"plateau_threshold", c.plateau_threshold},
          {"tau", c.tau},
          {"cluster_threshold", c.cluster_threshold},
          {"bins", c.bins},
          {"normalization", c.normalization},
          {"weight_slice", c.weight_slice},
          {"max_positions", c.max_positions}};
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  io::write_file(p, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  try {
    return nlohmann::json::parse(io::read_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    fail(p.string(), ": invalid JSON: ", e.what());
  }
}

// ---------------------------------------------------------------------------
// Loaded inputs

struct CorpusInputs {
  TokenStream stream;
  ValidMask mask;
  FrequencyTable frequencies;
  std::string frequency_source;
  nlohmann::json checksums = nlohmann::json::object();
};

inline CorpusInputs load_corpus(const RunConfig& c, std::size_t vocab_size) {
  return in_stage("corpus", [&] {
    CorpusInputs in;
    for (const auto* p : {&c.tokens, &c.mask}) {
      if (!std::filesystem::exists(*p)) fail("input file not found: ", p->string());
    }
    in.stream = load_token_stream(c.tokens);
    in.stream.validate(vocab_size);
    in.mask = load_mask(c.mask);
    if (in.mask.size() != vocab_size) fail("mask covers ", in.mask.size(), " tokens, vocab_size is ", vocab_size);
    in.checksums["tokens"] = file_sha256(c.tokens);
    in.checksums["mask"] = file_sha256(c.mask);
    if (c.frequencies) {
      if (!std::filesystem::exists(*c.frequencies)) fail("input file not found: ", c.frequencies->string());
      in.frequencies = load_frequencies(*c.frequencies);
      if (in.frequencies.counts.size() != vocab_size) {
        fail("frequency table covers ", in.frequencies.counts.size(), " tokens, vocab_size is ", vocab_size);
      }
      in.frequency_source = "file";
      in.checksums["frequencies"] = file_sha256(*c.frequencies);
    } else {
      in.frequencies = unigram_frequencies(in.stream, vocab_size);
      in.frequency_source = "token stream";
    }
    return in;
  });
}

inline Model load_model_stage(const std::filesystem::path& manifest) {
  return in_stage("model", [&] {
    if (!std::filesystem::exists(manifest)) fail("input file not found: ", manifest.string());
    return load_model(manifest);
  });
}

inline std::string checkpoint_id(const std::filesystem::path& manifest) {
  const auto j = read_json(manifest);
  if (j.contains("checkpoint")) return j.at("checkpoint").get<std::string>();
  const auto parent = manifest.parent_path().filename().string();
  return parent.empty() ? manifest.stem().string() : parent;
}

struct Prepared {
  EvalSet eval;
  std::vector<ForwardCache> caches;
  MeanActivations means;
};

// Eval-set selection, forward caches over every scoring window, and corpus-mean activations.
inline Prepared prepare(const Model& model, const CorpusInputs& corpus, const RunConfig& c) {
  Prepared p;
  p.eval = in_stage("corpus", [&] {
    const std::size_t ctx = std::min(c.context_len, model.config().max_seq);
    EvalSet e = select_rare_targets(corpus.stream, corpus.frequencies, c.percentile, corpus.mask, ctx);
    e.frequency_source = corpus.frequency_source;
    e.mask_source = c.mask.filename().string();
    return subsample_eval(std::move(e), c.max_positions, c.seed);
  });
  in_stage("sweep", [&] {
    p.caches = compute_caches(model, corpus.stream, p.eval.windows, resolve_workers(c.workers));
    p.means = mean_activations(p.caches);
    p.means.source = "all positions of the token stream";
  });
  return p;
}

inline std::string eval_descriptor(const EvalSet& e) {
  return detail::concat(e.pairs.size(), " rare targets; percentile ", e.percentile, " (threshold ",
                        e.frequency_threshold, ", frequencies from ", e.frequency_source, "); mask ", e.mask_source,
                        "; context_len ", e.context_len);
}

inline nlohmann::json run_block(const RunConfig& c, const nlohmann::json& checksums) {
  return {{"toolkit_version", kToolkitVersion}, {"parameters", parameters_json(c)}, {"inputs", checksums}};
}

// ---------------------------------------------------------------------------
// Stages

struct SweepOutputs {
  InfluenceProfile profile;
  NeuronGroups groups;
  NeuronGroup random2;
};

inline NeuronGroup second_random_group(const NeuronGroups& g, std::size_t d_mlp, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> exclude = g.boost.indices;
  exclude.insert(exclude.end(), g.suppress.indices.begin(), g.suppress.indices.end());
  exclude.insert(exclude.end(), g.random.indices.begin(), g.random.indices.end());
  NeuronGroup r = draw_random_group(d_mlp, exclude, k, seed + 1);
  r.name = "random2";
  return r;
}

inline SweepOutputs run_sweep(const RunConfig& c, const Model& model, const CorpusInputs& corpus, const Prepared& prep,
                              const nlohmann::json& checksums) {
  SweepOutputs out;
  out.profile = in_stage("sweep", [&] {
    auto profile = influence_sweep(model, prep.caches, prep.means, prep.eval, {resolve_workers(c.workers), 16});
    profile.eval_descriptor = eval_descriptor(prep.eval);
    profile.model_descriptor = checkpoint_id(c.manifest);
    return profile;
  });
  in_stage("sweep", [&] {
    out.groups = classify_groups(out.profile, c.group_size, c.seed);
    out.random2 = second_random_group(out.groups, model.config().d_mlp, c.group_size, c.seed);
    auto j = influence_to_json(out.profile);
    j["run"] = run_block(c, checksums);
    j["mean_activation_samples"] = prep.means.samples;
    write_json(c.out_dir / "influence.json", j);
    io::write_file(c.out_dir / "influence.csv", influence_to_csv(out.profile));
    auto g = groups_to_json({out.groups.boost, out.groups.suppress, out.groups.random, out.random2});
    g["run"] = run_block(c, checksums);
    write_json(c.out_dir / "groups.json", g);
  });
  (void)corpus;
  return out;
}

inline PhaseAnalysis run_phases(const RunConfig& c, const InfluenceProfile& profile, const nlohmann::json& checksums) {
  return in_stage("phases", [&] {
    PhaseOptions opt{c.window, c.plateau_threshold, 1e-12};
    PhaseAnalysis a = analyze_phases(profile, opt);
    auto j = phases_to_json(a, opt);
    j["run"] = run_block(c, checksums);
    write_json(c.out_dir / "phases.json", j);
    io::write_file(c.out_dir / "curve.csv", curve_to_csv(a));
    return a;
  });
}

inline SpectralReport run_spectra(const RunConfig& c, const Model& model, const std::vector<NeuronGroup>& groups,
                                  const nlohmann::json& checksums) {
  return in_stage("spectra", [&] {
    SpectraOptions opt;
    opt.bins = c.bins;
    opt.normalization = parse_normalization(c.normalization);
    opt.slice = parse_weight_slice(c.weight_slice);
    opt.workers = resolve_workers(c.workers);
    std::vector<Model> extra;
    extra.reserve(c.extra_checkpoints.size());
    for (const auto& m : c.extra_checkpoints) extra.push_back(load_model(m));
    std::vector<Checkpoint> cps{{checkpoint_id(c.manifest), &model}};
    for (std::size_t i = 0; i < extra.size(); ++i) cps.push_back({checkpoint_id(c.extra_checkpoints[i]), &extra[i]});
    const auto report = group_alpha_report(cps, groups, opt);
    auto j = spectra_to_json(report, opt);
    j["run"] = run_block(c, checksums);
    write_json(c.out_dir / "spectra.json", j);
    io::write_file(c.out_dir / "spectra.csv", spectra_to_csv(report));
    return report;
  });
}

inline GeometryReport run_geometry(const RunConfig& c, const Model& model, const Prepared& prep,
                                   const NeuronGroups& groups, const NeuronGroup& random2,
                                   const nlohmann::json& checksums) {
  return in_stage("geometry", [&] {
    GeometryOptions opt{c.tau, c.cluster_threshold};
    const auto report = geometry_report(prep.caches, prep.eval, model, groups, random2, opt);
    auto j = geometry_to_json(report, opt);
    j["run"] = run_block(c, checksums);
    write_json(c.out_dir / "geometry.json", j);
    return report;
  });
}

inline nlohmann::json input_checksums(const RunConfig& c, const CorpusInputs* corpus) {
  nlohmann::json j = corpus ? corpus->checksums : nlohmann::json::object();
  j["model"] = in_stage("model", [&] { return model_sha256(c.manifest); });
  if (!c.extra_checkpoints.empty()) {
    nlohmann::json extra = nlohmann::json::array();
    for (const auto& m : c.extra_checkpoints) extra.push_back(in_stage("model", [&] { return model_sha256(m); }));
    j["extra_checkpoints"] = extra;
  }
  return j;
}

inline std::vector<std::string> pipeline_outputs() {
  return {"influence.json", "influence.csv", "phases.json", "curve.csv",
          "spectra.json",   "spectra.csv",   "geometry.json"};
}

// Runs every stage in order and writes the seven reports plus groups.json and manifest.json.
inline int run_pipeline(const RunConfig& c) {
  in_stage("io", [&] { std::filesystem::create_directories(c.out_dir); });
  const Model model = load_model_stage(c.manifest);
  const CorpusInputs corpus = load_corpus(c, model.config().vocab_size);
  const auto checksums = input_checksums(c, &corpus);
  const Prepared prep = prepare(model, corpus, c);
  const SweepOutputs sweep = run_sweep(c, model, corpus, prep, checksums);
  const PhaseAnalysis phases = run_phases(c, sweep.profile, checksums);
  run_spectra(c, model, {sweep.groups.boost, sweep.groups.suppress, sweep.groups.random, sweep.random2}, checksums);
  run_geometry(c, model, prep, sweep.groups, sweep.random2, checksums);

  in_stage("io", [&] {
    nlohmann::json outputs = nlohmann::json::object();
    auto files = pipeline_outputs();
    files.push_back("groups.json");
    for (const auto& f : files) outputs[f] = file_sha256(c.out_dir / f);
    nlohmann::json m = run_block(c, checksums);
    m["kind"] = "run_manifest";
    m["schema_version"] = 1;
    m["eval_positions"] = prep.eval.pairs.size();
    m["segmentation_weak"] = phases.segmentation.weak;
    m["outputs"] = outputs;
    write_json(c.out_dir / "manifest.json", m);
  });
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Oracle: brute-force reruns against the fast path on a neuron sample.

// Loss after mean-ablating `neuron`, per eval pair, via the residual-shift identity.
inline std::vector<double> ablated_losses_fast(const Model& model, std::span<const ForwardCache> caches,
                                               const MeanActivations& means, const EvalSet& eval, std::size_t neuron) {
  std::vector<double> out;
  out.reserve(eval.pairs.size());
  Model::Workspace ws;
  std::vector<double> shifted(model.config().d_model);
  const auto w = model.w_out(neuron);
  for (const auto& p : eval.pairs) {
    const auto& c = caches[p.window];
    const double delta = means.values[neuron] - c.mlp_acts(p.row, neuron);
    for (std::size_t k = 0; k < shifted.size(); ++k) shifted[k] = c.hidden(p.row, k) + delta * w[k];
    out.push_back(model.decode_loss(shifted, p.target, ws));
  }
  return out;
}

// Same quantity by rerunning every window that holds an eval target with the neuron clamped.
inline std::vector<double> ablated_losses_bruteforce(const Model& model, const TokenStream& stream, const EvalSet& eval,
                                                     std::size_t neuron, double mean) {
  std::vector<double> out(eval.pairs.size());
  std::size_t i = 0;
  while (i < eval.pairs.size()) {
    const std::size_t w = eval.pairs[i].window;
    const auto& win = eval.windows[w];
    std::span<const std::uint32_t> ids(stream.ids);
    const auto losses = brute_force_ablate(model, ids.subspan(win.begin, win.length),
                                           ids.subspan(win.begin + 1, win.length), neuron, mean);
    for (; i < eval.pairs.size() && eval.pairs[i].window == w; ++i) out[i] = losses[eval.pairs[i].row];
  }
  return out;
}

struct OracleResult {
  std::vector<std::size_t> neurons;
  double max_loss_deviation = 0.0;
  double max_dloss_deviation = 0.0;
};

inline OracleResult run_oracle(const Model& model, const TokenStream& stream, const Prepared& prep,
                               std::span<const std::size_t> neurons, std::size_t workers = 1) {
  OracleResult r;
  r.neurons.assign(neurons.begin(), neurons.end());
  std::vector<double> loss_dev(neurons.size()), dloss_dev(neurons.size());
  parallel_for(neurons.size(), workers, [&](std::size_t j) {
    const std::size_t i = neurons[j];
    const auto fast = ablated_losses_fast(model, prep.caches, prep.means, prep.eval, i);
    const auto brute = ablated_losses_bruteforce(model, stream, prep.eval, i, prep.means.values[i]);
    double fast_abs = 0.0, brute_abs = 0.0;
    for (std::size_t p = 0; p < fast.size(); ++p) {
      const auto& pair = prep.eval.pairs[p];
      const double base = prep.caches[pair.window].loss[pair.row];
      loss_dev[j] = std::max(loss_dev[j], std::abs(fast[p] - brute[p]));
      fast_abs += std::abs(fast[p] - base);
      brute_abs += std::abs(brute[p] - base);
    }
    dloss_dev[j] = std::abs(fast_abs - brute_abs) / static_cast<double>(fast.size());
  });
  for (std::size_t j = 0; j < neurons.size(); ++j) {
    r.max_loss_deviation = std::max(r.max_loss_deviation, loss_dev[j]);
    r.max_dloss_deviation = std::max(r.max_dloss_deviation, dloss_dev[j]);
  }
  return r;
}

}  // namespace raretok
