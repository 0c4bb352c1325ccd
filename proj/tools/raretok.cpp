// raretok: rare-token neuron analysis of the final MLP layer.
//
//   raretok run       full pipeline, all reports
//   raretok sweep     influence sweep + groups
//   raretok phases    rank/slope/phase analysis from influence.json
//   raretok spectra   Hill tail indices per group and checkpoint
//   raretok geometry  activation-space statistics per group
//   raretok oracle    brute-force check of the fast ablation path
//   raretok make-toy  write the seeded toy model and corpus

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "raretok/pipeline.hpp"
#include "raretok/toy.hpp"

namespace {

using namespace raretok;

void add_model_inputs(CLI::App* app, RunConfig& c, bool corpus) {
  app->add_option("--manifest", c.manifest, "model manifest JSON")->required();
  if (!corpus) return;
  app->add_option("--tokens", c.tokens, "RTK1 token stream")->required();
  app->add_option("--mask", c.mask, "RWM1 validity mask")->required();
  app->add_option("--freq", c.frequencies, "RFQ1 frequency table (default: counts from --tokens)");
  app->add_option("--percentile", c.percentile, "frequency percentile for rare targets")->capture_default_str();
  app->add_option("--context-len", c.context_len, "scoring window length")->capture_default_str();
  app->add_option("--max-positions", c.max_positions, "subsample eval targets (0 = all)")->capture_default_str();
}

void add_group_options(CLI::App* app, RunConfig& c) {
  app->add_option("--group-size", c.group_size, "neurons per group")->capture_default_str();
  app->add_option("--seed", c.seed, "seed for random groups and subsampling")->capture_default_str();
}

void add_phase_options(CLI::App* app, RunConfig& c) {
  app->add_option("--window", c.window, "slope smoothing window")->capture_default_str();
  app->add_option("--plateau-threshold", c.plateau_threshold, "plateau deviation threshold")->capture_default_str();
}

void add_spectra_options(CLI::App* app, RunConfig& c) {
  app->add_option("--checkpoint", c.extra_checkpoints, "additional checkpoint manifests");
  app->add_option("--bins", c.bins, "fix-finger histogram bins")->capture_default_str();
  app->add_option("--normalization", c.normalization, "correlation | gram")->capture_default_str();
  app->add_option("--weight-slice", c.weight_slice, "mlp_in | mlp_out")->capture_default_str();
}

void add_geometry_options(CLI::App* app, RunConfig& c) {
  app->add_option("--tau", c.tau, "cumulative variance threshold for d_eff")->capture_default_str();
  app->add_option("--cluster-threshold", c.cluster_threshold, "Ward cut height")->capture_default_str();
}

void add_common(CLI::App* app, RunConfig& c) {
  app->add_option("--workers", c.workers, "worker threads (default: RTN_WORKERS or 1)");
}

std::vector<NeuronGroup> load_groups(const std::filesystem::path& path) {
  return in_stage("io", [&] { return groups_from_json(read_json(path)); });
}

NeuronGroups pick_groups(const std::vector<NeuronGroup>& groups, NeuronGroup& random2) {
  NeuronGroups g;
  bool have_b = false, have_s = false, have_r = false, have_r2 = false;
  for (const auto& x : groups) {
    if (x.label == GroupLabel::boost && !have_b) g.boost = x, have_b = true;
    else if (x.label == GroupLabel::suppress && !have_s) g.suppress = x, have_s = true;
    else if (x.label == GroupLabel::random && !have_r) g.random = x, have_r = true;
    else if (x.label == GroupLabel::random && !have_r2) random2 = x, have_r2 = true;
  }
  if (!(have_b && have_s && have_r && have_r2)) {
    throw StageError("geometry", "groups file needs boost, suppress and two random groups", kExitInput);
  }
  return g;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rare-token neuron analysis of a transformer's final MLP layer"};
  app.require_subcommand(1);
  RunConfig c;
  std::filesystem::path influence_path, groups_path, toy_dir;
  std::size_t sample = 16;
  std::uint64_t toy_seed = toy::ToySpec{}.seed;

  auto* run = app.add_subcommand("run", "run every stage and write all reports");
  add_model_inputs(run, c, true);
  add_group_options(run, c);
  add_phase_options(run, c);
  add_spectra_options(run, c);
  add_geometry_options(run, c);
  add_common(run, c);
  run->add_option("--out", c.out_dir, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "mean-ablation influence sweep");
  add_model_inputs(sweep, c, true);
  add_group_options(sweep, c);
  add_common(sweep, c);
  sweep->add_option("--out", c.out_dir, "output directory")->required();

  auto* phases = app.add_subcommand("phases", "phase analysis of an influence profile");
  phases->add_option("--influence", influence_path, "influence.json from sweep")->required();
  add_phase_options(phases, c);
  phases->add_option("--out", c.out_dir, "output directory")->required();

  auto* spectra = app.add_subcommand("spectra", "Hill tail indices of group weight spectra");
  add_model_inputs(spectra, c, false);
  add_spectra_options(spectra, c);
  add_group_options(spectra, c);
  add_common(spectra, c);
  auto* sp_groups = spectra->add_option("--groups", groups_path, "groups.json from sweep");
  spectra->add_option("--influence", influence_path, "influence.json (groups re-derived)")->excludes(sp_groups);
  spectra->add_option("--out", c.out_dir, "output directory")->required();

  auto* geometry = app.add_subcommand("geometry", "activation geometry of neuron groups");
  add_model_inputs(geometry, c, true);
  add_geometry_options(geometry, c);
  add_common(geometry, c);
  geometry->add_option("--seed", c.seed, "seed used for eval subsampling")->capture_default_str();
  geometry->add_option("--groups", groups_path, "groups.json from sweep")->required();
  geometry->add_option("--out", c.out_dir, "output directory")->required();

  auto* oracle = app.add_subcommand("oracle", "compare the fast ablation path with full reruns");
  add_model_inputs(oracle, c, true);
  add_common(oracle, c);
  oracle->add_option("--sample", sample, "number of neurons to check")->capture_default_str();
  oracle->add_option("--seed", c.seed, "neuron sampling seed")->capture_default_str();

  auto* make_toy = app.add_subcommand("make-toy", "write the seeded toy model and corpus");
  make_toy->add_option("--out", toy_dir, "output directory")->required();
  make_toy->add_option("--seed", toy_seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (*run) return run_pipeline(c);

    if (*make_toy) {
      toy::ToySpec spec;
      spec.seed = toy_seed;
      const auto p = in_stage("io", [&] { return toy::write_assets(toy_dir, spec); });
      std::cout << "manifest " << p.manifest.string() << "\ntokens " << p.tokens.string() << "\nmask "
                << p.mask.string() << "\nfreq " << p.frequencies.string() << "\n";
      return kExitOk;
    }

    if (*phases) {
      in_stage("io", [&] { std::filesystem::create_directories(c.out_dir); });
      const auto profile = in_stage("phases", [&] { return influence_from_json(read_json(influence_path)); });
      const nlohmann::json checksums = {{"influence", in_stage("io", [&] { return file_sha256(influence_path); })}};
      const auto a = run_phases(c, profile, checksums);
      std::cout << "kappa " << a.segmentation.kappa << " change points " << a.segmentation.change_points[0] << " "
                << a.segmentation.change_points[1] << (a.segmentation.weak ? " (weak segmentation)" : "") << "\n";
      return kExitOk;
    }

    if (*spectra) {
      in_stage("io", [&] { std::filesystem::create_directories(c.out_dir); });
      const Model model = load_model_stage(c.manifest);
      std::vector<NeuronGroup> groups;
      nlohmann::json checksums = input_checksums(c, nullptr);
      if (!groups_path.empty()) {
        groups = load_groups(groups_path);
        checksums["groups"] = file_sha256(groups_path);
      } else if (!influence_path.empty()) {
        groups = in_stage("spectra", [&] {
          const auto g = classify_groups(influence_from_json(read_json(influence_path)), c.group_size, c.seed);
          return std::vector<NeuronGroup>{g.boost, g.suppress, g.random};
        });
        checksums["influence"] = file_sha256(influence_path);
      } else {
        throw StageError("spectra", "spectra needs --groups or --influence", kExitInput);
      }
      run_spectra(c, model, groups, checksums);
      return kExitOk;
    }

    const Model model = load_model_stage(c.manifest);
    const CorpusInputs corpus = load_corpus(c, model.config().vocab_size);
    nlohmann::json checksums = input_checksums(c, &corpus);
    const Prepared prep = prepare(model, corpus, c);

    if (*sweep) {
      in_stage("io", [&] { std::filesystem::create_directories(c.out_dir); });
      run_sweep(c, model, corpus, prep, checksums);
      return kExitOk;
    }

    if (*geometry) {
      in_stage("io", [&] { std::filesystem::create_directories(c.out_dir); });
      NeuronGroup random2;
      const auto groups = pick_groups(load_groups(groups_path), random2);
      checksums["groups"] = file_sha256(groups_path);
      run_geometry(c, model, prep, groups, random2, checksums);
      return kExitOk;
    }

    if (*oracle) {
      const auto result = in_stage("oracle", [&] {
        std::vector<std::size_t> all(model.config().d_mlp);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        Rng rng(c.seed);
        auto neurons = rng.sample(all, std::min(sample, all.size()));
        std::sort(neurons.begin(), neurons.end());
        return run_oracle(model, corpus.stream, prep, neurons, resolve_workers(c.workers));
      });
      std::cout << "neurons " << result.neurons.size() << " eval_positions " << prep.eval.pairs.size() << "\n";
      std::cout.precision(6);
      std::cout << std::scientific << "max_loss_deviation " << result.max_loss_deviation << "\nmax_dloss_deviation "
                << result.max_dloss_deviation << "\n";
      return result.max_dloss_deviation <= 1e-5 && result.max_loss_deviation <= 1e-5 ? kExitOk : kExitInternal;
    }
  } catch (const StageError& e) {
    std::cerr << e.to_json() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << StageError("internal", e.what(), kExitInternal).to_json() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
