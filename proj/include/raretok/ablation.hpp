#pragma once

// Mean-ablation influence of final-MLP neurons.
//
// Clamping neuron i to its mean n̄_i changes the final residual by exactly (n̄_i - n_i) w_out^(i),
// so the sweep decodes x + (n̄_i - n_i) w_out^(i) instead of rerunning the network.
// brute_force_ablate reruns the network and is the oracle for that identity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raretok/corpus.hpp"
#include "raretok/error.hpp"
#include "raretok/model.hpp"
#include "raretok/parallel.hpp"
#include "raretok/random.hpp"

namespace raretok {

struct MeanActivations {
  std::vector<double> values;
  std::size_t samples = 0;
  std::string source;
};

struct InfluenceProfile {
  std::vector<double> abs_dloss;
  std::vector<double> signed_effect;
  std::string eval_descriptor;
  std::string model_descriptor;

  std::size_t size() const { return abs_dloss.size(); }
};

enum class GroupLabel { boost, suppress, random, custom };

inline std::string to_string(GroupLabel l) {
  switch (l) {
    case GroupLabel::boost: return "boost";
    case GroupLabel::suppress: return "suppress";
    case GroupLabel::random: return "random";
    case GroupLabel::custom: return "custom";
  }
  return "custom";
}

inline GroupLabel parse_group_label(const std::string& s) {
  if (s == "boost") return GroupLabel::boost;
  if (s == "suppress") return GroupLabel::suppress;
  if (s == "random") return GroupLabel::random;
  return GroupLabel::custom;
}

struct NeuronGroup {
  std::vector<std::size_t> indices;  // sorted, unique
  GroupLabel label = GroupLabel::custom;
  std::string name;                  // defaults to the label
  std::uint64_t seed = 0;

  std::size_t size() const { return indices.size(); }
  std::string display_name() const { return name.empty() ? to_string(label) : name; }
};

struct NeuronGroups {
  NeuronGroup boost, suppress, random;
};

// ---------------------------------------------------------------------------

// Teacher-forced forward over every scoring window, windows distributed over workers.
inline std::vector<ForwardCache> compute_caches(const Model& model, const TokenStream& stream,
                                                std::span<const ScoringWindow> windows, std::size_t workers = 1,
                                                std::optional<Clamp> clamp = std::nullopt) {
  std::vector<ForwardCache> caches(windows.size());
  parallel_for(windows.size(), workers, [&](std::size_t w) {
    const auto& win = windows[w];
    std::span<const std::uint32_t> ids(stream.ids);
    caches[w] = model.forward(ids.subspan(win.begin, win.length), ids.subspan(win.begin + 1, win.length), clamp);
  });
  return caches;
}

inline MeanActivations mean_activations(std::span<const ForwardCache> caches) {
  require(!caches.empty(), "mean_activations needs at least one cache");
  const std::size_t m = caches.front().mlp_acts.cols();
  std::vector<long double> sums(m, 0.0L);
  std::size_t samples = 0;
  for (const auto& c : caches) {
    require(c.mlp_acts.cols() == m, "caches disagree on d_mlp");
    for (std::size_t t = 0; t < c.mlp_acts.rows(); ++t) {
      const auto row = c.mlp_acts.row(t);
      for (std::size_t i = 0; i < m; ++i) sums[i] += row[i];
    }
    samples += c.mlp_acts.rows();
  }
  require(samples > 0, "mean_activations needs at least one position");
  MeanActivations out;
  out.samples = samples;
  out.values.resize(m);
  for (std::size_t i = 0; i < m; ++i) out.values[i] = static_cast<double>(sums[i] / static_cast<long double>(samples));
  return out;
}

// Keeps at most max_positions eval pairs, chosen uniformly with the seed, in stream order.
inline EvalSet subsample_eval(EvalSet eval, std::size_t max_positions, std::uint64_t seed) {
  if (max_positions == 0 || eval.pairs.size() <= max_positions) return eval;
  std::vector<std::size_t> idx(eval.pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  auto keep = rng.sample(idx, max_positions);
  std::sort(keep.begin(), keep.end());
  std::vector<EvalPair> pairs;
  pairs.reserve(keep.size());
  for (auto i : keep) pairs.push_back(std::move(eval.pairs[i]));
  eval.pairs = std::move(pairs);
  return eval;
}

struct SweepOptions {
  std::size_t workers = 1;
  std::size_t tile = 16;
};

inline InfluenceProfile influence_sweep(const Model& model, std::span<const ForwardCache> caches,
                                        const MeanActivations& means, const EvalSet& eval,
                                        const SweepOptions& options = {}) {
  const std::size_t m = model.config().d_mlp, d = model.config().d_model;
  require(means.values.size() == m, "mean activations have ", means.values.size(), " entries, d_mlp is ", m);
  require(!eval.pairs.empty(), "influence_sweep needs a non-empty eval set");
  for (const auto& p : eval.pairs) {
    require(p.window < caches.size() && p.row < caches[p.window].length(), "eval position ", p.position,
            " is not covered by the caches");
    require(caches[p.window].targets[p.row] == p.target, "cache target at eval position ", p.position,
            " does not match the eval set");
  }

  InfluenceProfile out;
  out.abs_dloss.assign(m, 0.0);
  out.signed_effect.assign(m, 0.0);
  const std::size_t tile = std::max<std::size_t>(1, options.tile);
  const std::size_t n_tiles = (m + tile - 1) / tile;
  const auto n_eval = static_cast<double>(eval.pairs.size());

  // Each neuron is owned by exactly one tile and reduced in eval order, so the result does not
  // depend on the worker count.
  parallel_for(n_tiles, options.workers, [&](std::size_t t) {
    const std::size_t lo = t * tile, hi = std::min(m, lo + tile);
    Model::Workspace ws;
    std::vector<double> shifted(d);
    std::vector<double> abs_sum(hi - lo, 0.0), signed_sum(hi - lo, 0.0);
    for (const auto& p : eval.pairs) {
      const ForwardCache& c = caches[p.window];
      const auto x = c.hidden.row(p.row);
      const auto n = c.mlp_acts.row(p.row);
      const double base = c.loss[p.row];
      for (std::size_t i = lo; i < hi; ++i) {
        const double delta = means.values[i] - n[i];
        const auto w = model.w_out(i);
        for (std::size_t k = 0; k < d; ++k) shifted[k] = x[k] + delta * w[k];
        const double diff = model.decode_loss(shifted, p.target, ws) - base;
        abs_sum[i - lo] += std::abs(diff);
        signed_sum[i - lo] += diff;
      }
    }
    for (std::size_t i = lo; i < hi; ++i) {
      out.abs_dloss[i] = abs_sum[i - lo] / n_eval;
      out.signed_effect[i] = signed_sum[i - lo] / n_eval;
    }
  });
  return out;
}

// Full forward pass with neuron `neuron` of the final MLP clamped to `mean` at every position.
inline std::vector<double> brute_force_ablate(const Model& model, std::span<const std::uint32_t> tokens,
                                              std::span<const std::uint32_t> targets, std::size_t neuron,
                                              double mean) {
  require(neuron < model.config().d_mlp, "neuron ", neuron, " >= d_mlp ", model.config().d_mlp);
  return model.forward(tokens, targets, Clamp{neuron, mean}).loss;
}

// ---------------------------------------------------------------------------
// Groups

inline NeuronGroup draw_random_group(std::size_t d_mlp, std::span<const std::size_t> exclude, std::size_t k,
                                     std::uint64_t seed) {
  std::vector<bool> taken(d_mlp, false);
  for (auto i : exclude) taken.at(i) = true;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < d_mlp; ++i) {
    if (!taken[i]) pool.push_back(i);
  }
  if (pool.size() < k) fail("only ", pool.size(), " neurons available for a random group of size ", k);
  Rng rng(seed);
  NeuronGroup g;
  g.indices = rng.sample(std::move(pool), k);
  std::sort(g.indices.begin(), g.indices.end());
  g.label = GroupLabel::random;
  g.seed = seed;
  return g;
}

// boost: top-k |Δloss| with s_i > 0 (the neuron was lowering loss on rare targets);
// suppress: top-k |Δloss| with s_i < 0; random: k seeded draws outside both.
inline NeuronGroups classify_groups(const InfluenceProfile& profile, std::size_t k, std::uint64_t seed) {
  const std::size_t m = profile.size();
  require(k >= 1 && 3 * k <= m, "group size ", k, " must satisfy 1 <= k <= d_mlp/3 (d_mlp = ", m, ")");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < m; ++i) {
    if (profile.signed_effect[i] > 0) pos.push_back(i);
    if (profile.signed_effect[i] < 0) neg.push_back(i);
  }
  if (pos.empty() && neg.empty()) fail("no signed candidates: every neuron has zero signed effect");
  if (pos.size() < k || neg.size() < k) {
    fail("not enough signed candidates for k = ", k, ": ", pos.size(), " boosting, ", neg.size(), " suppressing");
  }
  auto top = [&](std::vector<std::size_t> c, GroupLabel label) {
    std::stable_sort(c.begin(), c.end(),
                     [&](std::size_t a, std::size_t b) { return profile.abs_dloss[a] > profile.abs_dloss[b]; });
    c.resize(k);
    std::sort(c.begin(), c.end());
    NeuronGroup g;
    g.indices = std::move(c);
    g.label = label;
    g.seed = seed;
    return g;
  };
  NeuronGroups out;
  out.boost = top(std::move(pos), GroupLabel::boost);
  out.suppress = top(std::move(neg), GroupLabel::suppress);
  std::vector<std::size_t> exclude = out.boost.indices;
  exclude.insert(exclude.end(), out.suppress.indices.begin(), out.suppress.indices.end());
  out.random = draw_random_group(m, exclude, k, seed);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kInfluenceSchema = 1;
inline constexpr int kGroupsSchema = 1;

inline nlohmann::json influence_to_json(const InfluenceProfile& p) {
  std::vector<std::size_t> neuron(p.size());
  for (std::size_t i = 0; i < neuron.size(); ++i) neuron[i] = i;
  return {{"kind", "influence"},
          {"schema_version", kInfluenceSchema},
          {"eval", p.eval_descriptor},
          {"model", p.model_descriptor},
          {"neuron", neuron},
          {"abs_dloss", p.abs_dloss},
          {"signed_effect", p.signed_effect}};
}

inline void check_schema(const nlohmann::json& j, const std::string& kind, int version) {
  if (!j.is_object() || j.value("kind", std::string()) != kind || j.value("schema_version", -1) != version) {
    fail("schema mismatch, rerun earlier stage (expected ", kind, " schema_version ", version, ")");
  }
}

inline InfluenceProfile influence_from_json(const nlohmann::json& j) {
  check_schema(j, "influence", kInfluenceSchema);
  InfluenceProfile p;
  j.at("abs_dloss").get_to(p.abs_dloss);
  j.at("signed_effect").get_to(p.signed_effect);
  p.eval_descriptor = j.value("eval", std::string());
  p.model_descriptor = j.value("model", std::string());
  if (p.abs_dloss.size() != p.signed_effect.size()) fail("influence arrays differ in length");
  return p;
}

inline std::string influence_to_csv(const InfluenceProfile& p) {
  std::string out = "neuron,abs_dloss,signed_effect\n";
  char buf[96];
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, p.abs_dloss[i], p.signed_effect[i]);
    out += buf;
  }
  return out;
}

inline nlohmann::json group_to_json(const NeuronGroup& g) {
  return {{"label", to_string(g.label)}, {"name", g.display_name()}, {"seed", g.seed}, {"indices", g.indices}};
}

inline NeuronGroup group_from_json(const nlohmann::json& j) {
  NeuronGroup g;
  g.label = parse_group_label(j.at("label").get<std::string>());
  g.name = j.value("name", std::string());
  g.seed = j.value("seed", std::uint64_t{0});
  j.at("indices").get_to(g.indices);
  std::sort(g.indices.begin(), g.indices.end());
  if (std::adjacent_find(g.indices.begin(), g.indices.end()) != g.indices.end()) {
    fail("group '", g.display_name(), "' has duplicate indices");
  }
  return g;
}

inline nlohmann::json groups_to_json(const std::vector<NeuronGroup>& groups) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& g : groups) list.push_back(group_to_json(g));
  return {{"kind", "groups"}, {"schema_version", kGroupsSchema}, {"groups", list}};
}

inline std::vector<NeuronGroup> groups_from_json(const nlohmann::json& j) {
  check_schema(j, "groups", kGroupsSchema);
  std::vector<NeuronGroup> out;
  for (const auto& g : j.at("groups")) out.push_back(group_from_json(g));
  return out;
}

}  // namespace raretok
