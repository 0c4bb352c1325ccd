#pragma once

// Heavy-tailed spectral analysis of neuron-group weight slices: group correlation ESD,
// fix-finger tail threshold and Hill tail index.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raretok/ablation.hpp"
#include "raretok/error.hpp"
#include "raretok/linalg.hpp"
#include "raretok/model.hpp"
#include "raretok/parallel.hpp"

namespace raretok {

enum class Normalization {
  correlation,  // (1/d) W_G W_G^T
  gram,         // unnormalised Gram matrix of the smaller side of W_G
};

enum class WeightSlice {
  mlp_in_rows,     // rows of the final W_in, one per neuron
  mlp_out_columns  // columns of the final W_out (the w_out^(i) vectors)
};

inline std::string to_string(Normalization n) { return n == Normalization::gram ? "gram" : "correlation"; }
inline std::string to_string(WeightSlice s) { return s == WeightSlice::mlp_out_columns ? "mlp_out" : "mlp_in"; }

inline Normalization parse_normalization(const std::string& s) {
  if (s == "gram") return Normalization::gram;
  if (s == "correlation") return Normalization::correlation;
  fail("unknown normalization '", s, "' (expected correlation or gram)");
}

inline WeightSlice parse_weight_slice(const std::string& s) {
  if (s == "mlp_in") return WeightSlice::mlp_in_rows;
  if (s == "mlp_out") return WeightSlice::mlp_out_columns;
  fail("unknown weight slice '", s, "' (expected mlp_in or mlp_out)");
}

struct ESD {
  std::vector<double> eigenvalues;  // ascending, clamped at 0
  std::string label;
  Normalization normalization = Normalization::correlation;
};

struct TailFit {
  std::size_t k = 0;
  double lambda_min = 0.0;
};

// One row per neuron.
inline Matrix neuron_weight_rows(const Model& model, WeightSlice slice) {
  if (slice == WeightSlice::mlp_in_rows) return model.final_mlp_in();
  const std::size_t m = model.config().d_mlp, d = model.config().d_model;
  Matrix out(m, d);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(model.w_out(i).begin(), d, out.row(i).begin());
  return out;
}

inline ESD group_correlation_esd(const Matrix& weights, const NeuronGroup& group,
                                 Normalization normalization = Normalization::correlation) {
  if (group.size() < 3) fail("group too small for spectral analysis");
  const std::size_t d = weights.cols();
  Matrix slice(group.size(), d);
  for (std::size_t r = 0; r < group.size(); ++r) {
    require(group.indices[r] < weights.rows(), "group index ", group.indices[r], " outside weight matrix with ",
            weights.rows(), " rows");
    std::copy_n(weights.row(group.indices[r]).begin(), d, slice.row(r).begin());
  }
  Matrix xi;
  if (normalization == Normalization::correlation) {
    xi = gram_rows(slice, 1.0 / static_cast<double>(d));
  } else {
    xi = slice.rows() <= d ? gram_rows(slice) : gram_rows(slice.transposed());
  }
  ESD esd;
  esd.eigenvalues = sym_eig(xi).eigenvalues;
  // Round-off eigenvalues of a rank-deficient Ξ (|G| > d) are zeros, not tail or bulk members.
  const double floor = esd.eigenvalues.empty() ? 0.0 : 1e-12 * std::max(0.0, esd.eigenvalues.back());
  for (auto& v : esd.eigenvalues) v = v <= floor ? 0.0 : v;
  esd.label = group.display_name();
  esd.normalization = normalization;
  return esd;
}

// Histogram of log10 of the positive eigenvalues; λ_min is the geometric midpoint of the most
// populated bin (lowest bin on ties) and k counts eigenvalues strictly above it.
inline TailFit fix_finger_k(const ESD& esd, std::size_t bins = 64) {
  require(bins >= 8, "fix-finger needs at least 8 bins");
  std::vector<double> logs;
  for (double v : esd.eigenvalues) {
    if (v > 0) logs.push_back(std::log10(v));
  }
  if (logs.size() < 10) fail("fix-finger needs at least 10 positive eigenvalues, got ", logs.size());
  const auto [lo_it, hi_it] = std::minmax_element(logs.begin(), logs.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<std::size_t> counts(bins, 0);
  for (double x : logs) {
    std::size_t b = width > 0 ? static_cast<std::size_t>((x - lo) / width) : 0;
    ++counts[std::min(b, bins - 1)];
  }
  const auto peak = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  TailFit fit;
  fit.lambda_min = std::pow(10.0, lo + (static_cast<double>(peak) + 0.5) * width);
  if (width == 0) fit.lambda_min = std::pow(10.0, lo);
  fit.k = static_cast<std::size_t>(
      std::count_if(esd.eigenvalues.begin(), esd.eigenvalues.end(), [&](double v) { return v > fit.lambda_min; }));
  if (fit.k == 0) fail("degenerate tail; no eigenvalues above peak");
  return fit;
}

// α = [ (1/k) Σ_{i<=k} ln(λ(i) / λ(k+1)) ]^{-1}, eigenvalues in descending order.
inline double hill_alpha(const ESD& esd, std::size_t k) {
  std::vector<double> desc = esd.eigenvalues;
  std::sort(desc.begin(), desc.end(), std::greater<>());
  const auto positive = static_cast<std::size_t>(std::count_if(desc.begin(), desc.end(), [](double v) { return v > 0; }));
  require(k >= 1 && k < desc.size(), "Hill estimator needs 1 <= k < eigencount, got k = ", k);
  if (k >= positive || desc[k] <= 0) fail("non-positive tail threshold");
  const double threshold = std::log(desc[k]);
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += std::log(desc[i]) - threshold;
  if (!(sum > 0)) fail("degenerate tail; top-k eigenvalues equal the threshold");
  return static_cast<double>(k) / sum;
}

struct SpectralEntry {
  std::string checkpoint;
  std::string group;
  std::optional<double> alpha;
  std::size_t k = 0;
  double lambda_min = 0.0;
  std::size_t eigencount = 0;
  std::string error;
};

struct SpectralReport {
  std::vector<SpectralEntry> entries;
  // Per checkpoint: alpha(group) - alpha(random) for each specialised group.
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, double>>>> deltas;
};

struct Checkpoint {
  std::string id;
  const Model* model = nullptr;
};

struct SpectraOptions {
  std::size_t bins = 64;
  Normalization normalization = Normalization::correlation;
  WeightSlice slice = WeightSlice::mlp_in_rows;
  std::size_t workers = 1;
};

inline SpectralEntry analyze_group(const Matrix& weights, const NeuronGroup& group, const std::string& checkpoint,
                                   const SpectraOptions& options) {
  SpectralEntry e;
  e.checkpoint = checkpoint;
  e.group = group.display_name();
  try {
    const ESD esd = group_correlation_esd(weights, group, options.normalization);
    e.eigencount = esd.eigenvalues.size();
    const TailFit tail = fix_finger_k(esd, options.bins);
    e.k = tail.k;
    e.lambda_min = tail.lambda_min;
    e.alpha = hill_alpha(esd, tail.k);
  } catch (const Error& err) {
    e.error = err.what();
  }
  return e;
}

// Errors in one (checkpoint, group) are recorded on that entry and do not stop the others.
inline SpectralReport group_alpha_report(std::span<const Checkpoint> checkpoints, std::span<const NeuronGroup> groups,
                                         const SpectraOptions& options = {}) {
  SpectralReport report;
  std::vector<Matrix> weights(checkpoints.size());
  for (std::size_t c = 0; c < checkpoints.size(); ++c) weights[c] = neuron_weight_rows(*checkpoints[c].model, options.slice);
  report.entries.resize(checkpoints.size() * groups.size());
  parallel_for(report.entries.size(), options.workers, [&](std::size_t i) {
    const std::size_t c = i / groups.size(), g = i % groups.size();
    report.entries[i] = analyze_group(weights[c], groups[g], checkpoints[c].id, options);
  });
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    std::optional<double> random_alpha;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (groups[g].label == GroupLabel::random && !random_alpha) random_alpha = report.entries[c * groups.size() + g].alpha;
    }
    std::vector<std::pair<std::string, double>> d;
    if (random_alpha) {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& e = report.entries[c * groups.size() + g];
        if (groups[g].label != GroupLabel::random && e.alpha) d.emplace_back(e.group, *e.alpha - *random_alpha);
      }
    }
    report.deltas.emplace_back(checkpoints[c].id, std::move(d));
  }
  return report;
}

inline constexpr int kSpectraSchema = 1;

inline nlohmann::json spectra_to_json(const SpectralReport& r, const SpectraOptions& options) {
  nlohmann::json checkpoints = nlohmann::json::array();
  for (const auto& [id, deltas] : r.deltas) {
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& e : r.entries) {
      if (e.checkpoint != id) continue;
      nlohmann::json g = {{"k", e.k}, {"lambda_min", e.lambda_min}, {"eigencount", e.eigencount}};
      g["alpha"] = e.alpha ? nlohmann::json(*e.alpha) : nlohmann::json(nullptr);
      if (!e.error.empty()) g["error"] = e.error;
      groups[e.group] = g;
    }
    nlohmann::json delta = nlohmann::json::object();
    for (const auto& [g, v] : deltas) delta[g + "_minus_random"] = v;
    checkpoints.push_back({{"checkpoint", id}, {"groups", groups}, {"delta_alpha", delta}});
  }
  return {{"kind", "spectra"},
          {"schema_version", kSpectraSchema},
          {"bins", options.bins},
          {"normalization", to_string(options.normalization)},
          {"weight_slice", to_string(options.slice)},
          {"checkpoints", checkpoints}};
}

inline std::string spectra_to_csv(const SpectralReport& r) {
  std::string out = "checkpoint,group,alpha,k,lambda_min\n";
  char buf[128];
  for (const auto& e : r.entries) {
    out += e.checkpoint + "," + e.group + ",";
    if (e.alpha) {
      std::snprintf(buf, sizeof buf, "%.17g", *e.alpha);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%zu,%.17g\n", e.k, e.lambda_min);
    out += buf;
  }
  return out;
}

}  // namespace raretok
