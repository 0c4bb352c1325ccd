#pragma once

// Ranked influence curve, local log-log slope, three-phase segmentation, power-law fit and
// plateau deviation. Natural logs throughout.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raretok/ablation.hpp"
#include "raretok/error.hpp"

namespace raretok {

// Closed rank interval [first, last], 1-based; empty when last < first.
struct RankInterval {
  std::size_t first = 1;
  std::size_t last = 0;

  bool empty() const { return last < first; }
  std::size_t length() const { return empty() ? 0 : last - first + 1; }
  bool contains(std::size_t r) const { return r >= first && r <= last; }
  friend bool operator==(const RankInterval&, const RankInterval&) = default;
};

inline nlohmann::json to_json_value(const RankInterval& r) {
  if (r.empty()) return nlohmann::json::array();
  return nlohmann::json::array({r.first, r.last});
}

struct RankedCurve {
  std::vector<double> log_rank;   // index r-1 holds ln r
  std::vector<double> log_dloss;  // non-increasing
  std::vector<std::size_t> order; // order[r-1] = neuron at rank r
  double epsilon = 1e-12;

  std::size_t size() const { return log_dloss.size(); }
};

struct SlopeCurve {
  std::vector<double> raw;       // index r-1, defined for r in [1, valid_last]
  std::vector<double> smoothed;
  std::size_t window = 9;
  std::size_t valid_last = 0;
  std::size_t n_ranks = 0;
};

struct PhaseSegmentation {
  RankInterval plateau, powerlaw, decay;
  std::size_t change_points[2] = {0, 0};
  double kappa = 0.0;
  double beta = 0.0;
  std::vector<double> deviation;  // δ(r), index r-1
  RankInterval deviation_plateau;
  double plateau_threshold = 0.1;
  double strength = 0.0;
  bool weak = false;
};

// ---------------------------------------------------------------------------

inline RankedCurve rank_curve(const InfluenceProfile& profile, double epsilon = 1e-12) {
  require(epsilon > 0, "epsilon must be positive");
  const auto& v = profile.abs_dloss;
  if (v.empty() || std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
    fail("degenerate influence profile");
  }
  RankedCurve c;
  c.epsilon = epsilon;
  c.order.resize(v.size());
  std::iota(c.order.begin(), c.order.end(), std::size_t{0});
  std::stable_sort(c.order.begin(), c.order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  c.log_rank.resize(v.size());
  c.log_dloss.resize(v.size());
  for (std::size_t r = 0; r < v.size(); ++r) {
    c.log_rank[r] = std::log(static_cast<double>(r + 1));
    c.log_dloss[r] = std::log(std::max(v[c.order[r]], epsilon));
  }
  return c;
}

// Rank paired with r by the e-multiplier finite difference.
inline std::size_t e_rank(std::size_t r) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(r) * std::numbers::e));
}

// raw(r) = ln|Δ|(round(r e)) - ln|Δ|(r), i.e. the local slope -κ(r) over one natural-log unit
// of rank; then a centred moving average of width `window`, truncated at the ends.
inline SlopeCurve local_slope(const RankedCurve& curve, std::size_t window = 9) {
  require(window >= 1, "window must be at least 1");
  const std::size_t n = curve.size();
  if (n < 3) fail("curve too short");
  SlopeCurve s;
  s.window = window;
  s.n_ranks = n;
  std::size_t last = 0;
  while (last + 1 <= n && e_rank(last + 1) <= n) ++last;
  s.valid_last = last;
  s.raw.resize(last);
  for (std::size_t r = 1; r <= last; ++r) {
    s.raw[r - 1] = curve.log_dloss[e_rank(r) - 1] - curve.log_dloss[r - 1];
  }
  s.smoothed.resize(last);
  const std::size_t half = window / 2;
  for (std::size_t i = 0; i < last; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(last - 1, i + (window - 1 - half));
    double sum = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) sum += s.raw[j];
    s.smoothed[i] = sum / static_cast<double>(hi - lo + 1);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Binary segmentation, piecewise-constant mean with L2 cost.

struct Segmentation {
  std::vector<std::size_t> breaks;  // index of the first point of each new segment, ascending
  double strength = 0.0;            // min adjacent |mean difference| / pooled within-segment std
};

namespace detail {

class SegmentCost {
 public:
  explicit SegmentCost(std::span<const double> y) : sum_(y.size() + 1, 0.0), sq_(y.size() + 1, 0.0) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      sum_[i + 1] = sum_[i] + y[i];
      sq_[i + 1] = sq_[i] + y[i] * y[i];
    }
  }
  // Residual sum of squares of [a, b) around its mean.
  double operator()(std::size_t a, std::size_t b) const {
    const double n = static_cast<double>(b - a);
    const double s = sum_[b] - sum_[a];
    return std::max(0.0, (sq_[b] - sq_[a]) - s * s / n);
  }
  double mean(std::size_t a, std::size_t b) const { return (sum_[b] - sum_[a]) / static_cast<double>(b - a); }

 private:
  std::vector<double> sum_, sq_;
};

struct SplitCandidate {
  std::size_t at = 0;
  double gain = -1.0;
};

inline SplitCandidate best_split(const SegmentCost& cost, std::size_t a, std::size_t b, std::size_t min_seg) {
  SplitCandidate best;
  if (b - a < 2 * min_seg) return best;
  const double whole = cost(a, b);
  for (std::size_t k = a + min_seg; k + min_seg <= b; ++k) {
    const double gain = whole - cost(a, k) - cost(k, b);
    if (gain > best.gain) best = {k, gain};
  }
  return best;
}

}  // namespace detail

inline Segmentation binary_segmentation(std::span<const double> y, std::size_t n_breaks = 2, std::size_t min_seg = 5) {
  require(min_seg >= 1, "min segment length must be positive");
  if (y.size() < (n_breaks + 1) * min_seg) fail("insufficient data for segmentation");
  detail::SegmentCost cost(y);
  Segmentation out;
  std::vector<std::size_t> bounds{0, y.size()};
  for (std::size_t b = 0; b < n_breaks; ++b) {
    detail::SplitCandidate best;
    for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
      auto cand = detail::best_split(cost, bounds[s], bounds[s + 1], min_seg);
      if (cand.gain > best.gain) best = cand;
    }
    if (best.gain < 0) fail("insufficient data for segmentation");
    bounds.insert(std::upper_bound(bounds.begin(), bounds.end(), best.at), best.at);
  }
  out.breaks.assign(bounds.begin() + 1, bounds.end() - 1);

  double rss = 0.0;
  for (std::size_t s = 0; s + 1 < bounds.size(); ++s) rss += cost(bounds[s], bounds[s + 1]);
  const double dof = static_cast<double>(y.size() - (bounds.size() - 1));
  const double pooled = std::sqrt(rss / std::max(1.0, dof));
  double min_diff = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s + 2 < bounds.size(); ++s) {
    const double d = std::abs(cost.mean(bounds[s + 1], bounds[s + 2]) - cost.mean(bounds[s], bounds[s + 1]));
    min_diff = std::min(min_diff, d);
  }
  out.strength = pooled > 0 ? min_diff / pooled : std::numeric_limits<double>::infinity();
  return out;
}

// Segmentations whose strength falls below this are flagged weak. Calibrated as the 99th
// percentile of the strength statistic on pure N(0,1) series of 140 points (4000 draws).
inline constexpr double kWeakSegmentationThreshold = 1.46;

struct PhaseBreaks {
  std::size_t change_points[2] = {0, 0};  // ranks, ascending; first rank of power-law and decay phases
  double strength = 0.0;
  bool weak = false;
  std::vector<double> grid_log_rank;      // resampled series the segmentation ran on
  std::vector<double> grid_slope;
};

// Resamples the smoothed slope onto a uniform log-rank grid (same point count as defined ranks,
// linear interpolation in log rank) and splits it into three segments.
inline PhaseBreaks detect_phases(const SlopeCurve& slope, std::size_t min_seg = 5) {
  const std::size_t n = slope.valid_last;
  if (n < 30) fail("insufficient data for segmentation: ", n, " defined slope points, need 30");
  PhaseBreaks out;
  const double top = std::log(static_cast<double>(n));
  out.grid_log_rank.resize(n);
  out.grid_slope.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = top * static_cast<double>(k) / static_cast<double>(n - 1);
    auto lo = static_cast<std::size_t>(std::floor(std::exp(u) + 1e-9));
    lo = std::clamp<std::size_t>(lo, 1, n);
    double value = slope.smoothed[lo - 1];
    if (lo < n) {
      const double a = std::log(static_cast<double>(lo)), b = std::log(static_cast<double>(lo + 1));
      const double w = std::clamp((u - a) / (b - a), 0.0, 1.0);
      value = (1.0 - w) * slope.smoothed[lo - 1] + w * slope.smoothed[lo];
    }
    out.grid_log_rank[k] = u;
    out.grid_slope[k] = value;
  }
  const Segmentation seg = binary_segmentation(out.grid_slope, 2, min_seg);
  std::size_t prev = 1;
  for (std::size_t i = 0; i < 2; ++i) {
    auto r = static_cast<std::size_t>(std::ceil(std::exp(out.grid_log_rank[seg.breaks[i]]) - 1e-9));
    r = std::max(r, prev + 1);
    out.change_points[i] = r;
    prev = r;
  }
  out.strength = seg.strength;
  out.weak = seg.strength < kWeakSegmentationThreshold;
  return out;
}

struct PowerLawFit {
  double kappa = 0.0;
  double beta = 0.0;
  std::vector<double> deviation;  // δ(r) = ln|Δ|(r) - (-κ ln r + β), index r-1
};

inline PowerLawFit fit_powerlaw_and_deviation(const RankedCurve& curve, RankInterval interval) {
  require(!interval.empty() && interval.last <= curve.size(), "power-law interval outside the curve");
  if (interval.length() < 10) fail("power-law interval has ", interval.length(), " ranks, need at least 10");
  const std::size_t a = interval.first - 1, b = interval.last;
  const auto n = static_cast<double>(b - a);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = a; i < b; ++i) {
    mx += curve.log_rank[i];
    my += curve.log_dloss[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = a; i < b; ++i) {
    sxy += (curve.log_rank[i] - mx) * (curve.log_dloss[i] - my);
    sxx += (curve.log_rank[i] - mx) * (curve.log_rank[i] - mx);
  }
  const double slope = sxy / sxx;
  PowerLawFit fit;
  fit.kappa = -slope;
  fit.beta = my - slope * mx;
  fit.deviation.resize(curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    fit.deviation[i] = curve.log_dloss[i] - (-fit.kappa * curve.log_rank[i] + fit.beta);
  }
  return fit;
}

// Longest prefix [1, r*] with δ(r) >= threshold throughout.
inline RankInterval detect_plateau(std::span<const double> deviation, double threshold = 0.1) {
  require(threshold > 0, "plateau threshold must be positive");
  std::size_t r = 0;
  while (r < deviation.size() && deviation[r] >= threshold) ++r;
  return {1, r};
}

struct PhaseOptions {
  std::size_t window = 9;
  double plateau_threshold = 0.1;
  double epsilon = 1e-12;
};

struct PhaseAnalysis {
  RankedCurve curve;
  SlopeCurve slope;
  PhaseBreaks breaks;
  PhaseSegmentation segmentation;
};

inline PhaseAnalysis analyze_phases(const InfluenceProfile& profile, const PhaseOptions& options = {}) {
  PhaseAnalysis a;
  a.curve = rank_curve(profile, options.epsilon);
  a.slope = local_slope(a.curve, options.window);
  a.breaks = detect_phases(a.slope);
  auto& s = a.segmentation;
  const std::size_t n = a.curve.size();
  s.change_points[0] = a.breaks.change_points[0];
  s.change_points[1] = a.breaks.change_points[1];
  s.plateau = {1, s.change_points[0] - 1};
  s.powerlaw = {s.change_points[0], s.change_points[1] - 1};
  s.decay = {s.change_points[1], n};
  const auto fit = fit_powerlaw_and_deviation(a.curve, s.powerlaw);
  s.kappa = fit.kappa;
  s.beta = fit.beta;
  s.deviation = fit.deviation;
  s.plateau_threshold = options.plateau_threshold;
  s.deviation_plateau = detect_plateau(s.deviation, options.plateau_threshold);
  s.strength = a.breaks.strength;
  s.weak = a.breaks.weak;
  return a;
}

inline constexpr int kPhasesSchema = 1;

inline nlohmann::json phases_to_json(const PhaseAnalysis& a, const PhaseOptions& options) {
  const auto& s = a.segmentation;
  const auto n = static_cast<double>(a.curve.size());
  return {{"kind", "phases"},
          {"schema_version", kPhasesSchema},
          {"n_neurons", a.curve.size()},
          {"window", options.window},
          {"epsilon", options.epsilon},
          {"plateau_threshold", s.plateau_threshold},
          {"change_points", {s.change_points[0], s.change_points[1]}},
          {"intervals",
           {{"plateau", to_json_value(s.plateau)},
            {"powerlaw", to_json_value(s.powerlaw)},
            {"decay", to_json_value(s.decay)}}},
          {"fractions",
           {{"plateau", s.plateau.length() / n}, {"powerlaw", s.powerlaw.length() / n}, {"decay", s.decay.length() / n}}},
          {"kappa", s.kappa},
          {"beta", s.beta},
          {"deviation_plateau", to_json_value(s.deviation_plateau)},
          {"segmentation_strength", s.strength},
          {"segmentation_weak", s.weak},
          {"rank_order", a.curve.order}};
}

// rank, log_rank, log_dloss, slope (smoothed; blank where undefined), delta
inline std::string curve_to_csv(const PhaseAnalysis& a) {
  std::string out = "rank,log_rank,log_dloss,slope,delta\n";
  char buf[160];
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,", i + 1, a.curve.log_rank[i], a.curve.log_dloss[i]);
    out += buf;
    if (i < a.slope.valid_last) {
      std::snprintf(buf, sizeof buf, "%.17g", a.slope.smoothed[i]);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g\n", a.segmentation.deviation[i]);
    out += buf;
  }
  return out;
}

}  // namespace raretok
