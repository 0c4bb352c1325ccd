#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "raretok/phases.hpp"
#include "raretok/random.hpp"

namespace raretok {
namespace {

InfluenceProfile profile_from(std::vector<double> abs) {
  InfluenceProfile p;
  p.signed_effect.assign(abs.size(), 0.0);
  p.abs_dloss = std::move(abs);
  return p;
}

InfluenceProfile power_law(std::size_t n, double kappa, double beta) {
  std::vector<double> v(n);
  for (std::size_t r = 1; r <= n; ++r) v[r - 1] = std::exp(-kappa * std::log(static_cast<double>(r)) + beta);
  return profile_from(v);
}

// Three-regime slope series: 40 x -0.1, 60 x -1.2, 40 x -4.0, plus N(0, sigma) noise.
std::vector<double> three_regime(std::uint64_t seed, double sigma) {
  Rng rng(seed);
  std::vector<double> y;
  for (int i = 0; i < 140; ++i) {
    const double level = i < 40 ? -0.1 : i < 100 ? -1.2 : -4.0;
    y.push_back(level + sigma * rng.normal());
  }
  return y;
}

TEST(RankCurve, SortsDescending) {
  const auto c = rank_curve(profile_from({3, 1, 2}));
  EXPECT_EQ(c.order, (std::vector<std::size_t>{0, 2, 1}));
  EXPECT_EQ(c.log_dloss, (std::vector<double>{std::log(3.0), std::log(2.0), 0.0}));
  EXPECT_EQ(c.log_rank[1], std::log(2.0));
}

TEST(RankCurve, TiesKeepLowerIndexFirst) {
  const auto c = rank_curve(profile_from({1, 5, 5, 0.5}));
  EXPECT_EQ(c.order, (std::vector<std::size_t>{1, 2, 0, 3}));
}

TEST(RankCurve, FloorsAtEpsilon) {
  const auto c = rank_curve(profile_from({1, 0}), 1e-12);
  EXPECT_EQ(c.log_dloss[0], 0.0);
  EXPECT_EQ(c.log_dloss[1], std::log(1e-12));
}

TEST(RankCurve, AllZeroIsDegenerate) {
  try {
    rank_curve(profile_from({0, 0, 0}));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate influence profile"), std::string::npos);
  }
}

TEST(RankCurve, MonotoneAndBijective) {
  Rng rng(1);
  std::vector<double> v(500);
  for (auto& x : v) x = rng.uniform() < 0.1 ? 0.0 : std::exp(rng.normal() * 4);
  const auto c = rank_curve(profile_from(v));
  for (std::size_t r = 1; r < c.size(); ++r) EXPECT_LE(c.log_dloss[r], c.log_dloss[r - 1]);
  std::vector<std::size_t> sorted = c.order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

// ---------------------------------------------------------------------------

TEST(LocalSlope, ExactPowerLawGivesExponent) {
  const auto s = local_slope(rank_curve(power_law(2000, 2.0, 0.0)), 9);
  EXPECT_EQ(s.valid_last, 735u);  // round(735 e) = 1998, round(736 e) = 2001
  for (std::size_t r = 20; r <= 700; ++r) {
    EXPECT_NEAR(s.smoothed[r - 1], -2.0, 0.02) << "r=" << r;
    const double closed = -2.0 * (std::log(static_cast<double>(e_rank(r))) - std::log(static_cast<double>(r)));
    EXPECT_NEAR(s.raw[r - 1], closed, 1e-9);
  }
}

TEST(LocalSlope, ConstantCurveIsFlat) {
  const auto s = local_slope(rank_curve(profile_from(std::vector<double>(100, 0.3))), 9);
  for (double v : s.smoothed) EXPECT_EQ(v, 0.0);
}

TEST(LocalSlope, ExponentialCurveSteepensLinearly) {
  std::vector<double> v(60);
  for (std::size_t r = 1; r <= 60; ++r) v[r - 1] = std::exp(-static_cast<double>(r));
  const auto s = local_slope(rank_curve(profile_from(v), 1e-300), 1);
  for (std::size_t r = 1; r <= s.valid_last; ++r) {
    EXPECT_NEAR(s.raw[r - 1], -(static_cast<double>(e_rank(r)) - static_cast<double>(r)), 1e-9);
    EXPECT_EQ(s.smoothed[r - 1], s.raw[r - 1]);
  }
}

TEST(LocalSlope, SmoothingTruncatesAtEnds) {
  std::vector<double> v(40);
  for (std::size_t r = 1; r <= 40; ++r) v[r - 1] = std::exp(-0.01 * static_cast<double>(r * r));
  const auto s = local_slope(rank_curve(profile_from(v)), 5);
  EXPECT_NEAR(s.smoothed[0], (s.raw[0] + s.raw[1] + s.raw[2]) / 3, 1e-12);
  const std::size_t n = s.valid_last;
  EXPECT_NEAR(s.smoothed[n - 1], (s.raw[n - 1] + s.raw[n - 2] + s.raw[n - 3]) / 3, 1e-12);
  EXPECT_NEAR(s.smoothed[5], (s.raw[3] + s.raw[4] + s.raw[5] + s.raw[6] + s.raw[7]) / 5, 1e-12);
}

TEST(LocalSlope, TooShort) {
  EXPECT_THROW(local_slope(rank_curve(profile_from({2, 1}))), Error);
}

// ---------------------------------------------------------------------------

TEST(Segmentation, NoiselessBreaksAreExact) {
  const auto seg = binary_segmentation(three_regime(0, 0.0));
  EXPECT_EQ(seg.breaks, (std::vector<std::size_t>{40, 100}));
}

TEST(Segmentation, RecoversBreaksUnderNoise) {
  int hits = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const auto seg = binary_segmentation(three_regime(seed, 0.05));
    const bool ok = std::abs(static_cast<long>(seg.breaks[0]) - 40) <= 3 &&
                    std::abs(static_cast<long>(seg.breaks[1]) - 100) <= 3;
    hits += ok;
    EXPECT_FALSE(seg.strength < kWeakSegmentationThreshold);
  }
  EXPECT_GE(hits, 95);
}

TEST(Segmentation, PureNoiseIsWeak) {
  int weak = 0;
  for (std::uint64_t seed = 500; seed < 600; ++seed) {
    Rng rng(seed);
    std::vector<double> y(140);
    for (auto& v : y) v = -1.0 + 0.05 * rng.normal();
    weak += binary_segmentation(y).strength < kWeakSegmentationThreshold;
  }
  EXPECT_GE(weak, 95);
}

TEST(Segmentation, RespectsMinimumSegment) {
  std::vector<double> y(30, 0.0);
  y[0] = 10;  // a lone outlier cannot form its own segment
  const auto seg = binary_segmentation(y, 2, 5);
  EXPECT_GE(seg.breaks[0], 5u);
  EXPECT_GE(seg.breaks[1] - seg.breaks[0], 5u);
  EXPECT_LE(seg.breaks[1], 25u);
}

TEST(Segmentation, InsufficientData) {
  try {
    binary_segmentation(std::vector<double>(14, 1.0), 2, 5);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient data for segmentation"), std::string::npos);
  }
}

TEST(DetectPhases, NeedsThirtyPoints) {
  const auto s = local_slope(rank_curve(power_law(60, 1.0, 0.0)));
  EXPECT_LT(s.valid_last, 30u);
  EXPECT_THROW(detect_phases(s), Error);
}

TEST(DetectPhases, FindsKneesOfPiecewisePowerLaw) {
  // Flat to rank 10, slope -1 to rank 100, slope -3 after. The forward difference over one
  // e-fold sees a knee at K from rank K/e on, so change points land within [K/e, K].
  std::vector<double> v(1000);
  for (std::size_t r = 1; r <= v.size(); ++r) {
    const double lr = std::log(static_cast<double>(r));
    const double y = -std::max(0.0, lr - std::log(10.0)) - 2.0 * std::max(0.0, lr - std::log(100.0));
    v[r - 1] = std::exp(y);
  }
  const auto b = detect_phases(local_slope(rank_curve(profile_from(v)), 9));
  EXPECT_GE(b.change_points[0], 3u);
  EXPECT_LE(b.change_points[0], 11u);
  EXPECT_GE(b.change_points[1], 36u);
  EXPECT_LE(b.change_points[1], 101u);
  EXPECT_FALSE(b.weak);
}

// ---------------------------------------------------------------------------

RankedCurve biased_power_law(std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t r = 1; r <= n; ++r) {
    v[r - 1] = std::exp(-1.5 * std::log(static_cast<double>(r)) + 2.0 + (r <= 10 ? 0.5 : 0.0));
  }
  return rank_curve(profile_from(v));
}

TEST(PowerLawFit, ExactCurve) {
  const auto c = rank_curve(power_law(300, 1.5, 2.0));
  const auto fit = fit_powerlaw_and_deviation(c, {1, 300});
  EXPECT_NEAR(fit.kappa, 1.5, 1e-10);
  EXPECT_NEAR(fit.beta, 2.0, 1e-10);
  for (double d : fit.deviation) EXPECT_NEAR(d, 0.0, 1e-10);
}

TEST(PowerLawFit, HeadBiasShowsAsDeviation) {
  const auto fit = fit_powerlaw_and_deviation(biased_power_law(300), {20, 200});
  EXPECT_NEAR(fit.kappa, 1.5, 1e-10);
  for (std::size_t r = 1; r <= 10; ++r) EXPECT_NEAR(fit.deviation[r - 1], 0.5, 1e-10);
  for (std::size_t r = 11; r <= 300; ++r) EXPECT_NEAR(fit.deviation[r - 1], 0.0, 1e-10);
  EXPECT_EQ(detect_plateau(fit.deviation, 0.1), (RankInterval{1, 10}));
}

TEST(PowerLawFit, RecoversExponentUnderNoise) {
  Rng rng(77);
  std::vector<double> v(1000);
  for (std::size_t r = 1; r <= v.size(); ++r) {
    v[r - 1] = std::exp(-1.5 * std::log(static_cast<double>(r)) + 2.0 + 0.05 * rng.normal());
  }
  // Fit against the unsorted construction: ranks are the construction index here.
  RankedCurve c;
  for (std::size_t r = 1; r <= v.size(); ++r) {
    c.log_rank.push_back(std::log(static_cast<double>(r)));
    c.log_dloss.push_back(std::log(v[r - 1]));
  }
  const auto fit = fit_powerlaw_and_deviation(c, {1, 1000});
  EXPECT_NEAR(fit.kappa, 1.5, 0.02);
  EXPECT_NEAR(fit.beta, 2.0, 0.02);
}

TEST(PowerLawFit, ShortIntervalRejected) {
  EXPECT_THROW(fit_powerlaw_and_deviation(rank_curve(power_law(50, 1, 0)), {1, 9}), Error);
}

TEST(Plateau, PrefixRule) {
  EXPECT_EQ(detect_plateau(std::vector<double>{0.5, 0.4, 0.05, 0.3}, 0.1), (RankInterval{1, 2}));
  const auto none = detect_plateau(std::vector<double>{0.05, 0.5}, 0.1);
  EXPECT_TRUE(none.empty());
  EXPECT_EQ(none.length(), 0u);
  EXPECT_EQ(to_json_value(none), nlohmann::json::array());
}

// ---------------------------------------------------------------------------

InfluenceProfile three_phase_profile(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(256);
  for (std::size_t r = 1; r <= v.size(); ++r) {
    const double lr = std::log(static_cast<double>(r));
    double y = 1.0 - 0.1 * lr - std::max(0.0, lr - std::log(8.0)) - 4.0 * std::max(0.0, lr - std::log(80.0));
    v[r - 1] = std::exp(y + 0.01 * rng.normal());
  }
  std::vector<double> shuffled(v.size());
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  idx = rng.sample(idx, idx.size());
  for (std::size_t i = 0; i < v.size(); ++i) shuffled[idx[i]] = v[i];
  return profile_from(shuffled);
}

TEST(AnalyzePhases, IntervalsPartitionRanks) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto a = analyze_phases(three_phase_profile(seed));
    const auto& s = a.segmentation;
    EXPECT_EQ(s.plateau.first, 1u);
    EXPECT_EQ(s.powerlaw.first, s.plateau.last + 1);
    EXPECT_EQ(s.decay.first, s.powerlaw.last + 1);
    EXPECT_EQ(s.decay.last, 256u);
    EXPECT_GT(s.kappa, 0.0);
    EXPECT_EQ(s.deviation.size(), 256u);
  }
}

TEST(AnalyzePhases, ScalingChangesOnlyIntercept) {
  const auto p = three_phase_profile(4);
  auto scaled = p;
  for (auto& v : scaled.abs_dloss) v *= 37.0;
  const auto a = analyze_phases(p), b = analyze_phases(scaled);
  EXPECT_EQ(a.segmentation.change_points[0], b.segmentation.change_points[0]);
  EXPECT_EQ(a.segmentation.change_points[1], b.segmentation.change_points[1]);
  EXPECT_NEAR(a.segmentation.kappa, b.segmentation.kappa, 1e-9);
  EXPECT_NEAR(b.segmentation.beta - a.segmentation.beta, std::log(37.0), 1e-9);
  EXPECT_EQ(a.segmentation.deviation_plateau, b.segmentation.deviation_plateau);
}

TEST(AnalyzePhases, JsonAndCsvShape) {
  const auto a = analyze_phases(three_phase_profile(5));
  const auto j = phases_to_json(a, {});
  EXPECT_EQ(j.at("kind"), "phases");
  EXPECT_EQ(j.at("rank_order").size(), 256u);
  const double total = j["fractions"]["plateau"].get<double>() + j["fractions"]["powerlaw"].get<double>() +
                       j["fractions"]["decay"].get<double>();
  EXPECT_NEAR(total, 1.0, 1e-12);
  const auto csv = curve_to_csv(a);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 257);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "rank,log_rank,log_dloss,slope,delta");
}

}  // namespace
}  // namespace raretok
