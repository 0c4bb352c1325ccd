#pragma once

// Activation-space statistics for neuron groups.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raretok/ablation.hpp"
#include "raretok/corpus.hpp"
#include "raretok/error.hpp"
#include "raretok/linalg.hpp"
#include "raretok/model.hpp"

namespace raretok {

// Rows are neurons, columns are eval positions.
inline Matrix activation_matrix(std::span<const ForwardCache> caches, const EvalSet& eval, const NeuronGroup& group) {
  Matrix acts(group.size(), eval.pairs.size());
  for (std::size_t j = 0; j < eval.pairs.size(); ++j) {
    const auto& p = eval.pairs[j];
    require(p.window < caches.size() && p.row < caches[p.window].length(), "eval position ", p.position,
            " is not covered by the caches");
    const auto row = caches[p.window].mlp_acts.row(p.row);
    for (std::size_t i = 0; i < group.size(); ++i) {
      require(group.indices[i] < row.size(), "group index ", group.indices[i], " >= d_mlp");
      acts(i, j) = row[group.indices[i]];
    }
  }
  return acts;
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(m.row(rows[r]).begin(), m.cols(), out.row(r).begin());
  return out;
}

struct Dimensionality {
  std::size_t d_eff = 0;
  double proportion = 0.0;
  double participation_ratio = 0.0;
  std::vector<double> eigenvalues;  // descending
};

inline Dimensionality dimension_from_eigenvalues(std::vector<double> eig, double tau) {
  require(tau > 0 && tau < 1, "tau must lie in (0, 1)");
  std::sort(eig.begin(), eig.end(), std::greater<>());
  for (auto& v : eig) v = std::max(v, 0.0);
  const double total = std::accumulate(eig.begin(), eig.end(), 0.0);
  if (!(total > 0)) fail("constant activations");
  Dimensionality out;
  double cum = 0.0, sq = 0.0;
  out.d_eff = eig.size();
  for (std::size_t i = 0; i < eig.size(); ++i) {
    cum += eig[i];
    if (cum / total >= tau) {
      out.d_eff = i + 1;
      break;
    }
  }
  for (double v : eig) sq += v * v;
  out.proportion = static_cast<double>(out.d_eff) / static_cast<double>(eig.size());
  out.participation_ratio = total * total / sq;
  out.eigenvalues = std::move(eig);
  return out;
}

// PCA over neurons: covariance of the centred rows (divisor T-1), d_eff at cumulative variance tau,
// and participation ratio (Σλ)²/Σλ².
inline Dimensionality effective_dimension(const Matrix& acts, double tau = 0.90) {
  const std::size_t n = acts.rows(), t = acts.cols();
  require(n >= 2, "effective_dimension needs at least 2 neurons");
  require(t >= n, "effective_dimension needs at least as many positions (", t, ") as neurons (", n, ")");
  Matrix centred(n, t);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = acts.row(i);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(t);
    for (std::size_t j = 0; j < t; ++j) centred(i, j) = row[j] - mean;
  }
  const Matrix cov = gram_rows(centred, 1.0 / static_cast<double>(t - 1));
  return dimension_from_eigenvalues(sym_eig(cov).eigenvalues, tau);
}

struct PairStats {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t pairs = 0;
  Matrix matrix;     // rows of A x rows of B (A x A when comparing a group with itself); NaN for excluded rows
  std::vector<std::size_t> excluded_a, excluded_b;
};

namespace detail {

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline Matrix centre_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = row[j] - mean;
  }
  return out;
}

inline PairStats pair_cosines(const Matrix& a, const Matrix* b) {
  const Matrix& bb = b ? *b : a;
  require(a.cols() == bb.cols(), "activation matrices differ in column count: ", a.cols(), " vs ", bb.cols());
  PairStats s;
  std::vector<double> na(a.rows()), nb(bb.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    na[i] = norm(a.row(i));
    if (na[i] == 0) s.excluded_a.push_back(i);
  }
  for (std::size_t j = 0; j < bb.rows(); ++j) {
    nb[j] = b ? norm(bb.row(j)) : na[j];
    if (b && nb[j] == 0) s.excluded_b.push_back(j);
  }
  if (!b) s.excluded_b = s.excluded_a;
  if (s.excluded_a.size() == a.rows() || s.excluded_b.size() == bb.rows()) fail("no valid vectors");

  s.matrix = Matrix(a.rows(), bb.rows(), std::nan(""));
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    if (na[i] == 0) continue;
    for (std::size_t j = 0; j < bb.rows(); ++j) {
      if (nb[j] == 0) continue;
      const double c = std::clamp(dot(a.row(i), bb.row(j)) / (na[i] * nb[j]), -1.0, 1.0);
      s.matrix(i, j) = c;
      if (!b && j <= i) continue;
      sum += c;
      sq += c * c;
      ++s.pairs;
    }
  }
  if (s.pairs == 0) fail("no valid vectors: fewer than two non-zero rows");
  s.mean = sum / static_cast<double>(s.pairs);
  s.std = std::sqrt(std::max(0.0, sq / static_cast<double>(s.pairs) - s.mean * s.mean));
  return s;
}

}  // namespace detail

// Cosine similarity over all cross pairs; pass `b = nullptr` to compare a group with itself
// (unordered pairs, self-pairs excluded). Zero rows are excluded and listed.
inline PairStats pairwise_cosine_stats(const Matrix& a, const Matrix* b = nullptr) { return detail::pair_cosines(a, b); }

// Pearson correlation = cosine of mean-centred rows. Constant rows are excluded.
inline PairStats pairwise_correlation_stats(const Matrix& a, const Matrix* b = nullptr) {
  const Matrix ca = detail::centre_rows(a);
  if (!b) return detail::pair_cosines(ca, nullptr);
  const Matrix cb = detail::centre_rows(*b);
  return detail::pair_cosines(ca, &cb);
}

struct Clustering {
  std::size_t count = 0;
  std::vector<int> labels;            // per input row; -1 for excluded rows
  std::vector<std::size_t> excluded;  // zero-variance rows
  Matrix distance;                    // D = 1 - |ρ| over the kept rows
  std::vector<double> merge_heights;  // in merge order
};

// Ward linkage on D with SciPy's convention: D entries act as Euclidean distances, the
// Lance-Williams update runs on squared values, and merge heights are reported in D units.
// Ties merge the lowest (i, j) pair first.
inline std::vector<std::pair<std::pair<std::size_t, std::size_t>, double>> ward_linkage(const Matrix& distance) {
  const std::size_t n = distance.rows();
  Matrix d2(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d2(i, j) = distance(i, j) * distance(i, j);
  std::vector<std::size_t> size(n, 1);
  std::vector<bool> active(n, true);
  std::vector<std::pair<std::pair<std::size_t, std::size_t>, double>> merges;
  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (active[j] && d2(i, j) < best) {
          best = d2(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    merges.push_back({{bi, bj}, std::sqrt(best)});
    const double ni = static_cast<double>(size[bi]), nj = static_cast<double>(size[bj]);
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const double nk = static_cast<double>(size[k]);
      const double v = ((ni + nk) * d2(k, bi) + (nj + nk) * d2(k, bj) - nk * best) / (ni + nj + nk);
      d2(k, bi) = d2(bi, k) = std::max(0.0, v);
    }
    size[bi] += size[bj];
    active[bj] = false;
  }
  return merges;
}

inline Clustering correlation_cluster(const Matrix& acts, double threshold = 0.5) {
  Clustering out;
  std::vector<std::size_t> kept;
  const Matrix centred = detail::centre_rows(acts);
  std::vector<double> norms(acts.rows());
  for (std::size_t i = 0; i < acts.rows(); ++i) {
    norms[i] = detail::norm(centred.row(i));
    (norms[i] > 0 ? kept : out.excluded).push_back(i);
  }
  if (kept.size() < 2) fail("insufficient rows: ", kept.size(), " rows with non-zero variance");
  const std::size_t n = kept.size();
  out.distance = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double rho = std::clamp(dot(centred.row(kept[i]), centred.row(kept[j])) / (norms[kept[i]] * norms[kept[j]]),
                                    -1.0, 1.0);
      out.distance(i, j) = out.distance(j, i) = 1.0 - std::abs(rho);
    }
  }
  const auto merges = ward_linkage(out.distance);

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::size_t applied = 0;
  for (const auto& [pair, height] : merges) {
    out.merge_heights.push_back(height);
    if (height <= threshold) {
      parent[find(pair.second)] = find(pair.first);
      ++applied;
    }
  }
  out.count = n - applied;
  out.labels.assign(acts.rows(), -1);
  std::vector<int> label_of_root(n, -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto root = find(i);
    if (label_of_root[root] < 0) label_of_root[root] = next++;
    out.labels[kept[i]] = label_of_root[root];
  }
  return out;
}

// Cosine statistics between w_out^(i) vectors; `w_out_rows` holds one row per neuron.
inline PairStats weight_cosine_stats(const Matrix& w_out_rows, const NeuronGroup& a, const NeuronGroup* b = nullptr) {
  const Matrix ra = select_rows(w_out_rows, a.indices);
  if (!b) return pairwise_cosine_stats(ra);
  const Matrix rb = select_rows(w_out_rows, b->indices);
  return pairwise_cosine_stats(ra, &rb);
}

// ---------------------------------------------------------------------------
// Report over boost / suppress / random (+ a second random group for the R1-vs-R2 baseline).

struct GeometryOptions {
  double tau = 0.90;
  double cluster_threshold = 0.5;
};

struct GroupGeometry {
  std::string name;
  std::size_t size = 0;
  std::optional<Dimensionality> dimensionality;
  std::optional<Clustering> clustering;
  std::string error;
};

struct PairRow {
  std::string column;  // "boost", "B-vs-R", ...
  std::optional<PairStats> activation_cosine, activation_correlation, weight_cosine;
  std::string error;
};

struct GeometryReport {
  std::vector<GroupGeometry> groups;
  std::vector<PairRow> pairs;
  std::size_t positions = 0;
};

inline GeometryReport geometry_report(std::span<const ForwardCache> caches, const EvalSet& eval, const Model& model,
                                      const NeuronGroups& groups, const NeuronGroup& random2,
                                      const GeometryOptions& options = {}) {
  GeometryReport r;
  r.positions = eval.pairs.size();
  const Matrix w_out_rows = [&] {
    Matrix m(model.config().d_mlp, model.config().d_model);
    for (std::size_t i = 0; i < m.rows(); ++i) std::copy_n(model.w_out(i).begin(), m.cols(), m.row(i).begin());
    return m;
  }();
  const Matrix b = activation_matrix(caches, eval, groups.boost);
  const Matrix s = activation_matrix(caches, eval, groups.suppress);
  const Matrix rnd = activation_matrix(caches, eval, groups.random);
  const Matrix rnd2 = activation_matrix(caches, eval, random2);

  for (const auto* item : {&groups.boost, &groups.suppress, &groups.random}) {
    GroupGeometry g;
    g.name = item->display_name();
    g.size = item->size();
    const Matrix acts = activation_matrix(caches, eval, *item);
    try {
      g.dimensionality = effective_dimension(acts, options.tau);
      g.clustering = correlation_cluster(acts, options.cluster_threshold);
    } catch (const std::exception& e) {
      g.error = e.what();
    }
    r.groups.push_back(std::move(g));
  }

  struct Spec {
    const char* column;
    const Matrix* a;
    const Matrix* b;
    const NeuronGroup* ga;
    const NeuronGroup* gb;
  };
  const Spec specs[] = {{"boost", &b, nullptr, &groups.boost, nullptr},
                        {"suppress", &s, nullptr, &groups.suppress, nullptr},
                        {"random", &rnd, nullptr, &groups.random, nullptr},
                        {"B-vs-R", &b, &rnd, &groups.boost, &groups.random},
                        {"S-vs-R", &s, &rnd, &groups.suppress, &groups.random},
                        {"B-vs-S", &b, &s, &groups.boost, &groups.suppress},
                        {"R1-vs-R2", &rnd, &rnd2, &groups.random, &random2}};
  for (const auto& sp : specs) {
    PairRow row;
    row.column = sp.column;
    try {
      row.activation_cosine = pairwise_cosine_stats(*sp.a, sp.b);
      row.activation_correlation = pairwise_correlation_stats(*sp.a, sp.b);
      row.weight_cosine = weight_cosine_stats(w_out_rows, *sp.ga, sp.gb);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    r.pairs.push_back(std::move(row));
  }
  return r;
}

inline constexpr int kGeometrySchema = 1;

inline nlohmann::json geometry_to_json(const GeometryReport& r, const GeometryOptions& options) {
  auto stats = [](const std::optional<PairStats>& s) -> nlohmann::json {
    if (!s) return nullptr;
    return {{"mean", s->mean}, {"std", s->std}, {"pairs", s->pairs}, {"excluded_a", s->excluded_a},
            {"excluded_b", s->excluded_b}};
  };
  nlohmann::json dims = nlohmann::json::object(), clusters = nlohmann::json::object();
  for (const auto& g : r.groups) {
    if (g.dimensionality) {
      dims[g.name] = {{"d_eff", g.dimensionality->d_eff},
                      {"proportion", g.dimensionality->proportion},
                      {"participation_ratio", g.dimensionality->participation_ratio},
                      {"participation_proportion", g.dimensionality->participation_ratio / static_cast<double>(g.size)}};
    } else {
      dims[g.name] = {{"error", g.error}};
    }
    if (g.clustering) {
      clusters[g.name] = {{"count", g.clustering->count},
                          {"labels", g.clustering->labels},
                          {"excluded", g.clustering->excluded},
                          {"merge_heights", g.clustering->merge_heights}};
    } else {
      clusters[g.name] = {{"error", g.error}};
    }
  }
  nlohmann::json act_corr = nlohmann::json::object(), act_cos = nlohmann::json::object(),
                 w_cos = nlohmann::json::object();
  for (const auto& p : r.pairs) {
    act_corr[p.column] = stats(p.activation_correlation);
    act_cos[p.column] = stats(p.activation_cosine);
    w_cos[p.column] = stats(p.weight_cosine);
    if (!p.error.empty()) act_corr[p.column] = {{"error", p.error}};
  }
  return {{"kind", "geometry"},
          {"schema_version", kGeometrySchema},
          {"tau", options.tau},
          {"cluster_threshold", options.cluster_threshold},
          {"positions", r.positions},
          {"activation_correlation", act_corr},
          {"activation_cosine", act_cos},
          {"weight_cosine", w_cos},
          {"dimensionality", dims},
          {"clusters", clusters}};
}

}  // namespace raretok
