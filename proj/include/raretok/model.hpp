#pragma once

// GPT-2 layout (learned positions, pre-LN, attention then MLP) teacher-forced forward pass.
//
// Canonical parameter names, Linear weights stored [out, in]:
//   wte [vocab, d]            wpe [max_seq, d]
//   h.L.ln1.gain/bias [d]     h.L.attn.qkv.weight [3d, d]   h.L.attn.qkv.bias [3d]
//   h.L.attn.out.weight [d,d] h.L.attn.out.bias [d]         h.L.ln2.gain/bias [d]
//   h.L.mlp.in.weight [d_mlp, d]   h.L.mlp.in.bias [d_mlp]
//   h.L.mlp.out.weight [d, d_mlp]  h.L.mlp.out.bias [d]
//   final_ln.gain/bias [d]    unembed [vocab, d] (optional; ties to wte when absent)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raretok/error.hpp"
#include "raretok/linalg.hpp"
#include "raretok/tensor.hpp"

namespace raretok {

struct ModelConfig {
  std::size_t n_layer = 0;
  std::size_t d_model = 0;
  std::size_t n_head = 0;
  std::size_t d_mlp = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq = 0;
  double layernorm_eps = 1e-5;
  std::string architecture = "gpt2-preln";

  void validate() const {
    if (n_layer == 0 || d_model == 0 || n_head == 0 || d_mlp == 0 || max_seq == 0) {
      fail("model config: n_layer, d_model, n_head, d_mlp, max_seq must be positive");
    }
    if (d_model % n_head != 0) fail("model config: d_model ", d_model, " not divisible by n_head ", n_head);
    if (vocab_size < 2) fail("model config: vocab_size must be at least 2");
    if (!(layernorm_eps > 0)) fail("model config: layernorm_eps must be positive");
    if (architecture != "gpt2-preln") fail("model config: unsupported architecture '", architecture, "'");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layer", c.n_layer},       {"d_model", c.d_model},
                     {"n_head", c.n_head},         {"d_mlp", c.d_mlp},
                     {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
                     {"layernorm_eps", c.layernorm_eps}, {"architecture", c.architecture}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layer").get_to(c.n_layer);
  j.at("d_model").get_to(c.d_model);
  j.at("n_head").get_to(c.n_head);
  j.at("d_mlp").get_to(c.d_mlp);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq").get_to(c.max_seq);
  c.layernorm_eps = j.value("layernorm_eps", 1e-5);
  c.architecture = j.value("architecture", std::string("gpt2-preln"));
}

// Canonical names and shapes. The unembedding is listed separately because it may alias wte.
inline std::vector<std::pair<std::string, std::vector<std::uint64_t>>> parameter_shapes(const ModelConfig& c) {
  const std::uint64_t d = c.d_model, m = c.d_mlp;
  std::vector<std::pair<std::string, std::vector<std::uint64_t>>> out{
      {"wte", {c.vocab_size, d}}, {"wpe", {c.max_seq, d}}};
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", {d}});
    out.push_back({p + "ln1.bias", {d}});
    out.push_back({p + "attn.qkv.weight", {3 * d, d}});
    out.push_back({p + "attn.qkv.bias", {3 * d}});
    out.push_back({p + "attn.out.weight", {d, d}});
    out.push_back({p + "attn.out.bias", {d}});
    out.push_back({p + "ln2.gain", {d}});
    out.push_back({p + "ln2.bias", {d}});
    out.push_back({p + "mlp.in.weight", {m, d}});
    out.push_back({p + "mlp.in.bias", {m}});
    out.push_back({p + "mlp.out.weight", {d, m}});
    out.push_back({p + "mlp.out.bias", {d}});
  }
  out.push_back({"final_ln.gain", {d}});
  out.push_back({"final_ln.bias", {d}});
  return out;
}

inline constexpr const char* kUnembedName = "unembed";

struct ModelWeights {
  std::map<std::string, Tensor> tensors;

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("missing tensor '", name, "'");
    return it->second;
  }
  Tensor& get(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("missing tensor '", name, "'");
    return it->second;
  }
};

inline void validate_weights(const ModelConfig& config, const ModelWeights& w) {
  config.validate();
  std::vector<std::string> missing;
  std::string mismatches;
  auto check = [&](const std::string& name, const std::vector<std::uint64_t>& shape) {
    auto it = w.tensors.find(name);
    if (it == w.tensors.end()) {
      missing.push_back(name);
    } else if (it->second.shape() != shape) {
      mismatches += detail::concat("tensor '", name, "' expected shape ", shape_string(shape), " but got ",
                                   shape_string(it->second.shape()), "; ");
    }
  };
  for (const auto& [name, shape] : parameter_shapes(config)) check(name, shape);
  if (w.tensors.contains(kUnembedName)) check(kUnembedName, {config.vocab_size, config.d_model});
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    fail("manifest is missing tensors: ", list);
  }
  if (!mismatches.empty()) fail("shape mismatch: ", mismatches);
}

namespace detail {

struct Linear {
  Matrix weight;  // [out, in]
  std::vector<double> bias;

  void apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t o = 0; o < weight.rows(); ++o) y[o] = bias[o] + dot(weight.row(o), x);
  }
};

struct LayerNormParams {
  std::vector<double> gain, bias;
};

inline std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace detail

inline double gelu_tanh(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline void layer_norm(std::span<const double> x, const detail::LayerNormParams& p, double eps,
                       std::span<double> out) {
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * p.gain[i] + p.bias[i];
}

struct ForwardCache {
  std::vector<std::uint32_t> tokens;
  std::vector<std::uint32_t> targets;
  Matrix hidden;     // x: final residual before final LayerNorm, T x d_model
  Matrix resid_mid;  // residual entering the final MLP, T x d_model
  Matrix mlp_acts;   // n: final-layer post-GELU activations, T x d_mlp
  Matrix logits;     // T x vocab
  std::vector<double> loss;

  std::size_t length() const { return tokens.size(); }
};

struct Clamp {
  std::size_t neuron = 0;
  double value = 0.0;
};

struct Decoded {
  std::vector<double> logits;
  double loss = 0.0;
};

class Model {
 public:
  Model(ModelConfig config, ModelWeights weights) : config_(std::move(config)), weights_(std::move(weights)) {
    validate_weights(config_, weights_);
    build();
  }

  const ModelConfig& config() const { return config_; }
  const ModelWeights& weights() const { return weights_; }
  bool tied_unembedding() const { return !weights_.tensors.contains(kUnembedName); }

  // w_out^(i): column i of the final MLP output matrix.
  std::span<const double> w_out(std::size_t neuron) const { return w_out_cols_.row(neuron); }
  const Matrix& final_mlp_in() const { return layers_.back().mlp_in.weight; }

  // Scratch buffers reused across decode calls on one thread.
  struct Workspace {
    std::vector<double> normed;
    std::vector<double> logits;
  };

  // Unembed(FinalLN(x)) and cross-entropy at target. Every loss the toolkit reports goes through here.
  double decode_loss(std::span<const double> x, std::uint32_t target, Workspace& ws) const {
    require(target < config_.vocab_size, "target id ", target, " out of range");
    ws.normed.resize(config_.d_model);
    ws.logits.resize(config_.vocab_size);
    layer_norm(x, final_ln_, config_.layernorm_eps, ws.normed);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < config_.vocab_size; ++v) {
      ws.logits[v] = dot(unembed_.row(v), ws.normed);
      mx = std::max(mx, ws.logits[v]);
    }
    double sum = 0.0;
    for (double l : ws.logits) sum += std::exp(l - mx);
    return (mx + std::log(sum)) - ws.logits[target];
  }

  ForwardCache forward(std::span<const std::uint32_t> tokens, std::span<const std::uint32_t> targets,
                       std::optional<Clamp> clamp = std::nullopt) const;

 private:
  struct Layer {
    detail::LayerNormParams ln1, ln2;
    detail::Linear qkv, attn_out, mlp_in, mlp_out;
  };

  void build() {
    auto vec = [&](const std::string& n) { return detail::to_vector(weights_.get(n)); };
    auto lin = [&](const std::string& p) {
      return detail::Linear{Matrix::from_tensor(weights_.get(p + ".weight")), vec(p + ".bias")};
    };
    wte_ = Matrix::from_tensor(weights_.get("wte"));
    wpe_ = Matrix::from_tensor(weights_.get("wpe"));
    for (std::size_t l = 0; l < config_.n_layer; ++l) {
      const std::string p = "h." + std::to_string(l) + ".";
      layers_.push_back(Layer{{vec(p + "ln1.gain"), vec(p + "ln1.bias")},
                              {vec(p + "ln2.gain"), vec(p + "ln2.bias")},
                              lin(p + "attn.qkv"),
                              lin(p + "attn.out"),
                              lin(p + "mlp.in"),
                              lin(p + "mlp.out")});
    }
    final_ln_ = {vec("final_ln.gain"), vec("final_ln.bias")};
    unembed_ = tied_unembedding() ? wte_ : Matrix::from_tensor(weights_.get(kUnembedName));
    w_out_cols_ = layers_.back().mlp_out.weight.transposed();
  }

  ModelConfig config_;
  ModelWeights weights_;
  Matrix wte_, wpe_, unembed_, w_out_cols_;
  std::vector<Layer> layers_;
  detail::LayerNormParams final_ln_;
};

inline ForwardCache Model::forward(std::span<const std::uint32_t> tokens, std::span<const std::uint32_t> targets,
                                   std::optional<Clamp> clamp) const {
  const std::size_t T = tokens.size();
  const std::size_t d = config_.d_model, H = config_.n_head, hd = d / H, m = config_.d_mlp;
  require(T <= config_.max_seq, "sequence length ", T, " exceeds max_seq ", config_.max_seq);
  require(targets.size() == T, "targets length ", targets.size(), " differs from tokens length ", T);
  for (std::size_t t = 0; t < T; ++t) {
    require(tokens[t] < config_.vocab_size, "token id ", tokens[t], " at position ", t, " >= vocab_size");
    require(targets[t] < config_.vocab_size, "target id ", targets[t], " at position ", t, " >= vocab_size");
  }
  if (clamp) require(clamp->neuron < m, "clamp neuron ", clamp->neuron, " >= d_mlp ", m);

  ForwardCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.targets.assign(targets.begin(), targets.end());

  Matrix h(T, d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i) h(t, i) = wte_(tokens[t], i) + wpe_(t, i);

  Matrix normed(T, d), qkv(T, 3 * d), mixed(T, d);
  std::vector<double> proj(std::max(d, m)), pre(m), scores(T);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    const bool last = l + 1 == layers_.size();

    for (std::size_t t = 0; t < T; ++t) {
      layer_norm(h.row(t), L.ln1, config_.layernorm_eps, normed.row(t));
      L.qkv.apply(normed.row(t), qkv.row(t));
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t head = 0; head < H; ++head) {
        const auto q = qkv.row(t).subspan(head * hd, hd);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          scores[s] = dot(q, qkv.row(s).subspan(d + head * hd, hd)) * scale;
          mx = std::max(mx, scores[s]);
        }
        double denom = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          scores[s] = std::exp(scores[s] - mx);
          denom += scores[s];
        }
        auto out = mixed.row(t).subspan(head * hd, hd);
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          const double w = scores[s] / denom;
          const auto v = qkv.row(s).subspan(2 * d + head * hd, hd);
          for (std::size_t i = 0; i < hd; ++i) out[i] += w * v[i];
        }
      }
      L.attn_out.apply(mixed.row(t), std::span(proj).first(d));
      for (std::size_t i = 0; i < d; ++i) h(t, i) += proj[i];
    }

    if (last) {
      cache.resid_mid = h;
      cache.mlp_acts = Matrix(T, m);
    }
    for (std::size_t t = 0; t < T; ++t) {
      layer_norm(h.row(t), L.ln2, config_.layernorm_eps, normed.row(t));
      L.mlp_in.apply(normed.row(t), pre);
      for (auto& v : pre) v = gelu_tanh(v);
      if (last) {
        if (clamp) pre[clamp->neuron] = clamp->value;
        std::copy(pre.begin(), pre.end(), cache.mlp_acts.row(t).begin());
      }
      L.mlp_out.apply(pre, std::span(proj).first(d));
      for (std::size_t i = 0; i < d; ++i) h(t, i) += proj[i];
    }
  }

  cache.hidden = std::move(h);
  cache.logits = Matrix(T, config_.vocab_size);
  cache.loss.resize(T);
  Workspace ws;
  for (std::size_t t = 0; t < T; ++t) {
    cache.loss[t] = decode_loss(cache.hidden.row(t), targets[t], ws);
    std::copy(ws.logits.begin(), ws.logits.end(), cache.logits.row(t).begin());
  }
  return cache;
}

inline ForwardCache forward_cached(const Model& model, std::span<const std::uint32_t> tokens,
                                   std::span<const std::uint32_t> targets) {
  return model.forward(tokens, targets);
}

inline Decoded decode_loss_from_hidden(const Model& model, std::span<const double> x_row, std::uint32_t target) {
  require(x_row.size() == model.config().d_model, "hidden row has ", x_row.size(), " entries, expected ",
          model.config().d_model);
  for (double v : x_row) require(std::isfinite(v), "hidden row contains a non-finite value");
  Model::Workspace ws;
  Decoded out;
  out.loss = model.decode_loss(x_row, target, ws);
  out.logits = std::move(ws.logits);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O

inline Model load_model(const std::filesystem::path& manifest_path) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    fail(manifest_path.string(), ": invalid manifest JSON: ", e.what());
  }
  if (!manifest.is_object() || !manifest.contains("config") || !manifest.contains("tensors")) {
    fail(manifest_path.string(), ": manifest needs \"config\" and \"tensors\" objects");
  }
  ModelConfig config;
  try {
    config = manifest.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(manifest_path.string(), ": bad config: ", e.what());
  }
  config.validate();

  const auto base = manifest_path.parent_path();
  ModelWeights weights;
  for (const auto& [name, rel] : manifest.at("tensors").items()) {
    std::filesystem::path p = rel.get<std::string>();
    if (p.is_relative()) p = base / p;
    weights.tensors.emplace(name, load_tensor(p));
  }
  return Model(std::move(config), std::move(weights));
}

inline void save_model(const Model& model, const std::filesystem::path& dir, const std::string& checkpoint = "") {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : model.weights().tensors) {
    const std::string rel = "tensors/" + name + ".rtn";
    save_tensor(t, dir / rel);
    tensors[name] = rel;
  }
  nlohmann::json manifest;
  manifest["config"] = model.config();
  if (!checkpoint.empty()) manifest["checkpoint"] = checkpoint;
  manifest["tensors"] = tensors;
  io::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace raretok
