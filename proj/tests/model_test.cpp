#include <cmath>
#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "raretok/model.hpp"
#include "raretok/random.hpp"
#include "raretok/toy.hpp"
#include "test_util.hpp"

namespace raretok {
namespace {

using testing::scratch_dir;

ModelConfig small_config() { return {2, 8, 2, 16, 11, 12, 1e-5, "gpt2-preln"}; }

Model random_model(const ModelConfig& c, std::uint64_t seed, bool tied = false) {
  Rng rng(seed);
  ModelWeights w;
  for (const auto& [name, shape] : parameter_shapes(c)) w.tensors[name] = toy::normal_tensor(rng, shape, 0.5);
  if (!tied) w.tensors[kUnembedName] = toy::normal_tensor(rng, {c.vocab_size, c.d_model}, 0.5);
  return Model(c, std::move(w));
}

ModelWeights zero_weights(const ModelConfig& c) {
  ModelWeights w;
  for (const auto& [name, shape] : parameter_shapes(c)) w.tensors[name] = Tensor(shape);
  return w;
}

// Straight transcription of the GPT-2 block: full score matrix with an explicit causal mask,
// erf-free tanh GELU, float64 throughout. Shares no code with Model::forward.
std::vector<double> reference_losses(const ModelWeights& w, const ModelConfig& c, const std::vector<std::uint32_t>& tok,
                                     const std::vector<std::uint32_t>& tgt) {
  const std::size_t T = tok.size(), d = c.d_model, H = c.n_head, hd = d / H, m = c.d_mlp, V = c.vocab_size;
  auto W = [&](const std::string& n, std::size_t i, std::size_t j) {
    const Tensor& t = w.get(n);
    return static_cast<double>(t.data()[i * t.shape()[1] + j]);
  };
  auto B = [&](const std::string& n, std::size_t i) { return static_cast<double>(w.get(n).data()[i]); };
  auto ln = [&](const std::vector<double>& x, const std::string& p) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(d);
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mu) / std::sqrt(var + c.layernorm_eps) * B(p + ".gain", i) + B(p + ".bias", i);
    return y;
  };
  std::vector<std::vector<double>> x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i) x[t][i] = W("wte", tok[t], i) + W("wpe", t, i);
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    std::vector<std::vector<double>> q(T, std::vector<double>(3 * d));
    for (std::size_t t = 0; t < T; ++t) {
      const auto a = ln(x[t], p + "ln1");
      for (std::size_t o = 0; o < 3 * d; ++o) {
        double s = B(p + "attn.qkv.bias", o);
        for (std::size_t i = 0; i < d; ++i) s += W(p + "attn.qkv.weight", o, i) * a[i];
        q[t][o] = s;
      }
    }
    std::vector<std::vector<double>> att(T, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> sc(T);
        double mx = -1e300;
        for (std::size_t s = 0; s < T; ++s) {
          double v = 0;
          for (std::size_t i = 0; i < hd; ++i) v += q[t][h * hd + i] * q[s][d + h * hd + i];
          sc[s] = s <= t ? v / std::sqrt(static_cast<double>(hd)) : -1e300;
          mx = std::max(mx, sc[s]);
        }
        double z = 0;
        for (auto& v : sc) z += (v = std::exp(v - mx));
        for (std::size_t s = 0; s < T; ++s)
          for (std::size_t i = 0; i < hd; ++i) att[t][h * hd + i] += sc[s] / z * q[s][2 * d + h * hd + i];
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> add(d);
      for (std::size_t o = 0; o < d; ++o) {
        double s = B(p + "attn.out.bias", o);
        for (std::size_t i = 0; i < d; ++i) s += W(p + "attn.out.weight", o, i) * att[t][i];
        add[o] = s;
      }
      for (std::size_t o = 0; o < d; ++o) x[t][o] += add[o];
      const auto a = ln(x[t], p + "ln2");
      std::vector<double> n(m);
      for (std::size_t o = 0; o < m; ++o) {
        double s = B(p + "mlp.in.bias", o);
        for (std::size_t i = 0; i < d; ++i) s += W(p + "mlp.in.weight", o, i) * a[i];
        n[o] = 0.5 * s * (1 + std::tanh(std::sqrt(2 / M_PI) * (s + 0.044715 * s * s * s)));
      }
      for (std::size_t o = 0; o < d; ++o) {
        double s = B(p + "mlp.out.bias", o);
        for (std::size_t i = 0; i < m; ++i) s += W(p + "mlp.out.weight", o, i) * n[i];
        x[t][o] += s;
      }
    }
  }
  const std::string un = w.tensors.contains(kUnembedName) ? kUnembedName : "wte";
  std::vector<double> loss(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto a = ln(x[t], "final_ln");
    std::vector<double> logits(V);
    for (std::size_t v = 0; v < V; ++v) {
      double s = 0;
      for (std::size_t i = 0; i < d; ++i) s += W(un, v, i) * a[i];
      logits[v] = s;
    }
    double z = 0, mx = *std::max_element(logits.begin(), logits.end());
    for (double v : logits) z += std::exp(v - mx);
    loss[t] = mx + std::log(z) - logits[tgt[t]];
  }
  return loss;
}

std::vector<std::uint32_t> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::uint32_t> ids(n);
  for (auto& v : ids) v = static_cast<std::uint32_t>(rng.below(vocab));
  return ids;
}

TEST(Forward, ZeroWeightsGiveUniformLoss) {
  const auto c = small_config();
  const Model model(c, zero_weights(c));
  const std::vector<std::uint32_t> tok{1, 2, 3}, tgt{2, 3, 4};
  const auto cache = model.forward(tok, tgt);
  for (double l : cache.loss) EXPECT_EQ(l, std::log(static_cast<double>(c.vocab_size)));
}

TEST(Forward, MatchesReferenceImplementation) {
  Rng rng(3);
  for (bool tied : {false, true}) {
    const auto c = small_config();
    const Model model = random_model(c, 17 + tied, tied);
    const auto tok = random_ids(rng, 10, c.vocab_size), tgt = random_ids(rng, 10, c.vocab_size);
    const auto ref = reference_losses(model.weights(), c, tok, tgt);
    const auto got = model.forward(tok, tgt).loss;
    for (std::size_t t = 0; t < tok.size(); ++t) EXPECT_NEAR(got[t], ref[t], 1e-9) << "t=" << t << " tied=" << tied;
  }
}

TEST(Forward, SingleLayerTwoDimensionalModel) {
  const ModelConfig c{1, 2, 1, 3, 4, 4, 1e-5, "gpt2-preln"};
  const Model model = random_model(c, 5);
  const std::vector<std::uint32_t> tok{0, 3, 1, 2}, tgt{3, 1, 2, 0};
  const auto ref = reference_losses(model.weights(), c, tok, tgt);
  const auto got = model.forward(tok, tgt).loss;
  for (std::size_t t = 0; t < 4; ++t) EXPECT_NEAR(got[t], ref[t], 1e-5);
}

TEST(Forward, IsCausal) {
  const auto c = small_config();
  const Model model = random_model(c, 21);
  Rng rng(4);
  auto tok = random_ids(rng, 9, c.vocab_size);
  const auto tgt = random_ids(rng, 9, c.vocab_size);
  const auto a = model.forward(tok, tgt);
  tok[6] = (tok[6] + 1) % c.vocab_size;
  const auto b = model.forward(tok, tgt);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_EQ(a.loss[t], b.loss[t]);
    EXPECT_EQ(std::memcmp(a.hidden.row(t).data(), b.hidden.row(t).data(), c.d_model * sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(a.mlp_acts.row(t).data(), b.mlp_acts.row(t).data(), c.d_mlp * sizeof(double)), 0);
  }
  EXPECT_NE(a.loss[6], b.loss[6]);
}

TEST(Forward, DecodeOfCachedHiddenReproducesLoss) {
  const auto c = small_config();
  const Model model = random_model(c, 22);
  Rng rng(5);
  const auto tok = random_ids(rng, 12, c.vocab_size), tgt = random_ids(rng, 12, c.vocab_size);
  const auto cache = model.forward(tok, tgt);
  for (std::size_t t = 0; t < tok.size(); ++t) {
    const auto d = decode_loss_from_hidden(model, cache.hidden.row(t), tgt[t]);
    EXPECT_EQ(d.loss, cache.loss[t]);
    for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_EQ(d.logits[v], cache.logits(t, v));
  }
}

TEST(Forward, LossIsInvariantToLogitShift) {
  // Every unembedding row has 1 in column 3, so moving final_ln.bias[3] shifts all logits equally.
  const ModelConfig c{1, 4, 1, 4, 5, 4, 1e-5, "gpt2-preln"};
  Rng rng(6);
  ModelWeights w;
  for (const auto& [name, shape] : parameter_shapes(c)) w.tensors[name] = toy::normal_tensor(rng, shape, 0.5);
  Tensor un = toy::normal_tensor(rng, {c.vocab_size, c.d_model}, 0.5);
  for (std::size_t v = 0; v < c.vocab_size; ++v) un.at(v, 3) = 1.0f;
  w.tensors[kUnembedName] = un;
  const Model base(c, w);
  w.tensors["final_ln.bias"].data()[3] += 2.5f;
  const Model shifted(c, w);
  const std::vector<std::uint32_t> tok{0, 1, 2}, tgt{4, 3, 2};
  const auto a = base.forward(tok, tgt), b = shifted.forward(tok, tgt);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_NEAR(a.loss[t], b.loss[t], 1e-12);
    EXPECT_NEAR(b.logits(t, 0) - a.logits(t, 0), 2.5, 1e-6);
  }
}

TEST(Forward, CacheSatisfiesResidualIdentity) {
  const auto c = small_config();
  const Model model = random_model(c, 23);
  Rng rng(7);
  const auto tok = random_ids(rng, 8, c.vocab_size), tgt = random_ids(rng, 8, c.vocab_size);
  const auto cache = model.forward(tok, tgt);
  const Tensor& bias = model.weights().get("h.1.mlp.out.bias");
  for (std::size_t t = 0; t < tok.size(); ++t) {
    for (std::size_t k = 0; k < c.d_model; ++k) {
      double x = cache.resid_mid(t, k) + bias.data()[k];
      for (std::size_t i = 0; i < c.d_mlp; ++i) x += model.w_out(i)[k] * cache.mlp_acts(t, i);
      EXPECT_NEAR(x, cache.hidden(t, k), 1e-5);
    }
  }
}

TEST(Forward, IsDeterministic) {
  const auto c = small_config();
  const Model model = random_model(c, 24);
  Rng rng(8);
  const auto tok = random_ids(rng, 12, c.vocab_size), tgt = random_ids(rng, 12, c.vocab_size);
  const auto a = model.forward(tok, tgt), b = model.forward(tok, tgt);
  EXPECT_EQ(std::memcmp(a.hidden.data().data(), b.hidden.data().data(), a.hidden.data().size_bytes()), 0);
  EXPECT_EQ(a.loss, b.loss);
}

TEST(Forward, ClampFixesActivation) {
  const auto c = small_config();
  const Model model = random_model(c, 25);
  const std::vector<std::uint32_t> tok{1, 2, 3, 4}, tgt{2, 3, 4, 5};
  const auto cache = model.forward(tok, tgt, Clamp{5, 0.75});
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(cache.mlp_acts(t, 5), 0.75);
}

TEST(Forward, RejectsOutOfRangeIds) {
  const auto c = small_config();
  const Model model = random_model(c, 26);
  const std::vector<std::uint32_t> bad{1, static_cast<std::uint32_t>(c.vocab_size)}, ok{1, 2};
  EXPECT_THROW(model.forward(bad, ok), ContractViolation);
  EXPECT_THROW(model.forward(ok, bad), ContractViolation);
  const std::vector<std::uint32_t> long_seq(c.max_seq + 1, 0);
  EXPECT_THROW(model.forward(long_seq, long_seq), ContractViolation);
}

// ---------------------------------------------------------------------------

TEST(Manifest, RoundTripPreservesLosses) {
  const auto dir = scratch_dir("model");
  const auto c = small_config();
  const Model model = random_model(c, 27);
  save_model(model, dir, "ckpt-a");
  const Model back = load_model(dir / "manifest.json");
  EXPECT_EQ(back.config(), c);
  const std::vector<std::uint32_t> tok{1, 2, 3}, tgt{2, 3, 4};
  EXPECT_EQ(model.forward(tok, tgt).loss, back.forward(tok, tgt).loss);
}

TEST(Manifest, MissingTensorIsNamed) {
  const auto c = small_config();
  ModelWeights w = zero_weights(c);
  w.tensors.erase("final_ln.gain");
  try {
    Model(c, std::move(w));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("final_ln.gain"), std::string::npos) << e.what();
  }
}

TEST(Manifest, TransposedWeightIsShapeMismatch) {
  const auto c = small_config();
  ModelWeights w = zero_weights(c);
  w.tensors["h.0.mlp.in.weight"] = Tensor({c.d_model, c.d_mlp});
  try {
    Model(c, std::move(w));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("shape mismatch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("h.0.mlp.in.weight"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[16, 8]"), std::string::npos) << msg;
  }
}

TEST(Manifest, RejectsIndivisibleHeads) {
  ModelConfig c = small_config();
  c.n_head = 3;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Manifest, MissingTensorFileNamesPath) {
  const auto dir = scratch_dir("model");
  save_model(random_model(small_config(), 28), dir);
  std::filesystem::remove(dir / "tensors" / "wpe.rtn");
  try {
    load_model(dir / "manifest.json");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("wpe.rtn"), std::string::npos) << e.what();
  }
}

TEST(Gelu, MatchesTanhFormula) {
  EXPECT_EQ(gelu_tanh(0.0), 0.0);
  EXPECT_NEAR(gelu_tanh(1.0), 0.8411919906082768, 1e-15);
  EXPECT_NEAR(gelu_tanh(-3.0), -0.0036373920817729943, 1e-15);
}

}  // namespace
}  // namespace raretok
