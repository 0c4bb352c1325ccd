#pragma once

// Seeded toy assets: a small GPT-2 layout model with heavy-tailed final-MLP output norms, a
// Zipf-distributed token stream split into documents, a frequency table from a separate
// sample, and a validity mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "raretok/corpus.hpp"
#include "raretok/model.hpp"
#include "raretok/random.hpp"

namespace raretok::toy {

struct ToySpec {
  ModelConfig config{2, 64, 4, 256, 512, 128, 1e-5, "gpt2-preln"};
  std::size_t stream_tokens = 1024;
  std::size_t documents = 8;
  std::size_t frequency_tokens = 20000;
  double zipf_exponent = 0.8;
  double valid_fraction = 0.75;
  double out_norm_tail = 1.5;  // Pareto index of per-neuron w_out scales
  std::uint64_t seed = 1234;
};

inline Tensor normal_tensor(Rng& rng, std::vector<std::uint64_t> shape, double stddev, double mean = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(mean + stddev * rng.normal());
  return t;
}

inline Model make_model(const ToySpec& spec) {
  const auto& c = spec.config;
  Rng rng(spec.seed);
  const double d = static_cast<double>(c.d_model), m = static_cast<double>(c.d_mlp);
  ModelWeights w;
  for (const auto& [name, shape] : parameter_shapes(c)) {
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias");
    if (is_gain) {
      w.tensors[name] = normal_tensor(rng, shape, 0.05, 1.0);
    } else if (is_bias) {
      w.tensors[name] = normal_tensor(rng, shape, name.find("mlp.in") != std::string::npos ? 0.5 : 0.02);
    } else if (name == "wte" || name == "wpe") {
      w.tensors[name] = normal_tensor(rng, shape, name == "wte" ? 1.0 : 0.3);
    } else if (name.find("mlp.out.weight") != std::string::npos) {
      w.tensors[name] = normal_tensor(rng, shape, 1.0 / std::sqrt(m));
    } else {
      w.tensors[name] = normal_tensor(rng, shape, 1.0 / std::sqrt(d));
    }
  }
  // Heavy-tailed per-neuron output scales in the final MLP give the influence curve a long head.
  auto& out = w.tensors["h." + std::to_string(c.n_layer - 1) + ".mlp.out.weight"];
  for (std::size_t i = 0; i < c.d_mlp; ++i) {
    const float s = static_cast<float>(std::min(rng.pareto(spec.out_norm_tail), 50.0));
    for (std::size_t r = 0; r < c.d_model; ++r) out.at(r, i) *= s;
  }
  w.tensors[kUnembedName] = normal_tensor(rng, {c.vocab_size, c.d_model}, 0.3);
  return Model(c, std::move(w));
}

// Zipf sampler over a seeded permutation of the vocabulary.
class ZipfSource {
 public:
  ZipfSource(std::size_t vocab, double exponent, std::uint64_t permutation_seed, std::uint64_t seed)
      : rng_(seed), cdf_(vocab), ids_(vocab) {
    for (std::size_t i = 0; i < vocab; ++i) ids_[i] = static_cast<std::uint32_t>(i);
    Rng perm(permutation_seed);
    ids_ = perm.sample(ids_, vocab);
    double total = 0.0;
    for (std::size_t r = 0; r < vocab; ++r) {
      total += std::pow(static_cast<double>(r + 1), -exponent);
      cdf_[r] = total;
    }
    for (auto& v : cdf_) v /= total;
  }

  std::uint32_t next() {
    const double u = rng_.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return ids_[std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), ids_.size() - 1)];
  }

 private:
  Rng rng_;
  std::vector<double> cdf_;
  std::vector<std::uint32_t> ids_;
};

struct ToyCorpus {
  TokenStream stream;
  FrequencyTable frequencies;
  ValidMask mask;
};

inline ToyCorpus make_corpus(const ToySpec& spec) {
  const std::size_t vocab = spec.config.vocab_size;
  ToyCorpus out;
  ZipfSource source(vocab, spec.zipf_exponent, spec.seed + 4, spec.seed + 1);
  for (std::size_t i = 0; i < spec.stream_tokens; ++i) out.stream.ids.push_back(source.next());

  // Document lengths vary around the mean; the final boundary closes the stream.
  Rng rng(spec.seed + 2);
  std::vector<double> weights(spec.documents);
  double total = 0.0;
  for (auto& w : weights) total += (w = 0.5 + rng.uniform());
  double acc = 0.0;
  for (std::size_t d = 0; d + 1 < spec.documents; ++d) {
    acc += weights[d];
    out.stream.boundaries.push_back(static_cast<std::uint64_t>(std::llround(acc / total * spec.stream_tokens)));
  }
  out.stream.boundaries.push_back(spec.stream_tokens);

  ZipfSource train(vocab, spec.zipf_exponent, spec.seed + 4, spec.seed + 5);
  TokenStream sample;
  for (std::size_t i = 0; i < spec.frequency_tokens; ++i) sample.ids.push_back(train.next());
  out.frequencies = unigram_frequencies(sample, vocab);

  Rng mask_rng(spec.seed + 3);
  out.mask.resize(vocab);
  for (auto& m : out.mask) m = mask_rng.uniform() < spec.valid_fraction ? 1 : 0;
  return out;
}

struct ToyPaths {
  std::filesystem::path manifest, tokens, mask, frequencies;
};

inline ToyPaths write_assets(const std::filesystem::path& dir, const ToySpec& spec = {}) {
  std::filesystem::create_directories(dir);
  ToyPaths p{dir / "model" / "manifest.json", dir / "corpus.rtk", dir / "mask.rwm", dir / "frequencies.rfq"};
  save_model(make_model(spec), dir / "model", "toy-seed" + std::to_string(spec.seed));
  const ToyCorpus corpus = make_corpus(spec);
  save_token_stream(corpus.stream, p.tokens);
  save_mask(corpus.mask, p.mask);
  save_frequencies(corpus.frequencies, p.frequencies);
  return p;
}

}  // namespace raretok::toy
