#pragma once

// Token streams, unigram statistics and rare-target selection.
//
// Files (little-endian):
//   RTK1: "RTK1" | u64 count | count x u32 ids | u64 boundary count | boundaries x u64
//   RWM1: "RWM1" | u64 vocab | vocab x u8 (0/1)
//   RFQ1: "RFQ1" | u64 vocab | vocab x u64 counts
// Document boundaries are exclusive end offsets; tokens after the last boundary form a final document.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "raretok/error.hpp"
#include "raretok/tensor.hpp"

namespace raretok {

struct TokenStream {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint64_t> boundaries;

  void validate(std::size_t vocab_size) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= vocab_size) fail("token id ", ids[i], " at position ", i, " >= vocab_size ", vocab_size);
    }
    for (std::size_t i = 0; i < boundaries.size(); ++i) {
      if (boundaries[i] > ids.size()) fail("document boundary ", boundaries[i], " beyond stream length");
      if (i > 0 && boundaries[i] <= boundaries[i - 1]) fail("document boundaries not strictly increasing");
    }
  }

  // [begin, end) spans of non-empty documents in stream order.
  std::vector<std::pair<std::size_t, std::size_t>> documents() const {
    std::vector<std::pair<std::size_t, std::size_t>> docs;
    std::size_t begin = 0;
    for (auto b : boundaries) {
      if (b > begin) docs.emplace_back(begin, b);
      begin = b;
    }
    if (begin < ids.size()) docs.emplace_back(begin, ids.size());
    return docs;
  }

  friend bool operator==(const TokenStream&, const TokenStream&) = default;
};

struct FrequencyTable {
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  friend bool operator==(const FrequencyTable&, const FrequencyTable&) = default;
};

using ValidMask = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// File formats

inline void save_token_stream(const TokenStream& s, const std::filesystem::path& path) {
  std::string out = "RTK1";
  io::put_le<std::uint64_t>(out, s.ids.size());
  for (auto id : s.ids) io::put_le<std::uint32_t>(out, id);
  io::put_le<std::uint64_t>(out, s.boundaries.size());
  for (auto b : s.boundaries) io::put_le<std::uint64_t>(out, b);
  io::write_file(path, out);
}

inline TokenStream load_token_stream(const std::filesystem::path& path) {
  io::Reader in(io::read_file(path));
  if (!in.take_magic("RTK1")) fail(path.string(), ": not a token stream file");
  std::uint64_t n = 0;
  if (!in.get_le(n) || in.remaining() < n * 4) fail(path.string(), ": length mismatch in token ids");
  TokenStream s;
  s.ids.resize(n);
  for (auto& id : s.ids) in.get_le(id);
  std::uint64_t nb = 0;
  if (!in.get_le(nb) || in.remaining() != nb * 8) fail(path.string(), ": length mismatch in boundaries");
  s.boundaries.resize(nb);
  for (auto& b : s.boundaries) in.get_le(b);
  return s;
}

inline void save_mask(const ValidMask& mask, const std::filesystem::path& path) {
  std::string out = "RWM1";
  io::put_le<std::uint64_t>(out, mask.size());
  for (auto m : mask) out.push_back(static_cast<char>(m ? 1 : 0));
  io::write_file(path, out);
}

inline ValidMask load_mask(const std::filesystem::path& path) {
  io::Reader in(io::read_file(path));
  if (!in.take_magic("RWM1")) fail(path.string(), ": not a mask file");
  std::uint64_t n = 0;
  if (!in.get_le(n) || in.remaining() != n) fail(path.string(), ": length mismatch in mask");
  ValidMask mask(n);
  for (auto& m : mask) {
    in.get_le(m);
    if (m > 1) fail(path.string(), ": mask byte must be 0 or 1");
  }
  return mask;
}

inline void save_frequencies(const FrequencyTable& f, const std::filesystem::path& path) {
  std::string out = "RFQ1";
  io::put_le<std::uint64_t>(out, f.counts.size());
  for (auto c : f.counts) io::put_le<std::uint64_t>(out, c);
  io::write_file(path, out);
}

inline FrequencyTable load_frequencies(const std::filesystem::path& path) {
  io::Reader in(io::read_file(path));
  if (!in.take_magic("RFQ1")) fail(path.string(), ": not a frequency file");
  std::uint64_t n = 0;
  if (!in.get_le(n) || in.remaining() != n * 8) fail(path.string(), ": length mismatch in counts");
  FrequencyTable f;
  f.counts.resize(n);
  for (auto& c : f.counts) {
    in.get_le(c);
    f.total += c;
  }
  return f;
}

// ---------------------------------------------------------------------------

inline FrequencyTable unigram_frequencies(const TokenStream& stream, std::size_t vocab_size) {
  FrequencyTable f;
  f.counts.assign(vocab_size, 0);
  for (auto id : stream.ids) {
    require(id < vocab_size, "token id ", id, " >= vocab_size ", vocab_size);
    ++f.counts[id];
  }
  f.total = stream.ids.size();
  return f;
}

// Linear-interpolation percentile (the "linear" method: position p/100 * (n-1) in sorted order).
inline double percentile_linear(std::vector<double> values, double percentile) {
  require(!values.empty(), "percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = percentile / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct EvalPair {
  std::vector<std::uint32_t> context;
  std::uint32_t target = 0;
  std::uint64_t position = 0;  // absolute index of the target in the stream
  std::size_t window = 0;      // scoring window holding the target
  std::size_t row = 0;         // row of that window whose next-token prediction is the target

  friend bool operator==(const EvalPair&, const EvalPair&) = default;
};

// Teacher-forced scoring window: inputs ids[begin, begin+len), targets ids[begin+1, begin+len+1).
struct ScoringWindow {
  std::size_t begin = 0;
  std::size_t length = 0;

  friend bool operator==(const ScoringWindow&, const ScoringWindow&) = default;
};

// Cut every document into windows of at most context_len inputs with stride context_len, so each
// non-initial position of a document is predicted exactly once from within its own document.
inline std::vector<ScoringWindow> scoring_windows(const TokenStream& stream, std::size_t context_len) {
  require(context_len >= 1, "context_len must be positive");
  std::vector<ScoringWindow> windows;
  for (auto [begin, end] : stream.documents()) {
    for (std::size_t s = begin; s + 1 < end; s += context_len) {
      windows.push_back({s, std::min(context_len, end - 1 - s)});
    }
  }
  return windows;
}

struct EvalSet {
  std::vector<EvalPair> pairs;
  std::vector<ScoringWindow> windows;
  double percentile = 50.0;
  double frequency_threshold = 0.0;
  std::size_t context_len = 0;
  std::string mask_source;
  std::string frequency_source;
};

inline EvalSet select_rare_targets(const TokenStream& stream, const FrequencyTable& freq, double percentile,
                                   std::span<const std::uint8_t> valid_mask, std::size_t context_len) {
  require(percentile > 0.0 && percentile <= 100.0, "percentile must lie in (0, 100], got ", percentile);
  require(valid_mask.size() == freq.counts.size(), "mask length ", valid_mask.size(),
          " differs from vocabulary size ", freq.counts.size());

  std::vector<double> type_counts;
  for (auto c : freq.counts) {
    if (c > 0) type_counts.push_back(static_cast<double>(c));
  }
  if (type_counts.empty()) fail("empty eval set: frequency table has no observed tokens");

  // percentile 100 keeps every observed type; below that the cut is strict.
  const double threshold = percentile_linear(type_counts, percentile);
  auto rare = [&](std::uint32_t id) {
    const auto c = static_cast<double>(freq.counts[id]);
    return c > 0 && (percentile >= 100.0 || c < threshold);
  };

  EvalSet out;
  out.percentile = percentile;
  out.frequency_threshold = threshold;
  out.context_len = context_len;
  out.windows = scoring_windows(stream, context_len);

  std::size_t stage1 = 0;
  for (std::size_t w = 0; w < out.windows.size(); ++w) {
    const auto& win = out.windows[w];
    for (std::size_t r = 0; r < win.length; ++r) {
      const std::size_t pos = win.begin + r + 1;
      const auto id = stream.ids[pos];
      require(id < freq.counts.size(), "token id ", id, " at position ", pos, " >= vocabulary size");
      if (!rare(id)) continue;
      ++stage1;
      if (!valid_mask[id]) continue;
      EvalPair p;
      p.context.assign(stream.ids.begin() + static_cast<std::ptrdiff_t>(win.begin),
                       stream.ids.begin() + static_cast<std::ptrdiff_t>(pos));
      p.target = id;
      p.position = pos;
      p.window = w;
      p.row = r;
      out.pairs.push_back(std::move(p));
    }
  }
  if (stage1 == 0) fail("empty eval set: frequency stage removed every target position");
  if (out.pairs.empty()) fail("empty eval set: validity-mask stage removed every target position");
  return out;
}

}  // namespace raretok
