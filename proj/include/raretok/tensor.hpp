#pragma once

// Dense f32 tensors and the "RTN1" container.
//
// Layout (little-endian throughout):
//   "RTN1" | u8 dtype (0 = f32) | u8 ndim | u16 reserved (0) | ndim x u64 extents | f32 payload

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "raretok/error.hpp"

namespace raretok {

enum class DType : std::uint8_t { f32 = 0 };

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::uint64_t> shape)
      : shape_(std::move(shape)), data_(element_count(shape_), 0.0f) {}

  Tensor(std::vector<std::uint64_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == element_count(shape_), "tensor payload has ", data_.size(),
            " elements but shape implies ", element_count(shape_));
  }

  static std::size_t element_count(std::span<const std::uint64_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::uint64_t b) { return a * static_cast<std::size_t>(b); });
  }

  DType dtype() const { return DType::f32; }
  const std::vector<std::uint64_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::uint64_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  // Row-major 2-D access.
  float at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }
  float& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  std::span<const float> row(std::size_t r) const {
    const auto cols = static_cast<std::size_t>(shape_.at(1));
    return std::span<const float>(data_).subspan(r * cols, cols);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::uint64_t> shape_;
  std::vector<float> data_;
};

inline std::string shape_string(std::span<const std::uint64_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace io {

// Little-endian primitive encoding shared by every binary format in the toolkit.
template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

inline void put_f32(std::string& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  bool take_magic(std::string_view magic) {
    if (remaining() < magic.size()) return false;
    bool ok = std::string_view(bytes_).substr(pos_, magic.size()) == magic;
    pos_ += magic.size();
    return ok;
  }

  template <typename T>
  bool get_le(T& value) {
    static_assert(std::is_unsigned_v<T>);
    if (remaining() < sizeof(T)) return false;
    value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return true;
  }

  bool get_f32(float& v) {
    std::uint32_t bits = 0;
    if (!get_le(bits)) return false;
    v = std::bit_cast<float>(bits);
    return true;
  }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open ", path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail("read failure on ", path.string());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open ", path.string(), " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) fail("write failure on ", path.string());
}

}  // namespace io

inline std::string encode_tensor(const Tensor& t) {
  require(t.ndim() <= 255, "tensor rank ", t.ndim(), " exceeds container limit");
  std::string out;
  out.reserve(8 + 8 * t.ndim() + 4 * t.size());
  out.append("RTN1");
  out.push_back(static_cast<char>(DType::f32));
  out.push_back(static_cast<char>(t.ndim()));
  io::put_le<std::uint16_t>(out, 0);
  for (auto e : t.shape()) io::put_le<std::uint64_t>(out, e);
  for (float v : t.data()) io::put_f32(out, v);
  return out;
}

inline Tensor decode_tensor(std::string bytes, bool allow_nonfinite = false) {
  io::Reader in(std::move(bytes));
  if (!in.take_magic("RTN1")) fail("not a tensor file");
  std::uint8_t dtype = 0, ndim = 0;
  std::uint16_t reserved = 0;
  if (!in.get_le(dtype) || !in.get_le(ndim) || !in.get_le(reserved)) fail("length mismatch: truncated header");
  if (dtype != static_cast<std::uint8_t>(DType::f32)) fail("unsupported dtype code ", int(dtype));
  std::vector<std::uint64_t> shape(ndim);
  for (auto& e : shape) {
    if (!in.get_le(e)) fail("length mismatch: truncated shape");
  }
  // Guard the product against overflow before trusting it as an allocation size.
  std::uint64_t count = 1;
  for (auto e : shape) {
    if (e != 0 && count > (std::uint64_t{1} << 62) / e) fail("length mismatch: shape too large");
    count *= e;
  }
  if (in.remaining() != count * 4) {
    fail("length mismatch: header implies ", count, " elements, file holds ", in.remaining() / 4.0);
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < data.size(); ++i) {
    in.get_f32(data[i]);
    if (!allow_nonfinite && !std::isfinite(data[i])) fail("non-finite value at index ", i);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  io::write_file(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::filesystem::path& path, bool allow_nonfinite = false) {
  try {
    return decode_tensor(io::read_file(path), allow_nonfinite);
  } catch (const Error& e) {
    fail(path.string(), ": ", e.what());
  }
}

}  // namespace raretok
