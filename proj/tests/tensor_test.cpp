#include <cmath>
#include <cstring>
#include <limits>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "raretok/linalg.hpp"
#include "raretok/random.hpp"
#include "raretok/tensor.hpp"
#include "test_util.hpp"

namespace raretok {
namespace {

using testing::scratch_dir;

TEST(TensorFile, TwoByTwoHasFortyBytes) {
  const auto dir = scratch_dir("tensor");
  save_tensor(Tensor({2, 2}, {1, 2, 3, 4}), dir / "t.rtn");
  const auto bytes = io::read_file(dir / "t.rtn");
  ASSERT_EQ(bytes.size(), 40u);
  EXPECT_EQ(bytes.substr(0, 4), "RTN1");
  EXPECT_EQ(bytes[4], 0);  // dtype f32
  EXPECT_EQ(bytes[5], 2);  // ndim
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);  // first extent, little-endian u64
  float first;
  std::memcpy(&first, bytes.data() + 24, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(TensorFile, ScalarShapeIsHeaderPlusOneValue) {
  const auto dir = scratch_dir("tensor");
  save_tensor(Tensor({}, {7.5f}), dir / "s.rtn");
  EXPECT_EQ(io::read_file(dir / "s.rtn").size(), 12u);
  const Tensor back = load_tensor(dir / "s.rtn");
  EXPECT_EQ(back.ndim(), 0u);
  EXPECT_EQ(back.data()[0], 7.5f);
}

TEST(TensorFile, RoundTripIsBitExactForRandomShapes) {
  const auto dir = scratch_dir("tensor");
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::uint64_t> shape(rng.below(4));
    for (auto& e : shape) e = rng.below(5);  // includes empty extents
    Tensor t(shape);
    for (auto& v : t.data()) {
      v = static_cast<float>(rng.normal() * 1e3);
    }
    if (t.size() > 0 && trial % 3 == 0) t.data()[0] = -0.0f;
    save_tensor(t, dir / "r.rtn");
    const auto bytes = io::read_file(dir / "r.rtn");
    const Tensor back = load_tensor(dir / "r.rtn");
    ASSERT_EQ(back.shape(), t.shape());
    ASSERT_EQ(encode_tensor(back), bytes);
    ASSERT_EQ(std::memcmp(back.data().data(), t.data().data(), 4 * t.size()), 0);
  }
}

TEST(TensorFile, RejectsBadMagic) {
  const auto dir = scratch_dir("tensor");
  std::string bytes = encode_tensor(Tensor({2}, {1, 2}));
  bytes.replace(0, 4, "XXXX");
  io::write_file(dir / "bad.rtn", bytes);
  try {
    load_tensor(dir / "bad.rtn");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("not a tensor file"), std::string::npos);
  }
}

TEST(TensorFile, RejectsTruncatedPayload) {
  const auto dir = scratch_dir("tensor");
  std::string bytes = encode_tensor(Tensor({10}));
  bytes.resize(bytes.size() - 8);  // 8 of 10 elements present
  io::write_file(dir / "short.rtn", bytes);
  try {
    load_tensor(dir / "short.rtn");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("length mismatch"), std::string::npos);
  }
}

TEST(TensorFile, RejectsNonFiniteUnlessAllowed) {
  const auto dir = scratch_dir("tensor");
  save_tensor(Tensor({3}, {1.0f, std::numeric_limits<float>::quiet_NaN(), 2.0f}), dir / "nan.rtn");
  try {
    load_tensor(dir / "nan.rtn");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite value at index 1"), std::string::npos);
  }
  EXPECT_TRUE(std::isnan(load_tensor(dir / "nan.rtn", true).data()[1]));
}

TEST(TensorFile, MissingFileNamesPath) {
  try {
    load_tensor("/nonexistent/dir/x.rtn");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.rtn"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------

Matrix random_symmetric(Rng& rng, std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = m(j, i) = rng.normal();
  return m;
}

std::vector<double> reference_eigenvalues(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(e, Eigen::EigenvaluesOnly);
  const auto& v = solver.eigenvalues();
  return {v.data(), v.data() + v.size()};
}

TEST(SymEig, Identity) {
  const auto s = sym_eig(Matrix::identity(3));
  ASSERT_EQ(s.eigenvalues.size(), 3u);
  for (double v : s.eigenvalues) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(SymEig, DiagonalComesBackAscending) {
  Matrix m(3, 3);
  m(0, 0) = 3;
  m(1, 1) = 1;
  m(2, 2) = 2;
  const auto s = sym_eig(m);
  EXPECT_EQ(s.eigenvalues, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(s.source_dim, 3u);
}

TEST(SymEig, MatchesReferenceSolver) {
  Rng rng(6);
  for (std::size_t n : {6u, 6u, 6u, 17u, 50u}) {
    const Matrix m = random_symmetric(rng, n);
    const auto ours = sym_eig(m).eigenvalues;
    const auto ref = reference_eigenvalues(m);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(ours[i], ref[i], 1e-8) << "n=" << n << " i=" << i;
  }
}

TEST(SymEig, ReconstructsInput) {
  Rng rng(8);
  const Matrix m = random_symmetric(rng, 12);
  const auto s = sym_eig(m, true);
  double resid = 0, norm = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 12; ++j) {
      double r = 0;
      for (std::size_t k = 0; k < 12; ++k) r += s.eigenvectors(i, k) * s.eigenvalues[k] * s.eigenvectors(j, k);
      resid += (m(i, j) - r) * (m(i, j) - r);
      norm += m(i, j) * m(i, j);
    }
  }
  EXPECT_LE(std::sqrt(resid), 1e-5 * std::sqrt(norm));
}

TEST(SymEig, EigenvalueSumIsTrace) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    const Matrix m = random_symmetric(rng, n);
    double trace = 0, mx = 0;
    for (std::size_t i = 0; i < n; ++i) trace += m(i, i);
    for (double v : m.data()) mx = std::max(mx, std::abs(v));
    const auto ev = sym_eig(m).eigenvalues;
    double sum = 0;
    for (double v : ev) sum += v;
    EXPECT_NEAR(sum, trace, 1e-6 * static_cast<double>(n) * mx);
    EXPECT_TRUE(std::is_sorted(ev.begin(), ev.end()));
  }
}

TEST(SymEig, InsensitiveToSymmetrizationNoise) {
  Rng rng(10);
  Matrix m = random_symmetric(rng, 8);
  Matrix noisy = m;
  noisy(1, 4) += 1e-9;
  noisy(6, 2) -= 1e-9;
  const auto a = sym_eig(m).eigenvalues, b = sym_eig(noisy).eigenvalues;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-8);
}

TEST(SymEig, DeterministicBytes) {
  Rng rng(12);
  const Matrix m = random_symmetric(rng, 30);
  const auto a = sym_eig(m).eigenvalues, b = sym_eig(m).eigenvalues;
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
}

TEST(SymEig, RejectsNonSquare) {
  EXPECT_THROW(sym_eig(Matrix(2, 3)), ContractViolation);
  EXPECT_THROW(sym_eig(Tensor({2, 3})), ContractViolation);
}

TEST(SymEig, AcceptsTensorInput) {
  const auto s = sym_eig(Tensor({2, 2}, {2, 1, 1, 2}));
  EXPECT_NEAR(s.eigenvalues[0], 1.0, 1e-12);
  EXPECT_NEAR(s.eigenvalues[1], 3.0, 1e-12);
}

}  // namespace
}  // namespace raretok
