#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "sslu/errors.hpp"
#include "sslu/tensor.hpp"

using namespace sslu;

TEST(Tensor, ShapeAndIndexing) {
  Tensor2 t{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 6.0);
  EXPECT_EQ(t.row(1)[0], 4.0);
  EXPECT_THROW(Tensor2(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, AppendRowChecksWidth) {
  Tensor2 t(0, 3);
  t.append_row(std::vector<double>{1, 2, 3});
  EXPECT_EQ(t.rows(), 1u);
  EXPECT_THROW(t.append_row(std::vector<double>{1, 2}), DimensionError);
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> d(1, 9);
    const std::size_t n = d(rng), k = d(rng), m = d(rng);
    const Tensor2 a = oracle::random_tensor(rng, n, k), b = oracle::random_tensor(rng, k, m);
    EXPECT_LT(max_abs_diff(matmul(a, b), oracle::naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, SmallExample) {
  const Tensor2 a{{1, 2}, {3, 4}}, b{{5, 6}, {7, 8}};
  EXPECT_EQ(matmul(a, b), (Tensor2{{19, 22}, {43, 50}}));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor2(2, 3), Tensor2(2, 3)), DimensionError);
  EXPECT_THROW(affine(Tensor2(2, 3), Tensor2(3, 2), std::vector<double>{1.0}), DimensionError);
}

TEST(Affine, AddsBiasPerRow) {
  const Tensor2 x{{1, 0}, {0, 1}}, w{{2, 3}, {4, 5}};
  const std::vector<double> b{10, 20};
  EXPECT_EQ(affine(x, w, b), (Tensor2{{12, 23}, {14, 25}}));
}

TEST(LogSumExp, AgreesWithLongDoubleSum) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 20.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> xs(1 + trial % 17);
    for (double& x : xs) x = n(rng);
    long double s = 0;
    const double mx = *std::max_element(xs.begin(), xs.end());
    for (double x : xs) s += std::exp(static_cast<long double>(x - mx));
    EXPECT_NEAR(logsumexp(xs), mx + static_cast<double>(std::log(s)), 1e-12 * std::max(1.0, std::abs(mx)));
  }
}

TEST(LogSumExp, PermutationAndShiftInvariant) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> xs(2 + trial % 9);
    for (double& x : xs) x = n(rng);
    const double base = logsumexp(xs);
    std::shuffle(xs.begin(), xs.end(), rng);
    EXPECT_NEAR(logsumexp(xs), base, 1e-12);
    const double c = n(rng);
    for (double& x : xs) x += c;
    EXPECT_NEAR(logsumexp(xs), base + c, 1e-11);
  }
}

TEST(LogSumExp, HandlesInfinitiesAndExtremes) {
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  EXPECT_EQ(logsumexp(std::vector<double>{ninf, ninf}), ninf);
  EXPECT_DOUBLE_EQ(logsumexp(std::vector<double>{ninf, 0.0}), 0.0);
  EXPECT_DOUBLE_EQ(logsumexp(std::vector<double>{1000.0, 1000.0}), 1000.0 + std::log(2.0));
  EXPECT_DOUBLE_EQ(logsumexp(std::vector<double>{-1000.0, -1000.0}), -1000.0 + std::log(2.0));
  EXPECT_THROW(logsumexp(std::vector<double>{}), DimensionError);
}

TEST(LogAddExp, MatchesPairLogSumExp) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 30.0);
  for (int i = 0; i < 100; ++i) {
    const double a = n(rng), b = n(rng);
    EXPECT_NEAR(logaddexp(a, b), logsumexp(std::vector<double>{a, b}), 1e-12 * std::max(1.0, std::abs(a) + std::abs(b)));
  }
}

TEST(LogSoftmax, RowsExponentiateToOne) {
  std::mt19937_64 rng(8);
  const Tensor2 x = oracle::random_tensor(rng, 20, 13, 10.0);
  const Tensor2 ls = log_softmax_rows(x);
  for (std::size_t r = 0; r < ls.rows(); ++r) {
    long double s = 0;
    for (double v : ls.row(r)) {
      EXPECT_LE(v, 0.0);
      s += std::exp(static_cast<long double>(v));
    }
    EXPECT_NEAR(static_cast<double>(s), 1.0, 1e-12);
  }
}

TEST(LogSoftmax, UniformRow) {
  const auto ls = log_softmax(std::vector<double>(5, 3.0));
  for (double v : ls) EXPECT_NEAR(v, -std::log(5.0), 1e-15);
}

TEST(Sigmoid, StableAtExtremes) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 1e-15);
}
