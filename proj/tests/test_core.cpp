#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gma/core.hpp"
#include "oracles.hpp"

using namespace gma;

TEST(Softmax, AllZeroIsUniform) {
  const auto a = softmax_rows(Matrix(3, 3));
  for (double w : a.matrix().data) EXPECT_DOUBLE_EQ(w, 1.0 / 3.0);
}

TEST(Softmax, ExactExponentials) {
  Matrix l(3, 3);
  l(0, 0) = std::log(1.0);
  l(0, 1) = std::log(2.0);
  l(0, 2) = std::log(3.0);
  const auto a = softmax_rows(l);
  EXPECT_NEAR(a(0, 0), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(a(0, 1), 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(a(0, 2), 3.0 / 6.0, 1e-15);
}

TEST(Softmax, MatchesNaiveOracleOnRandomLogits) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix l(8, 8);
    rng.fill(l.data, -3.0, 3.0);
    const auto a = softmax_rows(l);
    const auto ref = oracle::naive_softmax(l);
    EXPECT_LT(max_abs_diff(a.matrix().data, ref.data), 1e-9);
    for (std::size_t i = 0; i < 8; ++i) {
      double s = 0.0;
      for (double w : a.row(i)) s += w;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, ShiftInvariantPerRow) {
  Rng rng(12);
  Matrix l(6, 6);
  rng.fill(l.data, -2.0, 2.0);
  Matrix shifted = l;
  for (std::size_t i = 0; i < 6; ++i) {
    const double c = rng.uniform(-50.0, 50.0);
    for (double& x : shifted.row(i)) x += c;
  }
  EXPECT_LT(max_abs_diff(softmax_rows(l).matrix().data, softmax_rows(shifted).matrix().data), 1e-9);
}

TEST(Softmax, NoOverflowAtLargeMagnitude) {
  Matrix l(2, 2);
  l.data = {1e4, -1e4, 1e4, 1e4};
  const auto a = softmax_rows(l);
  EXPECT_TRUE(all_finite(a.matrix().data));
  EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(a(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(a(1, 0), 0.5);
}

TEST(Softmax, RejectsNonFiniteWithRow) {
  Matrix l(4, 4);
  l(2, 1) = std::numeric_limits<double>::quiet_NaN();
  try {
    softmax_rows(l);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
  l(2, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax_rows(l), ValidationError);
}

TEST(Flatten, RowMajorOrder) {
  FeatureMap fm(2, 3, 1, {0, 1, 2, 3, 4, 5});
  const Matrix m = flatten_hw(fm);
  EXPECT_EQ(m.rows, 6u);
  EXPECT_EQ(m.cols, 1u);
  EXPECT_EQ(m.data, (std::vector<double>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(flat_index(2, 3, 5), 13u);
}

TEST(Flatten, RoundTripIsIdentity) {
  Rng rng(5);
  for (std::size_t h = 1; h <= 4; ++h)
    for (std::size_t w = 1; w <= 4; ++w)
      for (std::size_t d = 1; d <= 3; ++d) {
        FeatureMap fm(h, w, d);
        rng.fill(fm.data, -1.0, 1.0);
        EXPECT_EQ(unflatten_hw(flatten_hw(fm), h, w), fm);
      }
}

TEST(Flatten, UnflattenRejectsMismatch) {
  EXPECT_THROW(unflatten_hw(Matrix(6, 2), 4, 2), ValidationError);
  EXPECT_THROW(FeatureMap(2, 2, 2, std::vector<double>(7)), ValidationError);
}

TEST(AttentionMatrix, FromWeightsChecksStochasticity) {
  Matrix w(2, 2, 0.5);
  EXPECT_NO_THROW(AttentionMatrix::from_weights(w));
  w(1, 1) = 0.6;
  EXPECT_THROW(AttentionMatrix::from_weights(w), ValidationError);
  Matrix neg(1, 1, 1.0);
  neg(0, 0) = -1.0;
  EXPECT_THROW(AttentionMatrix::from_weights(neg), ValidationError);
}

TEST(MatrixProducts, AgreeWithEachOther) {
  Rng rng(3);
  Matrix a(4, 3), b(5, 3);
  rng.fill(a.data, -1, 1);
  rng.fill(b.data, -1, 1);
  Matrix bt(3, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 3; ++k) bt(k, i) = b(i, k);
  Matrix at(3, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k) at(k, i) = a(i, k);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b).data, matmul(a, bt).data), 1e-14);
  EXPECT_LT(max_abs_diff(matmul_tn(at, bt).data, matmul(a, bt).data), 1e-14);
}

TEST(Rng, DeterministicPerSeed) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 5; ++i) {
    const double x = a.uniform01();
    EXPECT_EQ(x, b.uniform01());
    EXPECT_GE(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
  EXPECT_NE(Rng(42).uniform01(), c.uniform01());
}
