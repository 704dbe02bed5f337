#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "gma/gma.hpp"
#include "oracles.hpp"

using namespace gma;

namespace {

GmaConfig small_config(Variant v, std::size_t d = 4) {
  GmaConfig c;
  c.variant = v;
  c.d_in = c.d_c = c.d_m = d;
  return c;
}

GmaParams random_params(const GmaConfig& c, std::size_t h, std::size_t w, Rng& rng, double alpha) {
  auto p = GmaParams::zeros(c.d_in, c.d_c, c.d_m, h, w);
  rng.fill(p.w_qry.data, -1, 1);
  rng.fill(p.w_key.data, -1, 1);
  rng.fill(p.w_val.data, -1, 1);
  rng.fill(p.pos_v.data, -1, 1);
  rng.fill(p.pos_h.data, -1, 1);
  p.alpha = alpha;
  return p;
}

FeatureMap random_map(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
  FeatureMap m(h, w, d);
  rng.fill(m.data, -1, 1);
  return m;
}

FeatureMap permute_pixels(const FeatureMap& m, const std::vector<std::size_t>& perm) {
  FeatureMap out(m.height, m.width, m.channels);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t k = 0; k < m.channels; ++k) out.data[i * m.channels + k] = m.data[perm[i] * m.channels + k];
  return out;
}

}  // namespace

TEST(ProjectQkv, IdentityAndZeroProjections) {
  Rng rng(1);
  auto p = GmaParams::zeros(3, 3, 2, 2, 2);
  p.w_qry = Matrix::identity(3);
  const auto x = random_map(2, 2, 3, rng);
  const auto y = random_map(2, 2, 2, rng);
  const auto proj = project_qkv(x, y, p);
  EXPECT_EQ(proj.q, flatten_hw(x));
  for (double v : proj.v.data) EXPECT_EQ(v, 0.0);
}

TEST(ProjectQkv, HandComputedTwoByTwo) {
  // 1x2 grid, D = 2. x_0 = (1, 2), x_1 = (3, -1); y_0 = (0.5, 1), y_1 = (2, 0).
  auto p = GmaParams::zeros(2, 2, 2, 1, 2);
  p.w_qry.data = {1, 2, 3, 4};
  p.w_key.data = {0, 1, -1, 0};
  p.w_val.data = {2, 0, 1, 1};
  const FeatureMap x(1, 2, 2, {1, 2, 3, -1});
  const FeatureMap y(1, 2, 2, {0.5, 1, 2, 0});
  const auto proj = project_qkv(x, y, p);
  // W_qry x_0 = (1+4, 3+8) = (5, 11); W_qry x_1 = (3-2, 9-4) = (1, 5)
  EXPECT_EQ(proj.q.data, (std::vector<double>{5, 11, 1, 5}));
  // W_key x_0 = (2, -1); W_key x_1 = (-1, -3)
  EXPECT_EQ(proj.k.data, (std::vector<double>{2, -1, -1, -3}));
  // W_val y_0 = (1, 1.5); W_val y_1 = (4, 2)
  EXPECT_EQ(proj.v.data, (std::vector<double>{1, 1.5, 4, 2}));
}

TEST(ProjectQkv, ShapeMismatch) {
  Rng rng(2);
  auto p = GmaParams::zeros(2, 3, 2, 2, 2);
  EXPECT_THROW(project_qkv(random_map(2, 2, 3, rng), random_map(2, 3, 2, rng), p), ValidationError);
  EXPECT_THROW(project_qkv(random_map(2, 2, 4, rng), random_map(2, 2, 2, rng), p), ValidationError);
}

TEST(AttentionLogits, ZeroKeyGivesUniformAttention) {
  Rng rng(3);
  Matrix q(4, 3), k(4, 3);
  rng.fill(q.data, -1, 1);
  auto tables = GmaParams::zeros(3, 3, 3, 2, 2);
  const auto a = softmax_rows(attention_logits(q, k, tables, Variant::ContentOnly, 2, 2));
  for (double w : a.matrix().data) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(AttentionLogits, ZeroPositionTablesDegenerateToContent) {
  Rng rng(4);
  Matrix q(9, 4), k(9, 4);
  rng.fill(q.data, -1, 1);
  rng.fill(k.data, -1, 1);
  const auto tables = GmaParams::zeros(4, 4, 4, 3, 3);
  const auto c = attention_logits(q, k, tables, Variant::ContentOnly, 3, 3);
  const auto cp = attention_logits(q, k, tables, Variant::ContentPlusPosition, 3, 3);
  EXPECT_LT(max_abs_diff(c.data, cp.data), 1e-12);
}

TEST(AttentionLogits, HandFilledTwoByTwoMatchesPairLoop) {
  auto tables = GmaParams::zeros(2, 2, 2, 2, 2);
  tables.pos_v.data = {0.1, -0.2, 0.0, 0.3, 0.5, 0.25};
  tables.pos_h.data = {-0.4, 0.2, 0.1, 0.0, 0.7, -0.6};
  Matrix q(4, 2, std::vector<double>{1, 0, 0.5, -1, 2, 1, -0.5, 0.25});
  Matrix k(4, 2, std::vector<double>{0, 1, 1, 1, -1, 0.5, 0.3, -0.2});
  for (auto v : {Variant::ContentOnly, Variant::ContentPlusPosition, Variant::PositionOnly}) {
    const auto got = attention_logits(q, k, tables, v, 2, 2);
    const auto ref = oracle::logits(q, k, tables, v, 2, 2);
    EXPECT_LT(max_abs_diff(got.data, ref.data), 1e-12) << to_string(v);
  }
  // One entry by hand: content+pos, i = (0,0), j = (1,1): offset (+1,+1).
  // K_3 + pos_v[2] + pos_h[2] = (0.3+0.5+0.7, -0.2+0.25-0.6) = (1.5, -0.55); <(1,0), .> = 1.5
  const auto cp = attention_logits(q, k, tables, Variant::ContentPlusPosition, 2, 2);
  EXPECT_NEAR(cp(0, 3), 1.5 / std::sqrt(2.0), 1e-15);
}

TEST(AttentionLogits, OffsetsBeyondTablesRejected) {
  Matrix q(9, 2), k(9, 2);
  const auto tables = GmaParams::zeros(2, 2, 2, 2, 3);
  EXPECT_THROW(attention_logits(q, k, tables, Variant::PositionOnly, 3, 3), ValidationError);
  EXPECT_NO_THROW(attention_logits(q, k, tables, Variant::ContentOnly, 3, 3));
}

TEST(Aggregate, AlphaZeroIsIdentity) {
  Rng rng(5);
  Matrix y(4, 3), v(4, 3);
  rng.fill(y.data, -1, 1);
  rng.fill(v.data, -1, 1);
  const auto a = softmax_rows(Matrix(4, 4));
  EXPECT_EQ(aggregate(y, a, v, 0.0, Residual::With), y);
}

TEST(Aggregate, UniformAttentionAddsColumnMean) {
  Rng rng(6);
  Matrix y(4, 3), v(4, 3);
  rng.fill(y.data, -1, 1);
  rng.fill(v.data, -1, 1);
  const auto out = aggregate(y, softmax_rows(Matrix(4, 4)), v, 1.0, Residual::With);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 4; ++j) mean += v(j, c) / 4.0;
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out(i, c), y(i, c) + mean, 1e-15);
  }
}

TEST(Aggregate, MatchesTripleLoopOracle) {
  Rng rng(7);
  for (int t = 0; t < 5; ++t) {
    Matrix y(4, 3), v(4, 3), l(4, 4);
    rng.fill(y.data, -1, 1);
    rng.fill(v.data, -1, 1);
    rng.fill(l.data, -2, 2);
    const auto a = softmax_rows(l);
    const double alpha = rng.uniform(-2, 2);
    for (auto res : {Residual::With, Residual::Without}) {
      const auto got = aggregate(y, a, v, alpha, res);
      const auto ref = oracle::aggregate(y, a.matrix(), v, alpha, res == Residual::With);
      EXPECT_LT(max_abs_diff(got.data, ref.data), 1e-12);
    }
  }
}

TEST(Aggregate, ShapeMismatch) {
  const auto a = softmax_rows(Matrix(4, 4));
  EXPECT_THROW(aggregate(Matrix(3, 2), a, Matrix(4, 2), 1.0, Residual::With), ValidationError);
  EXPECT_THROW(aggregate(Matrix(4, 2), a, Matrix(4, 3), 1.0, Residual::With), ValidationError);
}

TEST(GmaForward, AlphaZeroConcatenatesYYX) {
  Rng rng(8);
  const auto cfg = small_config(Variant::ContentPlusPosition, 3);
  const auto p = random_params(cfg, 3, 3, rng, 0.0);
  const auto x = random_map(3, 3, 3, rng), y = random_map(3, 3, 3, rng);
  const auto out = gma_forward(x, y, p, cfg);
  EXPECT_EQ(out.y_hat, flatten_hw(y));
  ASSERT_EQ(out.combined.channels, 9u);
  for (std::size_t px = 0; px < 9; ++px)
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(out.combined.data[px * 9 + k], y.data[px * 3 + k]);
      EXPECT_EQ(out.combined.data[px * 9 + 3 + k], y.data[px * 3 + k]);
      EXPECT_EQ(out.combined.data[px * 9 + 6 + k], x.data[px * 3 + k]);
    }
}

TEST(GmaForward, ReplaceModeDropsLocalMotion) {
  Rng rng(9);
  auto cfg = small_config(Variant::ContentOnly, 3);
  cfg.combine = CombineMode::Replace;
  const auto p = random_params(cfg, 2, 3, rng, 0.7);
  const auto x = random_map(2, 3, 3, rng), y = random_map(2, 3, 3, rng);
  const auto out = gma_forward(x, y, p, cfg);
  ASSERT_EQ(out.combined.channels, cfg.combined_channels());
  ASSERT_EQ(out.combined.channels, 6u);
  const FeatureMap agg = unflatten_hw(out.y_hat, 2, 3);
  EXPECT_EQ(out.combined, concat_channels({&agg, &x}));
}

TEST(GmaForward, FixedAlphaIgnoresParameter) {
  Rng rng(10);
  auto cfg = small_config(Variant::ContentOnly, 2);
  auto p = random_params(cfg, 2, 2, rng, 0.0);
  const auto x = random_map(2, 2, 2, rng), y = random_map(2, 2, 2, rng);
  cfg.alpha_mode = AlphaMode::FixedOne;
  const auto fixed = gma_forward(x, y, p, cfg);
  p.alpha = 1.0;
  cfg.alpha_mode = AlphaMode::Learned;
  EXPECT_EQ(gma_forward(x, y, p, cfg).y_hat, fixed.y_hat);
}

TEST(GmaForward, WithoutResidualIsPureAggregate) {
  Rng rng(11);
  auto cfg = small_config(Variant::ContentOnly, 2);
  cfg.residual = Residual::Without;
  const auto p = random_params(cfg, 2, 2, rng, 0.0);
  const auto out = gma_forward(random_map(2, 2, 2, rng), random_map(2, 2, 2, rng), p, cfg);
  for (double v : out.y_hat.data) EXPECT_EQ(v, 0.0);
}

TEST(GmaForward, PermutationEquivarianceContentOnly) {
  Rng rng(12);
  const auto cfg = small_config(Variant::ContentOnly, 4);
  for (int t = 0; t < 5; ++t) {
    const auto p = random_params(cfg, 3, 4, rng, rng.uniform(0.5, 1.5));
    const auto x = random_map(3, 4, 4, rng), y = random_map(3, 4, 4, rng);
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    const auto base = gma_forward(x, y, p, cfg);
    const auto moved = gma_forward(permute_pixels(x, perm), permute_pixels(y, perm), p, cfg);
    const auto expect = permute_pixels(unflatten_hw(base.y_hat, 3, 4), perm);
    EXPECT_LT(max_abs_diff(moved.y_hat.data, expect.data), 1e-9);
  }
}

TEST(GmaForward, KeyShiftLeavesAttentionUnchanged) {
  Rng rng(13);
  const std::size_t n = 9, d = 4;
  Matrix q(n, d), k(n, d);
  rng.fill(q.data, -1, 1);
  rng.fill(k.data, -1, 1);
  std::vector<double> c(d);
  rng.fill(c, -3, 3);
  Matrix shifted = k;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t t = 0; t < d; ++t) shifted(j, t) += c[t];
  const auto tables = GmaParams::zeros(d, d, d, 3, 3);
  const auto a = softmax_rows(attention_logits(q, k, tables, Variant::ContentOnly, 3, 3));
  const auto b = softmax_rows(attention_logits(q, shifted, tables, Variant::ContentOnly, 3, 3));
  EXPECT_LT(max_abs_diff(a.matrix().data, b.matrix().data), 1e-9);
}

TEST(GmaForward, PositionOnlyRowsAreTranslates) {
  // Two queries with identical query vectors attend identically up to a
  // translation, wherever both offsets are inside the grid.
  Rng rng(14);
  const std::size_t h = 5, w = 5, d = 3;
  auto tables = GmaParams::zeros(d, d, d, h, w);
  rng.fill(tables.pos_v.data, -1, 1);
  rng.fill(tables.pos_h.data, -1, 1);
  Matrix q(h * w, d), k(h * w, d);
  rng.fill(q.data, -1, 1);
  const std::size_t i1 = flat_index(1, 1, w), i2 = flat_index(2, 3, w);
  for (std::size_t t = 0; t < d; ++t) q(i2, t) = q(i1, t);
  const auto logits = attention_logits(q, k, tables, Variant::PositionOnly, h, w);
  // Compare logits (softmax normalizers differ because the visible windows differ).
  for (long dr = -1; dr <= 2; ++dr)
    for (long dc = -1; dc <= 1; ++dc) {
      const std::size_t j1 = flat_index(static_cast<std::size_t>(1 + dr), static_cast<std::size_t>(1 + dc), w);
      const std::size_t j2 = flat_index(static_cast<std::size_t>(2 + dr), static_cast<std::size_t>(3 + dc), w);
      EXPECT_NEAR(logits(i1, j1), logits(i2, j2), 1e-12);
    }
  // Ratios of attention weights are translates as well.
  const auto a = softmax_rows(logits);
  const double r1 = a(i1, flat_index(0, 0, w)) / a(i1, flat_index(3, 2, w));
  const double r2 = a(i2, flat_index(1, 2, w)) / a(i2, flat_index(4, 4, w));
  EXPECT_NEAR(r1, r2, 1e-9 * std::abs(r1));
}

TEST(GmaForward, TiledPathMatchesMaterialized) {
  Rng rng(15);
  for (auto v : {Variant::ContentOnly, Variant::ContentPlusPosition, Variant::PositionOnly}) {
    auto cfg = small_config(v, 5);
    const auto p = random_params(cfg, 6, 7, rng, 0.9);
    const auto x = random_map(6, 7, 5, rng), y = random_map(6, 7, 5, rng);
    const auto full = gma_forward(x, y, p, cfg).y_hat;
    for (std::size_t block : {1u, 5u, 16u, 64u}) {
      EXPECT_LT(max_abs_diff(gma_forward_tiled(x, y, p, cfg, block).data, full.data), 1e-6)
          << to_string(v) << " block " << block;
    }
    cfg.residual = Residual::Without;
    EXPECT_LT(max_abs_diff(gma_forward_tiled(x, y, p, cfg, 7).data, gma_forward(x, y, p, cfg).y_hat.data), 1e-6);
  }
}

TEST(GmaForward, ConfigParamsMismatchRejected) {
  Rng rng(16);
  const auto cfg = small_config(Variant::ContentOnly, 4);
  const auto p = GmaParams::zeros(4, 4, 3, 2, 2);
  EXPECT_THROW(gma_forward(random_map(2, 2, 4, rng), random_map(2, 2, 3, rng), p, cfg), ValidationError);
}

TEST(GmaBackward, AlphaZeroGradients) {
  Rng rng(17);
  const auto cfg = small_config(Variant::ContentPlusPosition, 3);
  const auto p = random_params(cfg, 2, 2, rng, 0.0);
  const auto x = random_map(2, 2, 3, rng), y = random_map(2, 2, 3, rng);
  Matrix g(4, 3);
  rng.fill(g.data, -1, 1);
  const auto grads = gma_backward(x, y, p, cfg, g);
  EXPECT_EQ(grads.dy, g);
  for (double v : grads.d_w_val.data) EXPECT_EQ(v, 0.0);
  for (double v : grads.d_w_qry.data) EXPECT_EQ(v, 0.0);
  for (double v : grads.dx.data) EXPECT_EQ(v, 0.0);
  // d_alpha = sum_i g_i . (A V)_i
  const auto proj = project_qkv(x, y, p);
  const auto a = softmax_rows(attention_logits(proj.q, proj.k, p, cfg.variant, 2, 2));
  const auto av = oracle::aggregate(Matrix(4, 3), a.matrix(), proj.v, 1.0, false);
  double expect = 0.0;
  for (std::size_t t = 0; t < g.data.size(); ++t) expect += g.data[t] * av.data[t];
  EXPECT_NEAR(grads.d_alpha, expect, 1e-12);
}

TEST(GmaBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(18);
  const auto cfg = small_config(Variant::ContentPlusPosition, 3);
  const auto p = random_params(cfg, 2, 3, rng, 0.8);
  const auto grads = gma_backward(random_map(2, 3, 3, rng), random_map(2, 3, 3, rng), p, cfg, Matrix(6, 3));
  for (const Matrix* m : {&grads.d_w_qry, &grads.d_w_key, &grads.d_w_val, &grads.d_pos_v, &grads.d_pos_h, &grads.dx,
                          &grads.dy}) {
    for (double v : m->data) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(grads.d_alpha, 0.0);
}

TEST(GmaBackward, PositionOnlyNeverTouchesKey) {
  Rng rng(19);
  const auto cfg = small_config(Variant::PositionOnly, 3);
  const auto p = random_params(cfg, 3, 3, rng, 1.1);
  Matrix g(9, 3);
  rng.fill(g.data, -1, 1);
  const auto grads = gma_backward(random_map(3, 3, 3, rng), random_map(3, 3, 3, rng), p, cfg, g);
  for (double v : grads.d_w_key.data) EXPECT_EQ(v, 0.0);
}

TEST(GmaBackward, FixedAlphaHasNoAlphaGradient) {
  Rng rng(20);
  auto cfg = small_config(Variant::ContentOnly, 3);
  cfg.alpha_mode = AlphaMode::FixedOne;
  const auto p = random_params(cfg, 2, 2, rng, 0.0);
  Matrix g(4, 3);
  rng.fill(g.data, -1, 1);
  EXPECT_EQ(gma_backward(random_map(2, 2, 3, rng), random_map(2, 2, 3, rng), p, cfg, g).d_alpha, 0.0);
}

TEST(GmaParams, InitIsSeededWithZeroAlphaAndTables) {
  GmaConfig cfg = small_config(Variant::ContentOnly, 8);
  const auto a = GmaParams::init(cfg, 4, 5, 7);
  const auto b = GmaParams::init(cfg, 4, 5, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.alpha, 0.0);
  EXPECT_EQ(a.pos_v.rows, 7u);
  EXPECT_EQ(a.pos_h.rows, 9u);
  for (double v : a.pos_v.data) EXPECT_EQ(v, 0.0);
  const double bound = 1.0 / std::sqrt(8.0);
  for (double v : a.w_qry.data) EXPECT_LE(std::abs(v), bound);
  EXPECT_NE(a, GmaParams::init(cfg, 4, 5, 8));
  EXPECT_EQ(a.v_row(0), 3u);
  EXPECT_EQ(a.h_row(-4), 0u);
  EXPECT_THROW(a.v_row(4), ValidationError);
}

TEST(GmaParams, ContainerRoundTripIsBitExact) {
  Rng rng(21);
  GmaConfig cfg = small_config(Variant::ContentOnly, 3);
  cfg.d_c = 5;
  cfg.d_m = 2;
  auto p = GmaParams::zeros(3, 5, 2, 3, 4);
  for (Matrix* m : {&p.w_qry, &p.w_key, &p.w_val, &p.pos_v, &p.pos_h}) rng.fill(m->data, -10, 10);
  p.alpha = -0.123456789012345;
  std::stringstream ss;
  write_params(ss, p);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "GMA1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 3u);  // D_in, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 5u);  // D_c
  EXPECT_EQ(bytes.size(), 4 + 5 * 4 + 8 * (15 + 15 + 4 + 1 + 15 + 21));
  std::stringstream in(bytes);
  EXPECT_EQ(read_params(in), p);
}

TEST(GmaParams, ContainerRejectsBadInput) {
  std::stringstream bad_magic("GMA2xxxxxxxxxxxxxxxxxxxx");
  EXPECT_THROW(read_params(bad_magic), ValidationError);
  auto p = GmaParams::zeros(1, 1, 1, 1, 1);
  std::stringstream ss;
  write_params(ss, p);
  const std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_params(truncated), IoError);
}
