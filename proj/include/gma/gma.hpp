#pragma once

// Motion aggregation: attention over reference-frame appearance
// features, used to aggregate motion features across the whole image.
//
//   Q_i = W_qry x_i      K_i = W_key x_i      V_i = W_val y_i
//   a_ij = softmax_j( <Q_i, B_ij> / sqrt(D_in) )
//   y_hat_i = y_i + alpha * sum_j a_ij V_j
//
// where B_ij is K_j (content), K_j + p(j-i) (content + position) or p(j-i)
// (position only), and p(j-i) = pos_v[row offset] + pos_h[col offset].

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <string_view>

#include "gma/binary.hpp"
#include "gma/core.hpp"

namespace gma {

enum class Variant { ContentOnly, ContentPlusPosition, PositionOnly };
enum class AlphaMode { Learned, FixedOne };
enum class CombineMode { Concatenate, Replace };
enum class Residual { With, Without };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::ContentOnly: return "content";
    case Variant::ContentPlusPosition: return "content+pos";
    case Variant::PositionOnly: return "pos";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "content") return Variant::ContentOnly;
  if (s == "content+pos") return Variant::ContentPlusPosition;
  if (s == "pos") return Variant::PositionOnly;
  detail::fail("unknown attention variant '", s, "' (expected content, content+pos or pos)");
}

inline bool uses_content(Variant v) { return v != Variant::PositionOnly; }
inline bool uses_position(Variant v) { return v != Variant::ContentOnly; }

struct GmaConfig {
  Variant variant = Variant::ContentOnly;
  AlphaMode alpha_mode = AlphaMode::Learned;
  CombineMode combine = CombineMode::Concatenate;
  Residual residual = Residual::With;
  std::size_t d_in = 128;
  std::size_t d_c = 128;
  std::size_t d_m = 128;

  void validate() const {
    detail::require(d_in >= 1 && d_c >= 1 && d_m >= 1, "GmaConfig: channel counts must be >= 1");
  }

  // Channels of the combined output: [y | y_hat | x] or [y_hat | x].
  std::size_t combined_channels() const {
    return combine == CombineMode::Concatenate ? 2 * d_m + d_c : d_m + d_c;
  }
};

struct GmaParams {
  std::size_t d_in = 0, d_c = 0, d_m = 0;
  std::size_t h_max = 0, w_max = 0;
  Matrix w_qry;  // d_in x d_c
  Matrix w_key;  // d_in x d_c
  Matrix w_val;  // d_m x d_m
  double alpha = 0.0;
  Matrix pos_v;  // (2*h_max - 1) x d_in, row h_max-1 is offset 0
  Matrix pos_h;  // (2*w_max - 1) x d_in, row w_max-1 is offset 0

  static GmaParams zeros(std::size_t d_in, std::size_t d_c, std::size_t d_m, std::size_t h_max,
                         std::size_t w_max) {
    detail::require(d_in >= 1 && d_c >= 1 && d_m >= 1, "GmaParams: channel counts must be >= 1");
    detail::require(h_max >= 1 && w_max >= 1, "GmaParams: h_max and w_max must be >= 1");
    GmaParams p;
    p.d_in = d_in;
    p.d_c = d_c;
    p.d_m = d_m;
    p.h_max = h_max;
    p.w_max = w_max;
    p.w_qry = Matrix(d_in, d_c);
    p.w_key = Matrix(d_in, d_c);
    p.w_val = Matrix(d_m, d_m);
    p.pos_v = Matrix(2 * h_max - 1, d_in);
    p.pos_h = Matrix(2 * w_max - 1, d_in);
    return p;
  }

  // Projections ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); alpha = 0; positional tables zero.
  static GmaParams init(const GmaConfig& cfg, std::size_t h_max, std::size_t w_max,
                        std::uint64_t seed) {
    cfg.validate();
    auto p = zeros(cfg.d_in, cfg.d_c, cfg.d_m, h_max, w_max);
    Rng rng(seed);
    const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.d_c));
    const double sm = 1.0 / std::sqrt(static_cast<double>(cfg.d_m));
    rng.fill(p.w_qry.data, -sc, sc);
    rng.fill(p.w_key.data, -sc, sc);
    rng.fill(p.w_val.data, -sm, sm);
    return p;
  }

  static GmaParams init(const GmaConfig& cfg, std::size_t h_max, std::size_t w_max) {
    return init(cfg, h_max, w_max, 0);
  }

  void validate() const {
    detail::require(w_qry.rows == d_in && w_qry.cols == d_c, "GmaParams: W_qry must be ", d_in, "x", d_c);
    detail::require(w_key.rows == d_in && w_key.cols == d_c, "GmaParams: W_key must be ", d_in, "x", d_c);
    detail::require(w_val.rows == d_m && w_val.cols == d_m, "GmaParams: W_val must be ", d_m, "x", d_m);
    detail::require(pos_v.rows == 2 * h_max - 1 && pos_v.cols == d_in, "GmaParams: bad pos_v shape");
    detail::require(pos_h.rows == 2 * w_max - 1 && pos_h.cols == d_in, "GmaParams: bad pos_h shape");
    detail::require(std::isfinite(alpha), "GmaParams: alpha must be finite");
  }

  // Table row of a signed vertical / horizontal offset.
  std::size_t v_row(std::ptrdiff_t offset) const {
    const auto r = offset + static_cast<std::ptrdiff_t>(h_max) - 1;
    detail::require(r >= 0 && r < static_cast<std::ptrdiff_t>(pos_v.rows), "vertical offset ", offset,
                    " outside positional table (h_max = ", h_max, ")");
    return static_cast<std::size_t>(r);
  }
  std::size_t h_row(std::ptrdiff_t offset) const {
    const auto r = offset + static_cast<std::ptrdiff_t>(w_max) - 1;
    detail::require(r >= 0 && r < static_cast<std::ptrdiff_t>(pos_h.rows), "horizontal offset ", offset,
                    " outside positional table (w_max = ", w_max, ")");
    return static_cast<std::size_t>(r);
  }

  bool operator==(const GmaParams&) const = default;
};

inline void check_config(const GmaParams& p, const GmaConfig& cfg) {
  cfg.validate();
  p.validate();
  detail::require(p.d_in == cfg.d_in && p.d_c == cfg.d_c && p.d_m == cfg.d_m,
                  "GMA config channels (", cfg.d_in, ",", cfg.d_c, ",", cfg.d_m,
                  ") do not match params (", p.d_in, ",", p.d_c, ",", p.d_m, ")");
}

inline double effective_alpha(const GmaParams& p, const GmaConfig& cfg) {
  return cfg.alpha_mode == AlphaMode::Learned ? p.alpha : 1.0;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

struct Projections {
  Matrix q;  // N x d_in
  Matrix k;  // N x d_in
  Matrix v;  // N x d_m
};

inline Projections project_qkv(const FeatureMap& x, const FeatureMap& y, const GmaParams& p) {
  detail::require(x.same_grid(y), "project_qkv: context is ", x.height, "x", x.width,
                  " but motion is ", y.height, "x", y.width);
  detail::require(x.channels == p.d_c, "project_qkv: context has ", x.channels, " channels, expected ", p.d_c);
  detail::require(y.channels == p.d_m, "project_qkv: motion has ", y.channels, " channels, expected ", p.d_m);
  const Matrix xf = flatten_hw(x);
  const Matrix yf = flatten_hw(y);
  return {matmul_nt(xf, p.w_qry), matmul_nt(xf, p.w_key), matmul_nt(yf, p.w_val)};
}

// Logits <Q_i, B_ij> / sqrt(d_in) for the selected variant. Positional terms
// are precomputed per query as <Q_i, pos_v[r]> and <Q_i, pos_h[c]>.
inline Matrix attention_logits(const Matrix& q, const Matrix& k, const GmaParams& tables,
                               Variant variant, std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  detail::require(q.rows == n && k.rows == n, "attention_logits: expected ", n, " rows");
  detail::require(q.cols == k.cols, "attention_logits: Q and K widths differ");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));

  Matrix logits = uses_content(variant) ? matmul_nt(q, k) : Matrix(n, n);
  if (uses_position(variant)) {
    detail::require(tables.pos_v.cols == q.cols, "attention_logits: positional width mismatch");
    detail::require(height <= tables.h_max && width <= tables.w_max, "attention_logits: ", height, "x",
                    width, " grid exceeds positional tables sized for ", tables.h_max, "x", tables.w_max);
    const Matrix qv = matmul_nt(q, tables.pos_v);
    const Matrix qh = matmul_nt(q, tables.pos_h);
    const auto hm = static_cast<std::ptrdiff_t>(tables.h_max) - 1;
    const auto wm = static_cast<std::ptrdiff_t>(tables.w_max) - 1;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ri = static_cast<std::ptrdiff_t>(i / width);
      const auto ci = static_cast<std::ptrdiff_t>(i % width);
      auto out = logits.row(i);
      for (std::size_t j = 0; j < n; ++j) {
        const auto rj = static_cast<std::ptrdiff_t>(j / width);
        const auto cj = static_cast<std::ptrdiff_t>(j % width);
        out[j] += qv(i, static_cast<std::size_t>(rj - ri + hm)) + qh(i, static_cast<std::size_t>(cj - ci + wm));
      }
    }
  }
  for (double& l : logits.data) l *= scale;
  return logits;
}

// y_hat = y + alpha * (A V), or alpha * (A V) without the residual path.
inline Matrix aggregate(const Matrix& y, const AttentionMatrix& a, const Matrix& v, double alpha,
                        Residual residual) {
  detail::require(a.size() == v.rows && y.rows == v.rows, "aggregate: N mismatch (y ", y.rows, ", A ",
                  a.size(), ", V ", v.rows, ")");
  detail::require(y.cols == v.cols, "aggregate: motion width ", y.cols, " vs value width ", v.cols);
  if (residual == Residual::With && alpha == 0.0) return y;
  const Matrix av = matmul(a.matrix(), v);
  Matrix out = residual == Residual::With ? y : Matrix(y.rows, y.cols);
  for (std::size_t t = 0; t < out.data.size(); ++t) out.data[t] += alpha * av.data[t];
  return out;
}

// Channel-wise concatenation of maps on the same grid.
inline FeatureMap concat_channels(std::initializer_list<const FeatureMap*> parts) {
  const FeatureMap& first = **parts.begin();
  std::size_t d = 0;
  for (const auto* p : parts) {
    detail::require(p->same_grid(first), "concat_channels: grid mismatch");
    d += p->channels;
  }
  FeatureMap out(first.height, first.width, d);
  for (std::size_t px = 0; px < first.pixels(); ++px) {
    std::size_t off = 0;
    for (const auto* p : parts) {
      for (std::size_t k = 0; k < p->channels; ++k) out.data[px * d + off + k] = p->data[px * p->channels + k];
      off += p->channels;
    }
  }
  return out;
}

struct GmaOutput {
  Matrix y_hat;
  AttentionMatrix attention;
  FeatureMap combined;
};

inline GmaOutput gma_forward(const FeatureMap& x, const FeatureMap& y, const GmaParams& p,
                             const GmaConfig& cfg) {
  check_config(p, cfg);
  const auto proj = project_qkv(x, y, p);
  auto attention = softmax_rows(attention_logits(proj.q, proj.k, p, cfg.variant, x.height, x.width));
  Matrix y_hat = aggregate(flatten_hw(y), attention, proj.v, effective_alpha(p, cfg), cfg.residual);
  const FeatureMap agg = unflatten_hw(y_hat, y.height, y.width);
  FeatureMap combined = cfg.combine == CombineMode::Concatenate ? concat_channels({&y, &agg, &x})
                                                                : concat_channels({&agg, &x});
  return {std::move(y_hat), std::move(attention), std::move(combined)};
}

// Row-block path with streaming softmax: never materializes the N x N
// attention. Logits for a block of columns are computed on the fly and folded
// into a running (max, normalizer, accumulator) per query row.
inline Matrix gma_forward_tiled(const FeatureMap& x, const FeatureMap& y, const GmaParams& p,
                                const GmaConfig& cfg, std::size_t block = 64) {
  check_config(p, cfg);
  detail::require(block >= 1, "gma_forward_tiled: block must be >= 1");
  const auto proj = project_qkv(x, y, p);
  const std::size_t n = x.pixels(), w = x.width, d_in = p.d_in, d_m = p.d_m;
  if (uses_position(cfg.variant)) {
    detail::require(x.height <= p.h_max && x.width <= p.w_max, "gma_forward_tiled: grid exceeds positional tables");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
  const double alpha = effective_alpha(p, cfg);
  Matrix y_hat = cfg.residual == Residual::With ? flatten_hw(y) : Matrix(n, d_m);
  if (cfg.residual == Residual::With && alpha == 0.0) return y_hat;

  std::vector<double> acc(d_m), logit(block);
  for (std::size_t i = 0; i < n; ++i) {
    auto qi = proj.q.row(i);
    const auto ri = static_cast<std::ptrdiff_t>(i / w), ci = static_cast<std::ptrdiff_t>(i % w);
    double running_max = -std::numeric_limits<double>::infinity();
    double norm = 0.0;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j0 = 0; j0 < n; j0 += block) {
      const std::size_t j1 = std::min(n, j0 + block);
      double block_max = -std::numeric_limits<double>::infinity();
      for (std::size_t j = j0; j < j1; ++j) {
        double s = 0.0;
        if (uses_content(cfg.variant)) {
          auto kj = proj.k.row(j);
          for (std::size_t t = 0; t < d_in; ++t) s += qi[t] * kj[t];
        }
        if (uses_position(cfg.variant)) {
          auto pv = p.pos_v.row(p.v_row(static_cast<std::ptrdiff_t>(j / w) - ri));
          auto ph = p.pos_h.row(p.h_row(static_cast<std::ptrdiff_t>(j % w) - ci));
          for (std::size_t t = 0; t < d_in; ++t) s += qi[t] * (pv[t] + ph[t]);
        }
        logit[j - j0] = s * scale;
        block_max = std::max(block_max, logit[j - j0]);
      }
      const double new_max = std::max(running_max, block_max);
      const double rescale = std::exp(running_max - new_max);
      norm *= rescale;
      for (double& a : acc) a *= rescale;
      for (std::size_t j = j0; j < j1; ++j) {
        const double e = std::exp(logit[j - j0] - new_max);
        norm += e;
        auto vj = proj.v.row(j);
        for (std::size_t t = 0; t < d_m; ++t) acc[t] += e * vj[t];
      }
      running_max = new_max;
    }
    auto out = y_hat.row(i);
    for (std::size_t t = 0; t < d_m; ++t) out[t] += alpha * (acc[t] / norm);
  }
  return y_hat;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

struct GmaGrads {
  Matrix d_w_qry, d_w_key, d_w_val;
  double d_alpha = 0.0;
  Matrix d_pos_v, d_pos_h;
  Matrix dx;  // N x d_c
  Matrix dy;  // N x d_m
};

// Gradients of L = sum(upstream * y_hat) with respect to every parameter and
// both inputs. d_alpha is zero when alpha is fixed.
inline GmaGrads gma_backward(const FeatureMap& x, const FeatureMap& y, const GmaParams& p,
                             const GmaConfig& cfg, const Matrix& upstream) {
  check_config(p, cfg);
  const std::size_t n = x.pixels(), w = x.width;
  detail::require(upstream.rows == n && upstream.cols == p.d_m, "gma_backward: upstream gradient must be ",
                  n, "x", p.d_m, ", got ", upstream.rows, "x", upstream.cols);
  const auto proj = project_qkv(x, y, p);
  const auto attention = softmax_rows(attention_logits(proj.q, proj.k, p, cfg.variant, x.height, w));
  const Matrix& a = attention.matrix();
  const double alpha = effective_alpha(p, cfg);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.d_in));
  const Matrix xf = flatten_hw(x), yf = flatten_hw(y);

  GmaGrads g;
  g.d_pos_v = Matrix(p.pos_v.rows, p.pos_v.cols);
  g.d_pos_h = Matrix(p.pos_h.rows, p.pos_h.cols);

  // S = A V; y_hat = [y] + alpha S.
  const Matrix s = matmul(a, proj.v);
  if (cfg.alpha_mode == AlphaMode::Learned) {
    for (std::size_t t = 0; t < s.data.size(); ++t) g.d_alpha += upstream.data[t] * s.data[t];
  }
  Matrix d_s = upstream;
  for (double& e : d_s.data) e *= alpha;

  // Through the aggregation.
  const Matrix d_a = matmul_nt(d_s, proj.v);   // N x N
  const Matrix d_v = matmul_tn(a, d_s);        // N x d_m
  g.d_w_val = matmul_tn(d_v, yf);              // d_m x d_m
  g.dy = matmul(d_v, p.w_val);
  if (cfg.residual == Residual::With) {
    for (std::size_t t = 0; t < g.dy.data.size(); ++t) g.dy.data[t] += upstream.data[t];
  }

  // Softmax Jacobian per row, folded with the 1/sqrt(d_in) scaling.
  Matrix d_logit(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    auto ai = a.row(i);
    auto gi = d_a.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += ai[j] * gi[j];
    auto out = d_logit.row(i);
    for (std::size_t j = 0; j < n; ++j) out[j] = ai[j] * (gi[j] - dot) * scale;
  }

  Matrix d_q(n, p.d_in), d_k(n, p.d_in);
  if (uses_content(cfg.variant)) {
    d_q = matmul(d_logit, proj.k);
    d_k = matmul_tn(d_logit, proj.q);
  }
  if (uses_position(cfg.variant)) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto ri = static_cast<std::ptrdiff_t>(i / w), ci = static_cast<std::ptrdiff_t>(i % w);
      auto qi = proj.q.row(i);
      auto dqi = d_q.row(i);
      for (std::size_t j = 0; j < n; ++j) {
        const double gij = d_logit(i, j);
        if (gij == 0.0) continue;
        const auto vr = p.v_row(static_cast<std::ptrdiff_t>(j / w) - ri);
        const auto hr = p.h_row(static_cast<std::ptrdiff_t>(j % w) - ci);
        auto pv = p.pos_v.row(vr);
        auto ph = p.pos_h.row(hr);
        auto dpv = g.d_pos_v.row(vr);
        auto dph = g.d_pos_h.row(hr);
        for (std::size_t t = 0; t < p.d_in; ++t) {
          dqi[t] += gij * (pv[t] + ph[t]);
          dpv[t] += gij * qi[t];
          dph[t] += gij * qi[t];
        }
      }
    }
  }

  g.d_w_qry = matmul_tn(d_q, xf);
  g.d_w_key = matmul_tn(d_k, xf);
  g.dx = matmul(d_q, p.w_qry);
  const Matrix dx_k = matmul(d_k, p.w_key);
  for (std::size_t t = 0; t < g.dx.data.size(); ++t) g.dx.data[t] += dx_k.data[t];
  return g;
}

// ---------------------------------------------------------------------------
// Binary container "GMA1"
// ---------------------------------------------------------------------------

inline void write_params(std::ostream& os, const GmaParams& p) {
  p.validate();
  BinaryWriter out(os);
  out.magic("GMA1");
  for (auto dim : {p.d_in, p.d_c, p.d_m, p.h_max, p.w_max}) out.u32(static_cast<std::uint32_t>(dim));
  out.f64s(p.w_qry.data);
  out.f64s(p.w_key.data);
  out.f64s(p.w_val.data);
  out.f64(p.alpha);
  out.f64s(p.pos_v.data);
  out.f64s(p.pos_h.data);
}

inline GmaParams read_params(std::istream& is) {
  BinaryReader in(is);
  in.expect_magic("GMA1");
  std::size_t dims[5];
  for (auto& d : dims) {
    d = in.u32();
    detail::require(d >= 1 && d <= (1u << 16), "GMA1: implausible dimension ", d);
  }
  auto p = GmaParams::zeros(dims[0], dims[1], dims[2], dims[3], dims[4]);
  in.f64s(p.w_qry.data);
  in.f64s(p.w_key.data);
  in.f64s(p.w_val.data);
  p.alpha = in.f64();
  in.f64s(p.pos_v.data);
  in.f64s(p.pos_h.data);
  p.validate();
  return p;
}

}  // namespace gma
