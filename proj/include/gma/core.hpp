#pragma once

// Dense grid types and the numeric primitives shared by every other header.
// Memory order is row-major (row, col, channel) everywhere.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gma {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Bad shapes, bad arguments, malformed inputs.
class ValidationError : public Error {
public:
  using Error::Error;
};

// Unreadable/unwritable files, truncated streams.
class IoError : public Error {
public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw ValidationError(concat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix: a plain rows x cols row-major block of doubles
// ---------------------------------------------------------------------------

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    detail::require(data.size() == rows * cols, "Matrix: expected ", rows * cols, " values, got ",
                    data.size());
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  bool operator==(const Matrix&) const = default;
};

// ---------------------------------------------------------------------------
// FeatureMap: H x W x D
// ---------------------------------------------------------------------------

struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(std::size_t h, std::size_t w, std::size_t d, double fill = 0.0)
      : height(h), width(w), channels(d), data(h * w * d, fill) {}
  FeatureMap(std::size_t h, std::size_t w, std::size_t d, std::vector<double> values)
      : height(h), width(w), channels(d), data(std::move(values)) {
    detail::require(data.size() == h * w * d, "FeatureMap: expected ", h * w * d, " values, got ",
                    data.size());
  }

  std::size_t pixels() const { return height * width; }

  double& at(std::size_t r, std::size_t c, std::size_t k) {
    return data[(r * width + c) * channels + k];
  }
  double at(std::size_t r, std::size_t c, std::size_t k) const {
    return data[(r * width + c) * channels + k];
  }

  std::span<double> pixel(std::size_t r, std::size_t c) {
    return {data.data() + (r * width + c) * channels, channels};
  }
  std::span<const double> pixel(std::size_t r, std::size_t c) const {
    return {data.data() + (r * width + c) * channels, channels};
  }

  bool same_grid(const FeatureMap& o) const { return height == o.height && width == o.width; }

  bool operator==(const FeatureMap&) const = default;
};

// ---------------------------------------------------------------------------
// FlowField: H x W displacements (u = horizontal, v = vertical) + validity
// ---------------------------------------------------------------------------

struct FlowField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> u;
  std::vector<double> v;
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(std::size_t h, std::size_t w)
      : height(h), width(w), u(h * w, 0.0), v(h * w, 0.0), valid(h * w, 1) {}

  std::size_t pixels() const { return height * width; }
  std::size_t index(std::size_t r, std::size_t c) const { return r * width + c; }

  bool same_shape(const FlowField& o) const { return height == o.height && width == o.width; }

  bool operator==(const FlowField&) const = default;
};

// ---------------------------------------------------------------------------
// ImageGrid: H x W x {1,3}, values in [0,1]
// ---------------------------------------------------------------------------

struct ImageGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> data;

  ImageGrid() = default;
  ImageGrid(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {
    detail::require(c == 1 || c == 3, "ImageGrid: channels must be 1 or 3, got ", c);
  }

  double& at(std::size_t r, std::size_t c, std::size_t k) {
    return data[(r * width + c) * channels + k];
  }
  double at(std::size_t r, std::size_t c, std::size_t k) const {
    return data[(r * width + c) * channels + k];
  }

  bool operator==(const ImageGrid&) const = default;
};

// Image as a feature map (same memory order), for the encoders.
inline FeatureMap to_feature_map(const ImageGrid& img) {
  return FeatureMap(img.height, img.width, img.channels, img.data);
}

// ---------------------------------------------------------------------------
// AttentionMatrix: N x N, row-stochastic
// ---------------------------------------------------------------------------

class AttentionMatrix {
public:
  AttentionMatrix() = default;

  // Takes ownership of an already normalized matrix; checks the invariant.
  static AttentionMatrix from_weights(Matrix weights, double tol = 1e-6) {
    detail::require(weights.rows == weights.cols, "AttentionMatrix: not square (", weights.rows,
                    "x", weights.cols, ")");
    for (std::size_t i = 0; i < weights.rows; ++i) {
      double sum = 0.0;
      for (double w : weights.row(i)) {
        detail::require(w >= 0.0 && std::isfinite(w), "AttentionMatrix: bad weight in row ", i);
        sum += w;
      }
      detail::require(std::abs(sum - 1.0) <= tol, "AttentionMatrix: row ", i, " sums to ", sum);
    }
    AttentionMatrix a;
    a.weights_ = std::move(weights);
    return a;
  }

  std::size_t size() const { return weights_.rows; }
  double operator()(std::size_t i, std::size_t j) const { return weights_(i, j); }
  std::span<const double> row(std::size_t i) const { return weights_.row(i); }
  const Matrix& matrix() const { return weights_; }

private:
  friend AttentionMatrix softmax_rows(const Matrix& logits);
  Matrix weights_;
};

// Row-wise softmax with per-row max subtraction.
inline AttentionMatrix softmax_rows(const Matrix& logits) {
  detail::require(logits.rows == logits.cols, "softmax_rows: logits must be square, got ",
                  logits.rows, "x", logits.cols);
  Matrix out(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto in = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < in.size(); ++j) {
      if (!std::isfinite(in[j])) detail::fail("softmax_rows: non-finite logit in row ", i, " (column ", j, ")");
      mx = std::max(mx, in[j]);
    }
    auto o = out.row(i);
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& w : o) w /= sum;
  }
  AttentionMatrix a;
  a.weights_ = std::move(out);
  return a;
}

// ---------------------------------------------------------------------------
// N = H*W indexing
// ---------------------------------------------------------------------------

inline std::size_t flat_index(std::size_t row, std::size_t col, std::size_t width) {
  return row * width + col;
}

inline Matrix flatten_hw(const FeatureMap& fm) {
  return Matrix(fm.pixels(), fm.channels, fm.data);
}

inline FeatureMap unflatten_hw(const Matrix& m, std::size_t height, std::size_t width) {
  detail::require(m.rows == height * width, "unflatten_hw: ", m.rows, " rows cannot form a ",
                  height, "x", width, " grid");
  return FeatureMap(height, width, m.cols, m.data);
}

// ---------------------------------------------------------------------------
// Small dense products
// ---------------------------------------------------------------------------

// out = a * b^T   (a: n x k, b: m x k)
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  detail::require(a.cols == b.cols, "matmul_nt: inner dimensions ", a.cols, " vs ", b.cols);
  Matrix out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
      out(i, j) = s;
    }
  }
  return out;
}

// out = a * b   (a: n x k, b: k x m)
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require(a.cols == b.rows, "matmul: inner dimensions ", a.cols, " vs ", b.rows);
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * bk[j];
    }
  }
  return out;
}

// out = a^T * b   (a: k x n, b: k x m)
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  detail::require(a.rows == b.rows, "matmul_tn: inner dimensions ", a.rows, " vs ", b.rows);
  Matrix out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    auto ak = a.row(k);
    auto bk = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      auto o = out.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aki * bk[j];
    }
  }
  return out;
}

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

// mt19937_64 is bit-specified by the standard; the [0,1) mapping is done
// here so streams are identical across standard library implementations.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  std::uint64_t next() { return engine_(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform01() * static_cast<double>(n)); }

  void fill(std::span<double> out, double lo, double hi) {
    for (double& x : out) x = uniform(lo, hi);
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace gma
