#pragma once

// Central-difference gradient oracle and the GMA backward-pass check built on it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gma/core.hpp"
#include "gma/gma.hpp"

namespace gma {

using ScalarFn = std::function<double(std::span<const double>)>;

// (f(p + h e_k) - f(p - h e_k)) / 2h for every coordinate k.
inline std::vector<double> finite_diff(const ScalarFn& f, std::vector<double> p, double h) {
  detail::require(h > 0.0 && std::isfinite(h), "finite_diff: step must be positive");
  std::vector<double> grad(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double orig = p[k];
    p[k] = orig + h;
    const double fp = f(p);
    p[k] = orig - h;
    const double fm = f(p);
    p[k] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) detail::fail("finite_diff: non-finite evaluation at coordinate ", k);
    grad[k] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

struct GradEntry {
  std::string name;
  std::size_t size = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t argmax = 0;  // coordinate of max_rel_err
  double max_abs_analytic = 0.0;
};

struct GradReport {
  std::vector<GradEntry> entries;
  double threshold = 1e-4;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
  bool pass() const { return max_rel_err() < threshold; }

  const GradEntry& operator[](const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return e;
    }
    detail::fail("GradReport: no entry '", name, "'");
  }
};

// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
inline GradEntry compare_gradients(std::string name, std::span<const double> analytic, std::span<const double> numeric) {
  detail::require(analytic.size() == numeric.size(), "compare_gradients: size mismatch for ", name);
  GradEntry e{std::move(name), analytic.size()};
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const double diff = std::abs(analytic[k] - numeric[k]);
    const double rel = diff / std::max({std::abs(analytic[k]), std::abs(numeric[k]), 1e-8});
    e.max_abs_err = std::max(e.max_abs_err, diff);
    e.max_abs_analytic = std::max(e.max_abs_analytic, std::abs(analytic[k]));
    if (rel > e.max_rel_err) {
      e.max_rel_err = rel;
      e.argmax = k;
    }
  }
  return e;
}

struct GradCheckOptions {
  std::size_t height = 3, width = 3, channels = 4;
  Variant variant = Variant::ContentOnly;
  AlphaMode alpha_mode = AlphaMode::Learned;
  CombineMode combine = CombineMode::Concatenate;
  Residual residual = Residual::With;
  std::uint64_t seed = 0;
  double threshold = 1e-4;
  double step = 1e-5;
  // nullopt: alpha drawn from U(0.5, 1.5) so every path carries gradient.
  std::optional<double> alpha;
};

struct GmaInstance {
  FeatureMap x, y;
  GmaParams params;
  GmaConfig config;
  Matrix upstream;
};

inline GmaInstance random_gma_instance(const GradCheckOptions& o) {
  detail::require(o.height * o.width <= 16 && o.channels <= 8, "check_gma: desk-scale sizes only (N <= 16, D <= 8)");
  detail::require(o.height >= 1 && o.width >= 1 && o.channels >= 1, "check_gma: sizes must be >= 1");
  Rng rng(o.seed);
  GmaInstance inst;
  inst.config.variant = o.variant;
  inst.config.alpha_mode = o.alpha_mode;
  inst.config.combine = o.combine;
  inst.config.residual = o.residual;
  inst.config.d_in = inst.config.d_c = inst.config.d_m = o.channels;
  inst.params = GmaParams::zeros(o.channels, o.channels, o.channels, o.height, o.width);
  rng.fill(inst.params.w_qry.data, -1.0, 1.0);
  rng.fill(inst.params.w_key.data, -1.0, 1.0);
  rng.fill(inst.params.w_val.data, -1.0, 1.0);
  rng.fill(inst.params.pos_v.data, -0.5, 0.5);
  rng.fill(inst.params.pos_h.data, -0.5, 0.5);
  inst.params.alpha = o.alpha ? *o.alpha : rng.uniform(0.5, 1.5);
  inst.x = FeatureMap(o.height, o.width, o.channels);
  inst.y = FeatureMap(o.height, o.width, o.channels);
  rng.fill(inst.x.data, -1.0, 1.0);
  rng.fill(inst.y.data, -1.0, 1.0);
  inst.upstream = Matrix(o.height * o.width, o.channels);
  rng.fill(inst.upstream.data, -1.0, 1.0);
  return inst;
}

// L = sum(upstream * y_hat)
inline double gma_loss(const GmaInstance& inst) {
  const auto out = gma_forward(inst.x, inst.y, inst.params, inst.config);
  double l = 0.0;
  for (std::size_t t = 0; t < out.y_hat.data.size(); ++t) l += inst.upstream.data[t] * out.y_hat.data[t];
  return l;
}

inline GradReport check_gma(const GradCheckOptions& o) {
  const GmaInstance base = random_gma_instance(o);
  const GmaGrads g = gma_backward(base.x, base.y, base.params, base.config, base.upstream);

  GradReport rep;
  rep.threshold = o.threshold;
  // Perturbs one parameter group through `slot`, leaving the rest at base.
  auto check = [&](const std::string& name, std::span<const double> analytic,
                   const std::function<std::span<double>(GmaInstance&)>& slot) {
    GmaInstance work = base;
    auto target = slot(work);
    const std::vector<double> p0(target.begin(), target.end());
    const ScalarFn f = [&](std::span<const double> p) {
      std::copy(p.begin(), p.end(), target.begin());
      return gma_loss(work);
    };
    const auto numeric = finite_diff(f, p0, o.step);
    rep.entries.push_back(compare_gradients(name, analytic, numeric));
  };

  check("W_qry", g.d_w_qry.data, [](GmaInstance& i) { return std::span<double>(i.params.w_qry.data); });
  check("W_key", g.d_w_key.data, [](GmaInstance& i) { return std::span<double>(i.params.w_key.data); });
  check("W_val", g.d_w_val.data, [](GmaInstance& i) { return std::span<double>(i.params.w_val.data); });
  check("alpha", std::span<const double>(&g.d_alpha, 1), [](GmaInstance& i) { return std::span<double>(&i.params.alpha, 1); });
  check("pos_v", g.d_pos_v.data, [](GmaInstance& i) { return std::span<double>(i.params.pos_v.data); });
  check("pos_h", g.d_pos_h.data, [](GmaInstance& i) { return std::span<double>(i.params.pos_h.data); });
  check("x", g.dx.data, [](GmaInstance& i) { return std::span<double>(i.x.data); });
  check("y", g.dy.data, [](GmaInstance& i) { return std::span<double>(i.y.data); });
  return rep;
}

inline std::string to_text_table(const GradReport& rep) {
  std::string out = "param      size   max_abs_err    max_rel_err  argmax\n";
  char buf[160];
  for (const auto& e : rep.entries) {
    std::snprintf(buf, sizeof buf, "%-8s %6zu  %12.3e  %13.3e  %6zu\n", e.name.c_str(), e.size, e.max_abs_err,
                  e.max_rel_err, e.argmax);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "max relative error %.3e vs threshold %.3e: %s\n", rep.max_rel_err(), rep.threshold,
                rep.pass() ? "PASS" : "FAIL");
  out += buf;
  return out;
}

inline nlohmann::json to_json(const GradReport& rep) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : rep.entries) {
    params.push_back({{"name", e.name},
                      {"size", e.size},
                      {"max_abs_err", e.max_abs_err},
                      {"max_rel_err", e.max_rel_err},
                      {"argmax", e.argmax},
                      {"max_abs_analytic", e.max_abs_analytic}});
  }
  return {{"params", params}, {"threshold", rep.threshold}, {"max_rel_err", rep.max_rel_err()}, {"pass", rep.pass()}};
}

}  // namespace gma
