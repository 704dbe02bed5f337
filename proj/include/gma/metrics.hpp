#pragma once

// Evaluation arithmetic: end-point error, AEPE over regions, Fl-all outlier
// rates, the occlusion partition (Noc / Occ-in / Occ-out) and relative
// improvement between two reports.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "gma/core.hpp"

namespace gma {

struct BoolGrid {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> data;

  BoolGrid() = default;
  BoolGrid(std::size_t h, std::size_t w, bool fill = false) : height(h), width(w), data(h * w, fill ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return data[r * width + c] != 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : data) n += b != 0;
    return n;
  }
  bool operator==(const BoolGrid&) const = default;
};

enum class Region : std::uint8_t { Noc = 0, OccIn = 1, OccOut = 2, Invalid = 255 };

struct OcclusionPartition {
  std::size_t height = 0, width = 0;
  std::vector<Region> labels;

  std::size_t count(Region r) const {
    std::size_t n = 0;
    for (auto l : labels) n += l == r;
    return n;
  }
  BoolGrid mask(Region r) const {
    BoolGrid m(height, width);
    for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels[i] == r;
    return m;
  }
  BoolGrid occluded() const {
    BoolGrid m(height, width);
    for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels[i] == Region::OccIn || labels[i] == Region::OccOut;
    return m;
  }
  bool operator==(const OcclusionPartition&) const = default;
};

// Pixel centre (c + 0.5, r + 0.5) displaced by (u, v) lands inside iff
// 0 <= x < W and 0 <= y < H.
inline bool lands_inside(std::size_t r, std::size_t c, double u, double v, std::size_t h, std::size_t w) {
  const double x = static_cast<double>(c) + 0.5 + u;
  const double y = static_cast<double>(r) + 0.5 + v;
  return x >= 0.0 && x < static_cast<double>(w) && y >= 0.0 && y < static_cast<double>(h);
}

inline OcclusionPartition partition_occlusion(const BoolGrid& occ, const FlowField& gt) {
  detail::require(occ.height == gt.height && occ.width == gt.width, "partition_occlusion: occlusion map ",
                  occ.height, "x", occ.width, " vs flow ", gt.height, "x", gt.width);
  OcclusionPartition p{gt.height, gt.width, std::vector<Region>(gt.pixels(), Region::Invalid)};
  for (std::size_t r = 0; r < gt.height; ++r) {
    for (std::size_t c = 0; c < gt.width; ++c) {
      const std::size_t i = gt.index(r, c);
      if (!gt.valid[i]) continue;
      if (!occ(r, c)) {
        p.labels[i] = Region::Noc;
      } else {
        p.labels[i] = lands_inside(r, c, gt.u[i], gt.v[i], gt.height, gt.width) ? Region::OccIn : Region::OccOut;
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

inline Matrix epe_map(const FlowField& pred, const FlowField& gt) {
  detail::require(pred.same_shape(gt), "epe_map: prediction ", pred.height, "x", pred.width, " vs ground truth ",
                  gt.height, "x", gt.width);
  Matrix e(gt.height, gt.width);
  for (std::size_t i = 0; i < gt.pixels(); ++i) e.data[i] = std::hypot(pred.u[i] - gt.u[i], pred.v[i] - gt.v[i]);
  return e;
}

namespace detail {

inline void check_mask(const BoolGrid& mask, const FlowField& gt) {
  require(mask.height == gt.height && mask.width == gt.width, "mask ", mask.height, "x", mask.width,
          " does not match flow ", gt.height, "x", gt.width);
}

}  // namespace detail

// nullopt means the region has no pixels.
using RegionValue = std::optional<double>;

// Mean EPE over pixels selected by the mask that also have valid ground truth.
inline RegionValue aepe(const FlowField& pred, const FlowField& gt, const BoolGrid& mask) {
  detail::check_mask(mask, gt);
  const Matrix e = epe_map(pred, gt);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.pixels(); ++i) {
    if (mask.data[i] && gt.valid[i]) {
      sum += e.data[i];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

enum class OutlierRule {
  Either,  // EPE > 3 px OR EPE > 5% of |gt|
  Kitti,   // EPE > 3 px AND EPE > 5% of |gt|
};

inline bool is_outlier(double epe, double gt_norm, OutlierRule rule) {
  const bool abs_bad = epe > 3.0;
  const bool rel_bad = epe > 0.05 * gt_norm;
  return rule == OutlierRule::Either ? (abs_bad || rel_bad) : (abs_bad && rel_bad);
}

inline RegionValue fl_all(const FlowField& pred, const FlowField& gt, const BoolGrid& mask, OutlierRule rule) {
  detail::check_mask(mask, gt);
  const Matrix e = epe_map(pred, gt);
  std::size_t bad = 0, n = 0;
  for (std::size_t i = 0; i < gt.pixels(); ++i) {
    if (!(mask.data[i] && gt.valid[i])) continue;
    ++n;
    bad += is_outlier(e.data[i], std::hypot(gt.u[i], gt.v[i]), rule);
  }
  if (n == 0) return std::nullopt;
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

inline RegionValue fl_all_either(const FlowField& pred, const FlowField& gt, const BoolGrid& mask) {
  return fl_all(pred, gt, mask, OutlierRule::Either);
}

inline RegionValue fl_all_kitti(const FlowField& pred, const FlowField& gt, const BoolGrid& mask) {
  return fl_all(pred, gt, mask, OutlierRule::Kitti);
}

// AEPE over pixels visible in only one frame.
inline RegionValue epe_unmatched(const FlowField& pred, const FlowField& gt, const BoolGrid& occ) {
  return aepe(pred, gt, occ);
}

inline double relative_improvement(double baseline, double ours) {
  detail::require(baseline > 0.0, "relative_improvement: baseline must be positive, got ", baseline);
  return 100.0 * (baseline - ours) / baseline;
}

inline std::string format_one_decimal(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", x);
  return buf;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

enum class ReportRegion : std::size_t { Noc = 0, Occ, OccIn, OccOut, All };
inline constexpr std::array<std::string_view, 5> kRegionNames{"Noc", "Occ", "Occ-in", "Occ-out", "All"};

struct RegionStats {
  RegionValue aepe;
  std::size_t count = 0;
  bool operator==(const RegionStats&) const = default;
};

struct EvalReport {
  bool has_occlusion = false;
  std::array<RegionStats, 5> regions{};
  RegionValue fl_all;        // KITTI conjunction, over All
  RegionValue fl_all_either;  // literal disjunction, over All

  const RegionStats& operator[](ReportRegion r) const { return regions[static_cast<std::size_t>(r)]; }
  RegionStats& operator[](ReportRegion r) { return regions[static_cast<std::size_t>(r)]; }
  bool operator==(const EvalReport&) const = default;
};

inline RegionStats region_stats(const FlowField& pred, const FlowField& gt, const BoolGrid& mask) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.pixels(); ++i) n += mask.data[i] && gt.valid[i];
  return {aepe(pred, gt, mask), n};
}

// Without an occlusion map only the All region is populated.
inline EvalReport evaluate(const FlowField& pred, const FlowField& gt, const std::optional<BoolGrid>& occ) {
  detail::require(pred.same_shape(gt), "evaluate: prediction ", pred.height, "x", pred.width, " vs ground truth ",
                  gt.height, "x", gt.width);
  EvalReport rep;
  const BoolGrid all(gt.height, gt.width, true);
  rep[ReportRegion::All] = region_stats(pred, gt, all);
  rep.fl_all = fl_all_kitti(pred, gt, all);
  rep.fl_all_either = fl_all_either(pred, gt, all);
  if (occ) {
    rep.has_occlusion = true;
    const auto part = partition_occlusion(*occ, gt);
    rep[ReportRegion::Noc] = region_stats(pred, gt, part.mask(Region::Noc));
    rep[ReportRegion::Occ] = region_stats(pred, gt, part.occluded());
    rep[ReportRegion::OccIn] = region_stats(pred, gt, part.mask(Region::OccIn));
    rep[ReportRegion::OccOut] = region_stats(pred, gt, part.mask(Region::OccOut));
  }
  return rep;
}

namespace detail {

inline std::string fmt_value(const RegionValue& v, const char* spec = "%.4f") {
  if (!v) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, *v);
  return buf;
}

inline std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

}  // namespace detail

inline std::string to_text_table(const EvalReport& rep) {
  std::string out = "Region       AEPE     Pixels\n";
  for (std::size_t r = 0; r < 5; ++r) {
    if (!rep.has_occlusion && r != static_cast<std::size_t>(ReportRegion::All)) continue;
    std::string name(kRegionNames[r]);
    name.resize(8, ' ');
    out += name + detail::pad(detail::fmt_value(rep.regions[r].aepe), 10) +
           detail::pad(std::to_string(rep.regions[r].count), 11) + "\n";
  }
  out += "Fl-all (KITTI, %): " + detail::fmt_value(rep.fl_all, "%.2f") + "\n";
  out += "Fl-all (3px or 5%, %): " + detail::fmt_value(rep.fl_all_either, "%.2f") + "\n";
  return out;
}

inline nlohmann::json to_json(const EvalReport& rep) {
  auto val = [](const RegionValue& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json regions = nlohmann::json::object();
  for (std::size_t r = 0; r < 5; ++r) {
    if (!rep.has_occlusion && r != static_cast<std::size_t>(ReportRegion::All)) continue;
    regions[std::string(kRegionNames[r])] = {{"aepe", val(rep.regions[r].aepe)}, {"count", rep.regions[r].count}};
  }
  return {{"regions", regions}, {"fl_all", val(rep.fl_all)}, {"fl_all_either", val(rep.fl_all_either)}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  auto val = [](const nlohmann::json& v) -> RegionValue {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  try {
    EvalReport rep;
    const auto& regions = j.at("regions");
    for (std::size_t r = 0; r < 5; ++r) {
      const std::string name(kRegionNames[r]);
      if (!regions.contains(name)) continue;
      rep.regions[r] = {val(regions.at(name).at("aepe")), regions.at(name).at("count").get<std::size_t>()};
      if (r != static_cast<std::size_t>(ReportRegion::All)) rep.has_occlusion = true;
    }
    rep.fl_all = val(j.at("fl_all"));
    rep.fl_all_either = val(j.at("fl_all_either"));
    return rep;
  } catch (const nlohmann::json::exception& e) {
    detail::fail("malformed report: ", e.what());
  }
}

// Per-region relative improvement of `ours` over `baseline`, one decimal.
inline std::string compare_reports(const EvalReport& baseline, const EvalReport& ours) {
  std::string out = "Region     Baseline      Ours  Rel. Impr. (%)\n";
  for (std::size_t r = 0; r < 5; ++r) {
    const auto& b = baseline.regions[r].aepe;
    const auto& o = ours.regions[r].aepe;
    if (!b && !o) continue;
    std::string name(kRegionNames[r]);
    name.resize(8, ' ');
    std::string impr = "-";
    if (b && o && *b > 0.0) impr = format_one_decimal(relative_improvement(*b, *o));
    out += name + detail::pad(detail::fmt_value(b), 11) + detail::pad(detail::fmt_value(o), 10) +
           detail::pad(impr, 16) + "\n";
  }
  return out;
}

}  // namespace gma
