#pragma once

// File formats and figures: Middlebury .flo, binary PGM/PPM, the standard
// flow color wheel and attention heatmaps.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gma/binary.hpp"
#include "gma/core.hpp"
#include "gma/gma.hpp"

namespace gma {

// ---------------------------------------------------------------------------
// .flo
// ---------------------------------------------------------------------------

inline constexpr float kFloMagic = 202021.25f;
inline constexpr std::size_t kFloMaxPixels = std::size_t{1} << 28;

// Invalid pixels are stored as-is; .flo carries no validity channel.
inline void write_flo(std::ostream& os, const FlowField& f) {
  for (std::size_t i = 0; i < f.pixels(); ++i) {
    detail::require(std::isfinite(f.u[i]) && std::isfinite(f.v[i]), "write_flo: non-finite flow at pixel ", i);
  }
  detail::require(f.width <= static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max()) &&
                      f.height <= static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max()),
                  "write_flo: dimensions too large");
  BinaryWriter out(os);
  out.f32(kFloMagic);
  out.i32(static_cast<std::int32_t>(f.width));
  out.i32(static_cast<std::int32_t>(f.height));
  for (std::size_t i = 0; i < f.pixels(); ++i) {
    out.f32(static_cast<float>(f.u[i]));
    out.f32(static_cast<float>(f.v[i]));
  }
}

inline FlowField read_flo(std::istream& is) {
  BinaryReader in(is);
  const float magic = in.f32();
  if (!(magic == kFloMagic)) detail::fail("read_flo: bad magic ", magic);
  const std::int32_t w = in.i32(), h = in.i32();
  detail::require(w >= 0 && h >= 0, "read_flo: negative dimensions ", w, "x", h);
  const auto pixels = static_cast<std::uint64_t>(w) * static_cast<std::uint64_t>(h);
  detail::require(pixels <= kFloMaxPixels, "read_flo: size overflow (", w, "x", h, ")");
  FlowField f(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
  for (std::size_t i = 0; i < f.pixels(); ++i) {
    f.u[i] = in.f32();
    f.v[i] = in.f32();
  }
  return f;
}

inline void write_flo_file(const std::string& path, const FlowField& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_flo(os, f);
}

inline FlowField read_flo_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_flo(is);
}

// ---------------------------------------------------------------------------
// PGM (P5) / PPM (P6), 8-bit
// ---------------------------------------------------------------------------

struct ByteImage {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<std::uint8_t> data;
  bool operator==(const ByteImage&) const = default;
};

namespace detail {

inline std::string pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

inline std::size_t pnm_number(std::istream& is, const char* what) {
  const std::string tok = pnm_token(is);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
      tok.size() > 9) {
    fail("malformed header: bad ", what, " '", tok, "'");
  }
  return static_cast<std::size_t>(std::stoul(tok));
}

}  // namespace detail

inline void write_pnm(std::ostream& os, const ByteImage& img) {
  detail::require(img.channels == 1 || img.channels == 3, "write_pnm: channels must be 1 or 3");
  detail::require(img.data.size() == img.height * img.width * img.channels, "write_pnm: payload size mismatch");
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!os) throw IoError("write_pnm: write failed");
}

inline ByteImage read_pnm(std::istream& is) {
  const std::string magic = detail::pnm_token(is);
  if (magic != "P5" && magic != "P6") detail::fail("malformed header: unsupported magic '", magic, "'");
  ByteImage img;
  img.channels = magic == "P5" ? 1 : 3;
  img.width = detail::pnm_number(is, "width");
  img.height = detail::pnm_number(is, "height");
  const std::size_t maxval = detail::pnm_number(is, "maxval");
  if (maxval != 255) detail::fail("unsupported maxval ", maxval);
  detail::require(img.width >= 1 && img.height >= 1, "malformed header: empty image");
  detail::require(img.width * img.height <= kFloMaxPixels, "malformed header: image too large");
  img.data.resize(img.width * img.height * img.channels);
  is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (static_cast<std::size_t>(is.gcount()) != img.data.size()) throw IoError("truncated image payload");
  return img;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline ByteImage to_bytes(const ImageGrid& img) {
  ByteImage b{img.height, img.width, img.channels, std::vector<std::uint8_t>(img.data.size())};
  std::transform(img.data.begin(), img.data.end(), b.data.begin(), to_byte);
  return b;
}

inline ImageGrid from_bytes(const ByteImage& b) {
  ImageGrid img(b.height, b.width, b.channels);
  std::transform(b.data.begin(), b.data.end(), img.data.begin(), [](std::uint8_t x) { return x / 255.0; });
  return img;
}

inline void write_image(std::ostream& os, const ImageGrid& img) { write_pnm(os, to_bytes(img)); }
inline ImageGrid read_image(std::istream& is) { return from_bytes(read_pnm(is)); }

inline void write_pnm_file(const std::string& path, const ByteImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_pnm(os, img);
}

inline ByteImage read_pnm_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_pnm(is);
}

inline void write_image_file(const std::string& path, const ImageGrid& img) { write_pnm_file(path, to_bytes(img)); }
inline ImageGrid read_image_file(const std::string& path) { return from_bytes(read_pnm_file(path)); }

// ---------------------------------------------------------------------------
// Flow coloring (Middlebury wheel: RY=15, YG=6, GC=4, CB=11, BM=13, MR=6)
// ---------------------------------------------------------------------------

inline constexpr std::size_t kWheelSize = 55;

// Wheel entries in 0..255.
inline std::array<std::array<double, 3>, kWheelSize> color_wheel() {
  constexpr std::size_t RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::array<std::array<double, 3>, kWheelSize> wheel{};
  std::size_t k = 0;
  auto ramp = [](std::size_t i, std::size_t n) { return std::floor(255.0 * static_cast<double>(i) / static_cast<double>(n)); };
  for (std::size_t i = 0; i < RY; ++i) wheel[k++] = {255.0, ramp(i, RY), 0.0};
  for (std::size_t i = 0; i < YG; ++i) wheel[k++] = {255.0 - ramp(i, YG), 255.0, 0.0};
  for (std::size_t i = 0; i < GC; ++i) wheel[k++] = {0.0, 255.0, ramp(i, GC)};
  for (std::size_t i = 0; i < CB; ++i) wheel[k++] = {0.0, 255.0 - ramp(i, CB), 255.0};
  for (std::size_t i = 0; i < BM; ++i) wheel[k++] = {ramp(i, BM), 0.0, 255.0};
  for (std::size_t i = 0; i < MR; ++i) wheel[k++] = {255.0, 0.0, 255.0 - ramp(i, MR)};
  return wheel;
}

// Angle picks the hue, magnitude / max_norm the saturation. Magnitudes past
// max_norm are darkened to 75%. Invalid pixels are black.
inline ImageGrid flow_to_color(const FlowField& flow, std::optional<double> max_norm = std::nullopt) {
  const auto wheel = color_wheel();
  double norm = 0.0;
  if (max_norm) {
    norm = *max_norm;
  } else {
    for (std::size_t i = 0; i < flow.pixels(); ++i) {
      if (flow.valid[i]) norm = std::max(norm, std::hypot(flow.u[i], flow.v[i]));
    }
  }
  norm = std::max(norm, 1e-5);

  ImageGrid img(flow.height, flow.width, 3);
  constexpr double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < flow.pixels(); ++i) {
    if (!flow.valid[i]) continue;
    const double u = flow.u[i] / norm, v = flow.v[i] / norm;
    const double rad = std::hypot(u, v);
    const double a = std::atan2(-v, -u) / pi;
    const double fk = (a + 1.0) / 2.0 * static_cast<double>(kWheelSize - 1);
    const auto k0 = static_cast<std::size_t>(std::floor(fk));
    const std::size_t k1 = (k0 + 1) % kWheelSize;
    const double f = fk - static_cast<double>(k0);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double col = ((1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch]) / 255.0;
      col = rad <= 1.0 ? 1.0 - rad * (1.0 - col) : col * 0.75;
      img.data[3 * i + ch] = std::clamp(col, 0.0, 1.0);
    }
  }
  return img;
}

// One attention row as an H x W grayscale map, min-max normalized. A
// constant row maps to all zeros.
inline ImageGrid attention_heatmap(const AttentionMatrix& a, std::size_t query, std::size_t height, std::size_t width) {
  detail::require(a.size() == height * width, "attention_heatmap: attention is ", a.size(), "x", a.size(),
                  " but grid is ", height, "x", width);
  detail::require(query < a.size(), "attention_heatmap: query index ", query, " out of range (N = ", a.size(), ")");
  const auto row = a.row(query);
  const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
  const double range = *hi - *lo;
  ImageGrid img(height, width, 1);
  if (range > 0.0) {
    for (std::size_t j = 0; j < row.size(); ++j) img.data[j] = (row[j] - *lo) / range;
  }
  return img;
}

}  // namespace gma
