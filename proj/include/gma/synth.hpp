#pragma once

// Layered synthetic scenes with exact ground-truth flow and occlusion.
//
// Each layer is a textured rectangle translated by an integer displacement
// between the two frames; the background is an infinite textured plane with
// its own translation. Larger depth means closer to the camera.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <iterator>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gma/core.hpp"
#include "gma/metrics.hpp"

namespace gma {

struct Layer {
  long x = 0, y = 0;           // top-left corner in frame 1
  long width = 0, height = 0;  // extent
  long u = 0, v = 0;           // translation frame 1 -> frame 2
  std::uint64_t texture_seed = 0;
  long depth = 0;

  bool covers(long r, long c, long du = 0, long dv = 0) const {
    return c >= x + du && c < x + du + width && r >= y + dv && r < y + dv + height;
  }
};

struct SceneSpec {
  std::size_t height = 32, width = 32;
  long background_u = 0, background_v = 0;
  std::uint64_t background_texture_seed = 0;
  std::vector<Layer> layers;  // ascending depth
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(height >= 1 && width >= 1, "SceneSpec: canvas must be non-empty");
    detail::require(height <= 1u << 14 && width <= 1u << 14, "SceneSpec: canvas too large");
    constexpr long lim = 1L << 20;
    auto in_range = [&](long t) { return t > -lim && t < lim; };
    detail::require(in_range(background_u) && in_range(background_v), "SceneSpec: background translation out of range");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      detail::require(l.width > 0 && l.height > 0, "SceneSpec: layer ", i, " has zero area");
      detail::require(in_range(l.x) && in_range(l.y) && in_range(l.width) && in_range(l.height) && in_range(l.u) &&
                          in_range(l.v),
                      "SceneSpec: layer ", i, " geometry out of range");
      if (i > 0) detail::require(layers[i - 1].depth <= l.depth, "SceneSpec: layers not sorted by depth");
    }
  }

  void sort_layers() {
    std::stable_sort(layers.begin(), layers.end(), [](const Layer& a, const Layer& b) { return a.depth < b.depth; });
  }
};

struct RenderedPair {
  ImageGrid img1, img2;
  FlowField gt;
  BoolGrid occ;
  OcclusionPartition partition;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Per-pixel uniform noise on an unbounded lattice, quantized to k/255 so
// frames survive 8-bit image files unchanged.
inline double texel(std::uint64_t seed, std::uint64_t layer_seed, long r, long c, std::size_t ch) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ layer_seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(r));
  h = splitmix64(h ^ static_cast<std::uint64_t>(c));
  h = splitmix64(h ^ ch);
  return static_cast<double>(h & 0xFF) / 255.0;
}

// Index of the topmost layer covering (r, c) in the given frame, -1 for background.
inline long top_layer(const SceneSpec& s, long r, long c, bool second_frame) {
  for (long i = static_cast<long>(s.layers.size()) - 1; i >= 0; --i) {
    const auto& l = s.layers[static_cast<std::size_t>(i)];
    if (second_frame ? l.covers(r, c, l.u, l.v) : l.covers(r, c)) return i;
  }
  return -1;
}

}  // namespace detail

inline RenderedPair render_pair(const SceneSpec& spec) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width;
  RenderedPair out{ImageGrid(h, w, 3), ImageGrid(h, w, 3), FlowField(h, w), BoolGrid(h, w), {}};

  auto paint = [&](ImageGrid& img, long r, long c, bool second) {
    const long li = detail::top_layer(spec, r, c, second);
    long lr, lc;
    std::uint64_t ts;
    if (li < 0) {
      lr = r - (second ? spec.background_v : 0);
      lc = c - (second ? spec.background_u : 0);
      ts = spec.background_texture_seed;
    } else {
      const auto& l = spec.layers[static_cast<std::size_t>(li)];
      lr = r - l.y - (second ? l.v : 0);
      lc = c - l.x - (second ? l.u : 0);
      ts = l.texture_seed;
    }
    for (std::size_t k = 0; k < 3; ++k) {
      img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), k) =
          detail::texel(spec.seed, ts ^ (li < 0 ? 0x5bd1e995ull : 0ull), lr, lc, k);
    }
  };

  for (long r = 0; r < static_cast<long>(h); ++r) {
    for (long c = 0; c < static_cast<long>(w); ++c) {
      paint(out.img1, r, c, false);
      paint(out.img2, r, c, true);

      const long li = detail::top_layer(spec, r, c, false);
      const long u = li < 0 ? spec.background_u : spec.layers[static_cast<std::size_t>(li)].u;
      const long v = li < 0 ? spec.background_v : spec.layers[static_cast<std::size_t>(li)].v;
      const std::size_t idx = out.gt.index(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      out.gt.u[idx] = static_cast<double>(u);
      out.gt.v[idx] = static_cast<double>(v);

      const long tr = r + v, tc = c + u;
      bool occluded;
      if (tr < 0 || tc < 0 || tr >= static_cast<long>(h) || tc >= static_cast<long>(w)) {
        occluded = true;
      } else {
        occluded = detail::top_layer(spec, tr, tc, true) != li;
      }
      out.occ.data[idx] = occluded;
    }
  }
  out.partition = partition_occlusion(out.occ, out.gt);
  return out;
}

// OccOut pixel count of a lone background translating by (u, v).
inline std::size_t analytic_out_of_frame_count(std::size_t h, std::size_t w, long u, long v) {
  const auto au = static_cast<std::size_t>(std::min<long>(std::labs(u), static_cast<long>(w)));
  const auto av = static_cast<std::size_t>(std::min<long>(std::labs(v), static_cast<long>(h)));
  return h * au + w * av - au * av;
}

// ---------------------------------------------------------------------------
// Scene files (JSON)
//
// {
//   "height": 32, "width": 32, "seed": 0,
//   "background": {"u": 5, "v": 0, "texture_seed": 1},
//   "layers": [{"x": 8, "y": 8, "width": 10, "height": 10,
//               "u": -2, "v": 1, "texture_seed": 7, "depth": 1}]
// }
//
// "background", "layers" and "seed" are optional. Translations and geometry
// must be integers.
// ---------------------------------------------------------------------------

namespace detail {

inline long get_int(const nlohmann::json& obj, const char* key, const std::string& where,
                    std::optional<long> fallback = std::nullopt) {
  if (!obj.contains(key)) {
    if (fallback) return *fallback;
    fail(where, ": missing required key '", key, "'");
  }
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) fail(where, ".", key, ": expected an integer");
  return v.get<long>();
}

inline std::uint64_t get_seed(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) return 0;
  const auto& v = obj.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
    fail(where, ".", key, ": expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

}  // namespace detail

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  if (!j.is_object()) detail::fail("scene: top level must be an object");
  SceneSpec s;
  const long h = detail::get_int(j, "height", "scene"), w = detail::get_int(j, "width", "scene");
  detail::require(h >= 1 && w >= 1, "scene: height and width must be positive");
  s.height = static_cast<std::size_t>(h);
  s.width = static_cast<std::size_t>(w);
  s.seed = detail::get_seed(j, "seed", "scene");
  if (j.contains("background")) {
    const auto& bg = j.at("background");
    if (!bg.is_object()) detail::fail("scene.background: expected an object");
    s.background_u = detail::get_int(bg, "u", "scene.background", 0);
    s.background_v = detail::get_int(bg, "v", "scene.background", 0);
    s.background_texture_seed = detail::get_seed(bg, "texture_seed", "scene.background");
  }
  if (j.contains("layers")) {
    const auto& ls = j.at("layers");
    if (!ls.is_array()) detail::fail("scene.layers: expected an array");
    for (std::size_t i = 0; i < ls.size(); ++i) {
      const std::string where = "scene.layers[" + std::to_string(i) + "]";
      const auto& o = ls[i];
      if (!o.is_object()) detail::fail(where, ": expected an object");
      Layer l;
      l.x = detail::get_int(o, "x", where);
      l.y = detail::get_int(o, "y", where);
      l.width = detail::get_int(o, "width", where);
      l.height = detail::get_int(o, "height", where);
      l.u = detail::get_int(o, "u", where, 0);
      l.v = detail::get_int(o, "v", where, 0);
      l.texture_seed = detail::get_seed(o, "texture_seed", where);
      l.depth = detail::get_int(o, "depth", where, static_cast<long>(i) + 1);
      s.layers.push_back(l);
    }
  }
  s.sort_layers();
  s.validate();
  return s;
}

// Parse errors carry the line and column of the offending token.
inline SceneSpec read_scene(std::istream& is) {
  const std::string text{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    detail::fail("scene: ", e.what());
  }
  return scene_from_json(j);
}

}  // namespace gma
