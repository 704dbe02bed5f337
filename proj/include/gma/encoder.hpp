#pragma once

// Convolution primitive and the two toy-scale encoders (feature and context)
// that bring input frames down to 1/8 resolution.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string_view>
#include <utility>
#include <vector>

#include "gma/binary.hpp"
#include "gma/core.hpp"

namespace gma {

enum class Activation : std::uint32_t { None = 0, ReLU = 1, Tanh = 2, Sigmoid = 3 };

inline double activate(Activation act, double x) {
  switch (act) {
    case Activation::None: return x;
    case Activation::ReLU: return x > 0.0 ? x : 0.0;
    case Activation::Tanh: return std::tanh(x);
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
  }
  return x;
}

// Weights are laid out [out][ky][kx][in].
struct ConvSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Activation act = Activation::None;
  std::vector<double> weights;
  std::vector<double> bias;

  static ConvSpec zeros(std::size_t k, std::size_t stride, std::size_t cin, std::size_t cout,
                        Activation act = Activation::None) {
    ConvSpec s{k, stride, cin, cout, act, std::vector<double>(k * k * cin * cout, 0.0),
               std::vector<double>(cout, 0.0)};
    s.validate();
    return s;
  }

  // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias.
  static ConvSpec random(std::size_t k, std::size_t stride, std::size_t cin, std::size_t cout,
                         Activation act, Rng& rng) {
    auto s = zeros(k, stride, cin, cout, act);
    const double b = 1.0 / std::sqrt(static_cast<double>(k * k * cin));
    rng.fill(s.weights, -b, b);
    return s;
  }

  void validate() const {
    detail::require(kernel >= 1 && kernel % 2 == 1, "ConvSpec: kernel must be odd, got ", kernel);
    detail::require(stride >= 1, "ConvSpec: stride must be >= 1");
    detail::require(in_channels >= 1 && out_channels >= 1, "ConvSpec: channel counts must be >= 1");
    detail::require(weights.size() == kernel * kernel * in_channels * out_channels, "ConvSpec: expected ",
                    kernel * kernel * in_channels * out_channels, " weights, got ", weights.size());
    detail::require(bias.size() == out_channels, "ConvSpec: expected ", out_channels, " biases");
  }

  double& w(std::size_t o, std::size_t ky, std::size_t kx, std::size_t i) {
    return weights[((o * kernel + ky) * kernel + kx) * in_channels + i];
  }
  double w(std::size_t o, std::size_t ky, std::size_t kx, std::size_t i) const {
    return weights[((o * kernel + ky) * kernel + kx) * in_channels + i];
  }

  bool operator==(const ConvSpec&) const = default;
};

inline std::size_t conv_output_size(std::size_t n, const ConvSpec& s) {
  const std::size_t pad = s.kernel / 2;
  return (n + 2 * pad - s.kernel) / s.stride + 1;
}

// Cross-correlation, zero padding of kernel/2 on each side, then stride.
inline FeatureMap conv2d(const FeatureMap& in, const ConvSpec& s) {
  s.validate();
  detail::require(in.channels == s.in_channels, "conv2d: input has ", in.channels, " channels, kernel expects ",
                  s.in_channels);
  const auto pad = static_cast<long long>(s.kernel / 2);
  const std::size_t oh = conv_output_size(in.height, s), ow = conv_output_size(in.width, s);
  FeatureMap out(oh, ow, s.out_channels);
  std::vector<double> acc(s.out_channels);
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      acc = s.bias;
      for (std::size_t ky = 0; ky < s.kernel; ++ky) {
        const long long y = static_cast<long long>(r * s.stride + ky) - pad;
        if (y < 0 || y >= static_cast<long long>(in.height)) continue;
        for (std::size_t kx = 0; kx < s.kernel; ++kx) {
          const long long x = static_cast<long long>(c * s.stride + kx) - pad;
          if (x < 0 || x >= static_cast<long long>(in.width)) continue;
          auto src = in.pixel(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
          for (std::size_t o = 0; o < s.out_channels; ++o) {
            const double* wk = &s.weights[((o * s.kernel + ky) * s.kernel + kx) * s.in_channels];
            double sum = 0.0;
            for (std::size_t i = 0; i < s.in_channels; ++i) sum += wk[i] * src[i];
            acc[o] += sum;
          }
        }
      }
      auto dst = out.pixel(r, c);
      for (std::size_t o = 0; o < s.out_channels; ++o) dst[o] = activate(s.act, acc[o]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conv stacks in the little-endian container scheme
// ---------------------------------------------------------------------------

namespace detail {

inline void write_conv(BinaryWriter& out, const ConvSpec& s) {
  s.validate();
  for (auto v : {s.kernel, s.stride, s.in_channels, s.out_channels}) out.u32(static_cast<std::uint32_t>(v));
  out.u32(static_cast<std::uint32_t>(s.act));
  out.f64s(s.weights);
  out.f64s(s.bias);
}

inline ConvSpec read_conv(BinaryReader& in) {
  std::size_t dims[4];
  for (auto& d : dims) {
    d = in.u32();
    require(d >= 1 && d <= 4096, "conv header: implausible dimension ", d);
  }
  const auto act = in.u32();
  require(act <= 3, "conv header: unknown activation tag ", act);
  auto s = ConvSpec::zeros(dims[0], dims[1], dims[2], dims[3], static_cast<Activation>(act));
  in.f64s(s.weights);
  in.f64s(s.bias);
  return s;
}

inline void write_conv_list(BinaryWriter& out, const std::vector<ConvSpec>& convs) {
  out.u32(static_cast<std::uint32_t>(convs.size()));
  for (const auto& c : convs) write_conv(out, c);
}

inline std::vector<ConvSpec> read_conv_list(BinaryReader& in) {
  const auto n = in.u32();
  require(n <= 256, "conv list: implausible layer count ", n);
  std::vector<ConvSpec> convs;
  for (std::uint32_t i = 0; i < n; ++i) convs.push_back(read_conv(in));
  return convs;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

struct EncoderConfig {
  std::size_t in_channels = 3;
  std::size_t stage_channels[3] = {16, 24, 32};
};

// Three stride-2 3x3 ReLU stages followed by a 1x1 linear head. For the
// context encoder the head emits context_channels + hidden channels.
struct EncoderWeights {
  std::vector<ConvSpec> convs;
  std::size_t context_channels = 0;  // 0 for a feature encoder

  std::size_t output_channels() const { return convs.empty() ? 0 : convs.back().out_channels; }

  static EncoderWeights random(const EncoderConfig& cfg, std::size_t head_channels, Rng& rng) {
    EncoderWeights w;
    std::size_t cin = cfg.in_channels;
    for (auto c : cfg.stage_channels) {
      w.convs.push_back(ConvSpec::random(3, 2, cin, c, Activation::ReLU, rng));
      cin = c;
    }
    w.convs.push_back(ConvSpec::random(1, 1, cin, head_channels, Activation::None, rng));
    return w;
  }

  static EncoderWeights feature(const EncoderConfig& cfg, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    return random(cfg, d, rng);
  }

  static EncoderWeights context(const EncoderConfig& cfg, std::size_t d_c, std::size_t d_h, std::uint64_t seed) {
    Rng rng(seed);
    auto w = random(cfg, d_c + d_h, rng);
    w.context_channels = d_c;
    return w;
  }

  bool operator==(const EncoderWeights&) const = default;
};

namespace detail {

inline FeatureMap run_stack(const ImageGrid& img, const EncoderWeights& w) {
  require(!w.convs.empty(), "encoder: no layers");
  require(img.height % 8 == 0 && img.width % 8 == 0, "encoder: image ", img.height, "x", img.width,
          " is not divisible by 8");
  FeatureMap h = to_feature_map(img);
  for (const auto& c : w.convs) h = conv2d(h, c);
  require(h.height * 8 == img.height && h.width * 8 == img.width, "encoder: layers do not reduce by 8");
  return h;
}

}  // namespace detail

inline FeatureMap feature_encoder(const ImageGrid& img, const EncoderWeights& w) {
  return detail::run_stack(img, w);
}

struct ContextFeatures {
  FeatureMap context;  // linear head
  FeatureMap hidden;   // tanh, initial recurrent state
};

inline ContextFeatures context_encoder(const ImageGrid& img, const EncoderWeights& w) {
  detail::require(w.context_channels >= 1 && w.context_channels < w.output_channels(),
                  "context_encoder: head must split into context and hidden channels");
  const FeatureMap h = detail::run_stack(img, w);
  const std::size_t dc = w.context_channels, dh = h.channels - dc;
  ContextFeatures out{FeatureMap(h.height, h.width, dc), FeatureMap(h.height, h.width, dh)};
  for (std::size_t px = 0; px < h.pixels(); ++px) {
    for (std::size_t k = 0; k < dc; ++k) out.context.data[px * dc + k] = h.data[px * h.channels + k];
    for (std::size_t k = 0; k < dh; ++k) out.hidden.data[px * dh + k] = std::tanh(h.data[px * h.channels + dc + k]);
  }
  return out;
}

// "ENC1" container: magic, u32 context_channels, conv list.
inline void write_encoder(std::ostream& os, const EncoderWeights& w) {
  BinaryWriter out(os);
  out.magic("ENC1");
  out.u32(static_cast<std::uint32_t>(w.context_channels));
  detail::write_conv_list(out, w.convs);
}

inline EncoderWeights read_encoder(std::istream& is) {
  BinaryReader in(is);
  in.expect_magic("ENC1");
  EncoderWeights w;
  w.context_channels = in.u32();
  w.convs = detail::read_conv_list(in);
  return w;
}

}  // namespace gma
