#pragma once

// Recurrent refinement: correlation lookup -> motion features -> (optional)
// motion aggregation -> convolutional GRU -> residual flow, repeated
// and accumulated, then upsampled to input resolution.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <vector>

#include "gma/binary.hpp"
#include "gma/core.hpp"
#include "gma/correlation.hpp"
#include "gma/encoder.hpp"
#include "gma/gma.hpp"

namespace gma {

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

struct MotionEncoderWeights {
  ConvSpec corr1;  // 1x1 on lookup features
  ConvSpec corr2;  // 3x3
  ConvSpec flow1;  // 3x3 on the 2-channel flow
  ConvSpec fuse;   // 3x3 on [corr2 | flow1] -> d_m - 2; raw flow is appended

  std::size_t output_channels() const { return fuse.out_channels + 2; }
  bool operator==(const MotionEncoderWeights&) const = default;
};

struct GruWeights {
  ConvSpec update;  // z, sigmoid, input [h | x]
  ConvSpec reset;   // r, sigmoid, input [h | x]
  ConvSpec cand;    // q, tanh, input [r*h | x]
  ConvSpec head1;   // flow head, ReLU
  ConvSpec head2;   // flow head -> 2 channels

  std::size_t hidden_channels() const { return update.out_channels; }
  std::size_t input_channels() const { return update.in_channels - update.out_channels; }
  bool operator==(const GruWeights&) const = default;
};

struct RefinementWeights {
  MotionEncoderWeights motion;
  GruWeights gru;
  bool operator==(const RefinementWeights&) const = default;
};

// Channel sizes of the whole toy model.
struct ModelDims {
  EncoderConfig encoder{};
  std::size_t feature_channels = 32;  // D
  std::size_t context_channels = 32;  // D_c
  std::size_t hidden_channels = 32;   // D_h
  std::size_t motion_channels = 32;   // D_m
  std::size_t gma_channels = 32;      // D_in
  std::size_t corr_levels = 4;
  std::size_t corr_radius = 4;
  std::size_t corr_hidden = 48;
  std::size_t flow_hidden = 16;
  std::size_t head_hidden = 32;

  void validate() const {
    detail::require(motion_channels >= 3, "ModelDims: motion channels must be >= 3 (flow is appended)");
    detail::require(corr_levels >= 1, "ModelDims: need at least one correlation level");
  }

  // GRU input width: [y | y_hat | x], [y_hat | x] or [y | x].
  std::size_t gru_input_channels(const std::optional<GmaConfig>& gma) const {
    if (gma && gma->combine == CombineMode::Concatenate) return 2 * motion_channels + context_channels;
    return motion_channels + context_channels;
  }

  GmaConfig gma_config(Variant v) const {
    GmaConfig c;
    c.variant = v;
    c.d_in = gma_channels;
    c.d_c = context_channels;
    c.d_m = motion_channels;
    return c;
  }
};

inline RefinementWeights random_refinement(const ModelDims& dims, const std::optional<GmaConfig>& gma, Rng& rng) {
  dims.validate();
  RefinementWeights w;
  const std::size_t corr_ch = lookup_channels(dims.corr_levels, dims.corr_radius);
  w.motion.corr1 = ConvSpec::random(1, 1, corr_ch, dims.corr_hidden, Activation::ReLU, rng);
  w.motion.corr2 = ConvSpec::random(3, 1, dims.corr_hidden, dims.corr_hidden, Activation::ReLU, rng);
  w.motion.flow1 = ConvSpec::random(3, 1, 2, dims.flow_hidden, Activation::ReLU, rng);
  w.motion.fuse = ConvSpec::random(3, 1, dims.corr_hidden + dims.flow_hidden, dims.motion_channels - 2,
                                   Activation::ReLU, rng);
  const std::size_t dh = dims.hidden_channels, in = dims.gru_input_channels(gma);
  w.gru.update = ConvSpec::random(3, 1, dh + in, dh, Activation::Sigmoid, rng);
  w.gru.reset = ConvSpec::random(3, 1, dh + in, dh, Activation::Sigmoid, rng);
  w.gru.cand = ConvSpec::random(3, 1, dh + in, dh, Activation::Tanh, rng);
  w.gru.head1 = ConvSpec::random(3, 1, dh, dims.head_hidden, Activation::ReLU, rng);
  w.gru.head2 = ConvSpec::random(3, 1, dims.head_hidden, 2, Activation::None, rng);
  return w;
}

// Converts GRU weights built for [h | y | y_hat | x] inputs into weights for
// [h | y | x] by adding the y_hat block onto the y block. With alpha = 0
// (y_hat == y) both configurations then compute the same function.
inline RefinementWeights fold_aggregated_channels(const RefinementWeights& w, std::size_t d_m) {
  RefinementWeights out = w;
  const std::size_t dh = w.gru.hidden_channels();
  for (ConvSpec* conv : {&out.gru.update, &out.gru.reset, &out.gru.cand}) {
    const ConvSpec src = *conv;
    detail::require(src.in_channels > dh + 2 * d_m, "fold_aggregated_channels: GRU input too narrow");
    ConvSpec dst = ConvSpec::zeros(src.kernel, src.stride, src.in_channels - d_m, src.out_channels, src.act);
    dst.bias = src.bias;
    for (std::size_t o = 0; o < src.out_channels; ++o) {
      for (std::size_t ky = 0; ky < src.kernel; ++ky) {
        for (std::size_t kx = 0; kx < src.kernel; ++kx) {
          for (std::size_t i = 0; i < dst.in_channels; ++i) {
            const std::size_t si = i < dh + d_m ? i : i + d_m;
            dst.w(o, ky, kx, i) = src.w(o, ky, kx, si);
          }
          for (std::size_t k = 0; k < d_m; ++k) dst.w(o, ky, kx, dh + k) += src.w(o, ky, kx, dh + d_m + k);
        }
      }
    }
    *conv = std::move(dst);
  }
  return out;
}

// "RFN1" container: magic, conv list in the fixed order
// corr1, corr2, flow1, fuse, update, reset, cand, head1, head2.
inline void write_refinement(std::ostream& os, const RefinementWeights& w) {
  BinaryWriter out(os);
  out.magic("RFN1");
  detail::write_conv_list(out, {w.motion.corr1, w.motion.corr2, w.motion.flow1, w.motion.fuse, w.gru.update,
                                w.gru.reset, w.gru.cand, w.gru.head1, w.gru.head2});
}

inline RefinementWeights read_refinement(std::istream& is) {
  BinaryReader in(is);
  in.expect_magic("RFN1");
  auto convs = detail::read_conv_list(in);
  detail::require(convs.size() == 9, "RFN1: expected 9 layers, got ", convs.size());
  RefinementWeights w;
  w.motion = {convs[0], convs[1], convs[2], convs[3]};
  w.gru = {convs[4], convs[5], convs[6], convs[7], convs[8]};
  return w;
}

// ---------------------------------------------------------------------------
// Motion encoder and GRU
// ---------------------------------------------------------------------------

inline FeatureMap flow_channels(const FlowField& f) {
  FeatureMap m(f.height, f.width, 2);
  for (std::size_t i = 0; i < f.pixels(); ++i) {
    m.data[2 * i] = f.u[i];
    m.data[2 * i + 1] = f.v[i];
  }
  return m;
}

inline FeatureMap motion_encoder(const FeatureMap& corr, const FlowField& flow, const MotionEncoderWeights& w) {
  detail::require(corr.height == flow.height && corr.width == flow.width, "motion_encoder: correlation features ",
                  corr.height, "x", corr.width, " vs flow ", flow.height, "x", flow.width);
  const FeatureMap fl = flow_channels(flow);
  const FeatureMap c = conv2d(conv2d(corr, w.corr1), w.corr2);
  const FeatureMap f = conv2d(fl, w.flow1);
  const FeatureMap fused = conv2d(concat_channels({&c, &f}), w.fuse);
  return concat_channels({&fused, &fl});
}

struct GruState {
  FeatureMap hidden;
};

struct GruStep {
  GruState state;
  FlowField delta;
};

inline GruStep gru_update(const GruState& state, const FeatureMap& inputs, const GruWeights& w) {
  const FeatureMap& h = state.hidden;
  detail::require(h.same_grid(inputs), "gru_update: hidden ", h.height, "x", h.width, " vs inputs ",
                  inputs.height, "x", inputs.width);
  const FeatureMap hx = concat_channels({&h, &inputs});
  const FeatureMap z = conv2d(hx, w.update);
  const FeatureMap r = conv2d(hx, w.reset);
  detail::require(z.channels == h.channels, "gru_update: gate width ", z.channels, " vs hidden ", h.channels);
  FeatureMap rh = h;
  for (std::size_t t = 0; t < rh.data.size(); ++t) rh.data[t] *= r.data[t];
  const FeatureMap q = conv2d(concat_channels({&rh, &inputs}), w.cand);

  GruStep step;
  step.state.hidden = h;
  auto& next = step.state.hidden.data;
  for (std::size_t t = 0; t < next.size(); ++t) next[t] = (1.0 - z.data[t]) * h.data[t] + z.data[t] * q.data[t];

  const FeatureMap d = conv2d(conv2d(step.state.hidden, w.head1), w.head2);
  step.delta = FlowField(h.height, h.width);
  for (std::size_t i = 0; i < d.pixels(); ++i) {
    step.delta.u[i] = d.data[2 * i];
    step.delta.v[i] = d.data[2 * i + 1];
  }
  return step;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct PipelineWeights {
  EncoderWeights feature;
  EncoderWeights context;
  RefinementWeights refine;
  std::optional<GmaParams> gma;

  bool operator==(const PipelineWeights&) const = default;
};

struct PipelineConfig {
  std::size_t iterations = 12;
  std::optional<GmaConfig> gma;  // nullopt: aggregation off, GRU sees [y | x]
  std::size_t corr_levels = 4;
  std::size_t corr_radius = 4;
  bool record_attention = false;
};

// Seeded weights for images of the given size. The positional tables are
// sized for the 1/8 feature grid.
inline PipelineWeights random_pipeline_weights(const ModelDims& dims, const std::optional<GmaConfig>& gma,
                                               std::size_t image_h, std::size_t image_w, std::uint64_t seed) {
  dims.validate();
  PipelineWeights w;
  w.feature = EncoderWeights::feature(dims.encoder, dims.feature_channels, seed * 4 + 1);
  w.context = EncoderWeights::context(dims.encoder, dims.context_channels, dims.hidden_channels, seed * 4 + 2);
  Rng rng(seed * 4 + 3);
  w.refine = random_refinement(dims, gma, rng);
  if (gma) {
    w.gma = GmaParams::init(*gma, std::max<std::size_t>(1, image_h / 8), std::max<std::size_t>(1, image_w / 8),
                            seed * 4 + 4);
  }
  return w;
}

struct IterationTrace {
  FlowField initial;
  std::vector<FlowField> residuals;
  std::vector<FlowField> accumulated;
  std::vector<AttentionMatrix> attention;
  std::vector<double> hidden_abs_max;
};

// x8 bilinear upsampling (pixel-centre aligned, edge clamped), values x8.
inline FlowField upsample_flow8(const FlowField& f) {
  constexpr std::size_t s = 8;
  FlowField out(f.height * s, f.width * s);
  auto coord = [](std::size_t dst, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
    double x = (static_cast<double>(dst) + 0.5) / s - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(x));
    i1 = std::min(i0 + 1, n - 1);
    t = x - static_cast<double>(i0);
  };
  for (std::size_t r = 0; r < out.height; ++r) {
    std::size_t y0, y1;
    double ty;
    coord(r, f.height, y0, y1, ty);
    for (std::size_t c = 0; c < out.width; ++c) {
      std::size_t x0, x1;
      double tx;
      coord(c, f.width, x0, x1, tx);
      auto interp = [&](const std::vector<double>& ch) {
        const double top = (1 - tx) * ch[f.index(y0, x0)] + tx * ch[f.index(y0, x1)];
        const double bot = (1 - tx) * ch[f.index(y1, x0)] + tx * ch[f.index(y1, x1)];
        return s * ((1 - ty) * top + ty * bot);
      };
      const std::size_t o = out.index(r, c);
      out.u[o] = interp(f.u);
      out.v[o] = interp(f.v);
    }
  }
  return out;
}

struct PipelineResult {
  FlowField flow;  // full resolution
  IterationTrace trace;
};

inline PipelineResult run_pipeline(const ImageGrid& img1, const ImageGrid& img2, const PipelineWeights& w,
                                   const PipelineConfig& cfg) {
  detail::require(cfg.iterations >= 1, "run_pipeline: iterations must be >= 1");
  detail::require(img1.height == img2.height && img1.width == img2.width && img1.channels == img2.channels,
                  "run_pipeline: frames differ in shape");
  detail::require(!cfg.gma || w.gma, "run_pipeline: aggregation requested but no GMA parameters supplied");

  const FeatureMap f1 = feature_encoder(img1, w.feature);
  const FeatureMap f2 = feature_encoder(img2, w.feature);
  const ContextFeatures ctx = context_encoder(img1, w.context);
  const CorrPyramid pyr = build_pyramid(all_pairs_correlation(f1, f2), cfg.corr_levels);

  PipelineResult res;
  GruState state{ctx.hidden};
  FlowField flow(f1.height, f1.width);
  res.trace.initial = flow;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const FeatureMap corr = lookup(pyr, flow, cfg.corr_radius);
    const FeatureMap y = motion_encoder(corr, flow, w.refine.motion);
    FeatureMap inputs;
    if (cfg.gma) {
      auto out = gma_forward(ctx.context, y, *w.gma, *cfg.gma);
      inputs = std::move(out.combined);
      if (cfg.record_attention) res.trace.attention.push_back(std::move(out.attention));
    } else {
      inputs = concat_channels({&y, &ctx.context});
    }
    GruStep step = gru_update(state, inputs, w.refine.gru);
    state = std::move(step.state);
    for (std::size_t i = 0; i < flow.pixels(); ++i) {
      flow.u[i] += step.delta.u[i];
      flow.v[i] += step.delta.v[i];
    }
    double hmax = 0.0;
    for (double hv : state.hidden.data) hmax = std::max(hmax, std::abs(hv));
    res.trace.hidden_abs_max.push_back(hmax);
    res.trace.residuals.push_back(std::move(step.delta));
    res.trace.accumulated.push_back(flow);
  }
  res.flow = upsample_flow8(flow);
  return res;
}

// Pipeline bundle: ENC1 (feature), ENC1 (context), RFN1, u32 has_gma, [GMA1].
inline void write_pipeline_weights(std::ostream& os, const PipelineWeights& w) {
  write_encoder(os, w.feature);
  write_encoder(os, w.context);
  write_refinement(os, w.refine);
  BinaryWriter(os).u32(w.gma ? 1 : 0);
  if (w.gma) write_params(os, *w.gma);
}

inline PipelineWeights read_pipeline_weights(std::istream& is) {
  PipelineWeights w;
  w.feature = read_encoder(is);
  w.context = read_encoder(is);
  w.refine = read_refinement(is);
  const auto has_gma = BinaryReader(is).u32();
  detail::require(has_gma <= 1, "pipeline weights: bad GMA flag ", has_gma);
  if (has_gma) w.gma = read_params(is);
  return w;
}

}  // namespace gma
