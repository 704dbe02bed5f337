#pragma once

// Command implementations for the gma command-line tool. Kept in a header so
// the test suites can drive the exact same code paths in-process.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gma/all.hpp"

namespace gma::cli {

inline constexpr int kOk = 0;
inline constexpr int kValidation = 1;
inline constexpr int kIo = 2;

namespace fs = std::filesystem;

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

inline ByteImage mask_to_pgm(const BoolGrid& m) {
  ByteImage img{m.height, m.width, 1, std::vector<std::uint8_t>(m.data.size())};
  for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 255 : 0;
  return img;
}

inline BoolGrid pgm_to_mask(const ByteImage& img) {
  detail::require(img.channels == 1, "occlusion map must be a PGM (single channel)");
  BoolGrid m(img.height, img.width);
  for (std::size_t i = 0; i < img.data.size(); ++i) m.data[i] = img.data[i] != 0;
  return m;
}

// Category codes: 0 Noc, 1 Occ-in, 2 Occ-out, 255 invalid.
inline ByteImage partition_to_pgm(const OcclusionPartition& p) {
  ByteImage img{p.height, p.width, 1, std::vector<std::uint8_t>(p.labels.size())};
  for (std::size_t i = 0; i < p.labels.size(); ++i) img.data[i] = static_cast<std::uint8_t>(p.labels[i]);
  return img;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline void cmd_synth(const std::string& spec_path, const std::string& out_dir, std::ostream& log) {
  std::ifstream is(spec_path);
  if (!is) throw IoError("cannot open scene spec '" + spec_path + "'");
  const SceneSpec spec = read_scene(is);
  const RenderedPair pair = render_pair(spec);
  ensure_dir(out_dir);
  const fs::path dir(out_dir);
  write_image_file((dir / "img1.ppm").string(), pair.img1);
  write_image_file((dir / "img2.ppm").string(), pair.img2);
  write_flo_file((dir / "gt.flo").string(), pair.gt);
  write_pnm_file((dir / "occ.pgm").string(), mask_to_pgm(pair.occ));
  write_pnm_file((dir / "partition.pgm").string(), partition_to_pgm(pair.partition));
  log << "rendered " << spec.height << "x" << spec.width << " scene: Noc " << pair.partition.count(Region::Noc)
      << ", Occ-in " << pair.partition.count(Region::OccIn) << ", Occ-out " << pair.partition.count(Region::OccOut)
      << "\n";
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunOptions {
  std::string img1, img2, out_flow;
  std::optional<std::string> weights;
  std::size_t iterations = 12;
  std::string gma = "content";
  std::uint64_t seed = 0;
  std::vector<std::string> dump_attention;  // "x,y" in image pixels
  std::optional<std::string> attention_dir;
  std::optional<std::string> viz;
};

inline ImageGrid load_rgb(const std::string& path) {
  ImageGrid img = read_image_file(path);
  if (img.channels == 3) return img;
  ImageGrid rgb(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) rgb.data[3 * i + k] = img.data[i];
  }
  return rgb;
}

// Deepest pyramid (at most 4 levels) the 1/8 grid divides into.
inline std::size_t corr_levels_for(std::size_t grid_h, std::size_t grid_w) {
  std::size_t levels = 1;
  while (levels < 4 && grid_h % (std::size_t{1} << levels) == 0 && grid_w % (std::size_t{1} << levels) == 0) ++levels;
  return levels;
}

inline std::pair<std::size_t, std::size_t> parse_point(const std::string& s) {
  const auto comma = s.find(',');
  detail::require(comma != std::string::npos, "--dump-attention: expected x,y but got '", s, "'");
  try {
    std::size_t used = 0;
    const std::string xs = s.substr(0, comma), ys = s.substr(comma + 1);
    const long x = std::stol(xs, &used);
    detail::require(used == xs.size(), "");
    const long y = std::stol(ys, &used);
    detail::require(used == ys.size(), "");
    detail::require(x >= 0 && y >= 0, "");
    return {static_cast<std::size_t>(x), static_cast<std::size_t>(y)};
  } catch (const std::exception&) {
    detail::fail("--dump-attention: expected non-negative integers x,y but got '", s, "'");
  }
}

struct RunOutputs {
  FlowField flow;
  std::vector<std::string> heatmaps;
  std::optional<AttentionMatrix> attention;  // last iteration, when dumped
};

inline RunOutputs cmd_run(const RunOptions& o, std::ostream& log) {
  detail::require(o.iterations >= 1, "--iters must be >= 1");
  const bool gma_on = o.gma != "off";
  const std::optional<Variant> variant = gma_on ? std::optional(parse_variant(o.gma)) : std::nullopt;
  detail::require(gma_on || o.dump_attention.empty(), "--dump-attention requires --gma other than off");

  const ImageGrid img1 = load_rgb(o.img1), img2 = load_rgb(o.img2);
  detail::require(img1.height == img2.height && img1.width == img2.width, "frames differ in size: ", img1.height,
                  "x", img1.width, " vs ", img2.height, "x", img2.width);
  detail::require(img1.height % 8 == 0 && img1.width % 8 == 0, "frame size ", img1.height, "x", img1.width,
                  " is not divisible by 8");

  ModelDims dims;
  PipelineConfig cfg;
  cfg.iterations = o.iterations;
  cfg.corr_levels = corr_levels_for(img1.height / 8, img1.width / 8);
  cfg.corr_radius = dims.corr_radius;
  cfg.record_attention = !o.dump_attention.empty();

  PipelineWeights weights;
  if (o.weights) {
    std::ifstream is(*o.weights, std::ios::binary);
    if (!is) throw IoError("cannot open weights '" + *o.weights + "'");
    weights = read_pipeline_weights(is);
    const std::size_t corr_ch = weights.refine.motion.corr1.in_channels;
    detail::require(corr_ch == lookup_channels(cfg.corr_levels, cfg.corr_radius),
                    "weights expect ", corr_ch, " correlation channels, frame size gives ",
                    lookup_channels(cfg.corr_levels, cfg.corr_radius));
    if (gma_on) {
      detail::require(weights.gma.has_value(), "weights container has no GMA parameters; use --gma off");
      GmaConfig g;
      g.variant = *variant;
      g.d_in = weights.gma->d_in;
      g.d_c = weights.gma->d_c;
      g.d_m = weights.gma->d_m;
      cfg.gma = g;
    } else if (weights.gma) {
      // A GMA-trained GRU expects [y | y_hat | x]; fold to [y | x].
      weights.refine = fold_aggregated_channels(weights.refine, weights.gma->d_m);
      weights.gma.reset();
    }
  } else {
    dims.corr_levels = cfg.corr_levels;
    const GmaConfig g = dims.gma_config(variant.value_or(Variant::ContentOnly));
    weights = random_pipeline_weights(dims, g, img1.height, img1.width, o.seed);
    if (gma_on) {
      cfg.gma = g;
    } else {
      weights.refine = fold_aggregated_channels(weights.refine, dims.motion_channels);
      weights.gma.reset();
    }
  }

  const auto res = run_pipeline(img1, img2, weights, cfg);
  write_flo_file(o.out_flow, res.flow);
  log << "wrote " << o.out_flow << " (" << res.flow.height << "x" << res.flow.width << ", " << o.iterations
      << " iterations, gma " << o.gma << ")\n";

  RunOutputs out{res.flow, {}};
  if (o.viz) {
    write_image_file(*o.viz, flow_to_color(res.flow));
    log << "wrote " << *o.viz << "\n";
  }
  if (!o.dump_attention.empty()) {
    const std::string dir = o.attention_dir ? *o.attention_dir
                                            : fs::absolute(fs::path(o.out_flow)).parent_path().string();
    ensure_dir(dir);
    const auto& attention = res.trace.attention.back();
    out.attention = attention;
    const std::size_t gh = img1.height / 8, gw = img1.width / 8;
    for (const auto& spec : o.dump_attention) {
      const auto [x, y] = parse_point(spec);
      detail::require(x < img1.width && y < img1.height, "--dump-attention: pixel ", x, ",", y, " outside ",
                      img1.width, "x", img1.height, " frame");
      const std::size_t query = flat_index(y / 8, x / 8, gw);
      const std::string path =
          (fs::path(dir) / ("attention_" + std::to_string(x) + "_" + std::to_string(y) + ".pgm")).string();
      write_image_file(path, attention_heatmap(attention, query, gh, gw));
      out.heatmaps.push_back(path);
      log << "wrote " << path << "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string pred, gt;
  std::optional<std::string> occ;
  std::optional<std::string> report;      // writes <report>.txt and <report>.json
  std::vector<std::string> compare;       // baseline.json ours.json
};

inline void cmd_eval(const EvalOptions& o, std::ostream& log) {
  if (!o.compare.empty()) {
    detail::require(o.compare.size() == 2, "--compare takes exactly two report files");
    auto load = [](const std::string& path) {
      const std::string text = read_text_file(path);
      try {
        return report_from_json(nlohmann::json::parse(text));
      } catch (const nlohmann::json::parse_error& e) {
        detail::fail("report '", path, "': ", e.what());
      }
    };
    const std::string table = compare_reports(load(o.compare[0]), load(o.compare[1]));
    log << table;
    if (o.report) write_text_file(*o.report + ".txt", table);
    return;
  }
  detail::require(!o.pred.empty() && !o.gt.empty(), "eval needs a predicted and a ground-truth flow");
  const FlowField pred = read_flo_file(o.pred);
  const FlowField gt = read_flo_file(o.gt);
  detail::require(pred.same_shape(gt), "flow shapes differ: ", pred.height, "x", pred.width, " vs ", gt.height, "x",
                  gt.width);
  std::optional<BoolGrid> occ;
  if (o.occ) occ = pgm_to_mask(read_pnm_file(*o.occ));
  const EvalReport rep = evaluate(pred, gt, occ);
  const std::string table = to_text_table(rep);
  log << table;
  if (o.report) {
    write_text_file(*o.report + ".txt", table);
    write_text_file(*o.report + ".json", to_json(rep).dump(2) + "\n");
  }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradOptions {
  std::string variant = "content";
  std::uint64_t seed = 0;
  double threshold = 1e-4;
  std::optional<std::string> json;
};

inline bool cmd_gradcheck(const GradOptions& o, std::ostream& log) {
  GradCheckOptions g;
  g.variant = parse_variant(o.variant);
  g.seed = o.seed;
  g.threshold = o.threshold;
  const GradReport rep = check_gma(g);
  log << to_text_table(rep);
  if (o.json) write_text_file(*o.json, to_json(rep).dump(2) + "\n");
  return rep.pass();
}

// ---------------------------------------------------------------------------
// init-weights
// ---------------------------------------------------------------------------

inline void cmd_init_weights(const std::string& out, std::size_t height, std::size_t width, bool with_gma,
                             std::uint64_t seed, std::ostream& log) {
  detail::require(height % 8 == 0 && width % 8 == 0 && height > 0 && width > 0, "frame size must be divisible by 8");
  ModelDims dims;
  dims.corr_levels = corr_levels_for(height / 8, width / 8);
  const GmaConfig g = dims.gma_config(Variant::ContentOnly);
  PipelineWeights w = random_pipeline_weights(dims, g, height, width, seed);
  if (!with_gma) {
    w.refine = fold_aggregated_channels(w.refine, dims.motion_channels);
    w.gma.reset();
  }
  std::ofstream os(out, std::ios::binary);
  if (!os) throw IoError("cannot open '" + out + "' for writing");
  write_pipeline_weights(os, w);
  log << "wrote " << out << "\n";
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Attention-aggregated optical flow toolkit: synthetic scenes, flow estimation, evaluation"};
  app.set_config("--config", "", "Optional config file (same keys as flags; flags win)");
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  auto* synth = app.add_subcommand("synth", "Render a synthetic frame pair with ground truth");
  synth->add_option("spec", spec_path, "Scene spec (JSON)")->required();
  synth->add_option("out_dir", out_dir, "Output directory")->required();

  RunOptions ro;
  std::string weights_path, attention_dir, viz_path;
  auto* runc = app.add_subcommand("run", "Estimate flow between two frames");
  runc->add_option("img1", ro.img1, "Reference frame (PPM/PGM)")->required();
  runc->add_option("img2", ro.img2, "Matching frame (PPM/PGM)")->required();
  runc->add_option("out_flow", ro.out_flow, "Output .flo")->required();
  runc->add_option("--weights", weights_path, "Pipeline weights container (default: seeded random)");
  runc->add_option("--iters", ro.iterations, "Refinement iterations")->default_val(12);
  runc->add_option("--gma", ro.gma, "Aggregation variant")
      ->check(CLI::IsMember({"content", "content+pos", "pos", "off"}))
      ->default_val("content");
  runc->add_option("--seed", ro.seed, "Seed for random weights")->default_val(0);
  runc->add_option("--dump-attention", ro.dump_attention, "Query pixels x,y for attention heatmaps");
  runc->add_option("--attention-dir", attention_dir, "Directory for heatmaps (default: next to out_flow)");
  runc->add_option("--viz", viz_path, "Colorized flow output (PPM)");

  EvalOptions eo;
  std::string occ_path, report_path;
  auto* evalc = app.add_subcommand("eval", "Evaluate a flow against ground truth, or compare two reports");
  evalc->add_option("pred", eo.pred, "Predicted .flo");
  evalc->add_option("gt", eo.gt, "Ground-truth .flo");
  evalc->add_option("occ", occ_path, "Occlusion map (PGM, nonzero = occluded)");
  evalc->add_option("--report", report_path, "Write <path>.txt and <path>.json");
  evalc->add_option("--compare", eo.compare, "Baseline and new report (JSON) for relative improvement")
      ->expected(2);

  GradOptions go;
  std::string grad_json;
  auto* gradc = app.add_subcommand("gradcheck", "Check GMA analytic gradients against finite differences");
  gradc->add_option("--variant", go.variant, "Attention variant")
      ->check(CLI::IsMember({"content", "content+pos", "pos"}))
      ->default_val("content");
  gradc->add_option("--seed", go.seed, "Instance seed")->default_val(0);
  gradc->add_option("--threshold", go.threshold, "Max relative error")->default_val(1e-4);
  gradc->add_option("--json", grad_json, "Structured report output");

  std::string init_out;
  std::size_t init_h = 64, init_w = 64;
  std::uint64_t init_seed = 0;
  bool init_no_gma = false;
  auto* initc = app.add_subcommand("init-weights", "Write seeded random pipeline weights");
  initc->add_option("out", init_out, "Output container")->required();
  initc->add_option("--height", init_h, "Frame height")->default_val(64);
  initc->add_option("--width", init_w, "Frame width")->default_val(64);
  initc->add_option("--seed", init_seed, "Seed")->default_val(0);
  initc->add_flag("--no-gma", init_no_gma, "Omit GMA parameters (GRU sees [y | x])");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    log << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    log << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }

  try {
    if (*synth) {
      cmd_synth(spec_path, out_dir, log);
    } else if (*runc) {
      if (!weights_path.empty()) ro.weights = weights_path;
      if (!attention_dir.empty()) ro.attention_dir = attention_dir;
      if (!viz_path.empty()) ro.viz = viz_path;
      cmd_run(ro, log);
    } else if (*evalc) {
      if (!occ_path.empty()) eo.occ = occ_path;
      if (!report_path.empty()) eo.report = report_path;
      cmd_eval(eo, log);
    } else if (*gradc) {
      if (!grad_json.empty()) go.json = grad_json;
      return cmd_gradcheck(go, log) ? kOk : kValidation;
    } else if (*initc) {
      cmd_init_weights(init_out, init_h, init_w, !init_no_gma, init_seed, log);
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}

inline int run(const std::vector<std::string>& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"gma"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), log, err);
}

}  // namespace gma::cli
