// Command-line front end: generate-data, make-gt, train, evaluate, ablate,
// infer. Every subcommand takes --config <json-file> plus targeted overrides;
// exit codes are 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cafnet/common.hpp"
#include "cafnet/harness.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cafnet;

namespace {

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  json j = json::parse(ss.str(), nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ConfigError("config file is not a json object: " + path);
  return j;
}

template <typename T>
void take(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

std::pair<int, int> parse_patch(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= text.size())
    throw ConfigError("--patch expects WxH, e.g. 16x16");
  try {
    return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("--patch expects WxH, e.g. 16x16");
  }
}

// ---- subcommand runners -------------------------------------------------------

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_generate(const CommonFlags& common, const std::optional<int>& frames) {
  const json j = load_config_file(common.config);
  GenerateConfig g;
  take(j, "height", g.scene.height);
  take(j, "width", g.scene.width);
  take(j, "n_objects", g.scene.n_objects);
  take(j, "ghost_rate", g.scene.ghost_rate);
  take(j, "n_frames", g.scene.n_frames);
  take(j, "lidar_step", g.scene.lidar_step);
  take(j, "d_max", g.scene.d_max);
  take(j, "seed", g.seed);
  take(j, "val_fraction", g.val_fraction);
  std::string out;
  take(j, "out", out);
  g.out = out;
  if (common.seed) g.seed = *common.seed;
  if (!common.out.empty()) g.out = common.out;
  if (frames) g.scene.n_frames = *frames;

  const DatasetManifest m = generate_data(g);
  std::printf("wrote %d frames (%dx%d) to %s\n", m.frame_count, m.height, m.width,
              g.out.string().c_str());
  return 0;
}

int run_make_gt(const CommonFlags& common, const std::string& data, const std::string& tau,
                const std::string& patch, const std::optional<int>& window,
                const std::string& style) {
  const json j = load_config_file(common.config);
  GtJobConfig g;
  std::string data_s, out_s, style_s = "ours";
  take(j, "data", data_s);
  take(j, "out", out_s);
  take(j, "tau", g.gt.tau);
  take(j, "window", g.window);
  take(j, "style", style_s);
  if (j.contains("patch_w") || j.contains("patch_h")) {
    take(j, "patch_w", g.gt.patch_w);
    take(j, "patch_h", g.gt.patch_h);
    g.patch_explicit = true;
  }
  if (!data.empty()) data_s = data;
  if (!common.out.empty()) out_s = common.out;
  if (!tau.empty()) g.gt.tau = std::stod(tau);
  if (!patch.empty()) {
    const auto wh = parse_patch(patch);
    g.gt.patch_w = wh.first;
    g.gt.patch_h = wh.second;
    g.patch_explicit = true;
  }
  if (window) g.window = *window;
  if (!style.empty()) style_s = style;
  if (style_s == "fixed-patch")
    g.gt.fixed_patch = true;
  else if (style_s != "ours")
    throw ConfigError("--gt-style must be ours|fixed-patch");
  g.data = data_s;
  g.out = out_s;

  const GtManifest m = make_gt(g);
  std::printf("wrote ground truth for %d frames to %s (tau=%g, patch=%dx%d, window=%d, style=%s)\n",
              m.frame_count, g.out.string().c_str(), m.tau, m.patch_w, m.patch_h, m.window,
              m.style.c_str());
  return 0;
}

int run_train(const CommonFlags& common, const std::string& data, const std::string& gt,
              const std::string& supervise) {
  json j = load_config_file(common.config);
  TrainConfig cfg = train_config_from_json(j.dump());
  if (common.seed) cfg.seed = *common.seed;
  if (!common.out.empty()) cfg.out = common.out;
  if (!data.empty()) cfg.data = data;
  if (!gt.empty()) cfg.gt = gt;
  if (!supervise.empty()) cfg.supervise = supervise;
  cfg.validate();

  const RunArtifact art = train(cfg);
  std::printf("trained %d steps: loss %.6g -> %.6g, mae@80m %.6g\n", art.steps_run,
              art.initial_loss, art.final_loss, art.final_mae80);
  std::printf("checkpoint: %s\n", art.checkpoint.string().c_str());
  return 0;
}

int run_evaluate(const CommonFlags& common, const std::string& checkpoint, const std::string& data,
                 const std::vector<double>& caps, const std::string& split) {
  const json j = load_config_file(common.config);
  std::string ckpt_s, data_s, split_s = "all";
  std::vector<double> caps_v = {50.0, 70.0, 80.0};
  take(j, "checkpoint", ckpt_s);
  take(j, "data", data_s);
  take(j, "caps", caps_v);
  take(j, "split", split_s);
  std::string out_s;
  take(j, "out", out_s);
  if (!checkpoint.empty()) ckpt_s = checkpoint;
  if (!data.empty()) data_s = data;
  if (!caps.empty()) caps_v = caps;
  if (!split.empty()) split_s = split;
  if (!common.out.empty()) out_s = common.out;
  if (ckpt_s.empty() || data_s.empty())
    throw ConfigError("evaluate needs --checkpoint and --data");

  const EvalResult res = evaluate(ckpt_s, data_s, caps_v, split_s);
  std::fputs(res.markdown.c_str(), stdout);
  if (!out_s.empty()) {
    fs::create_directories(out_s);
    std::ofstream(fs::path(out_s) / "metrics.csv", std::ios::binary) << res.csv;
    std::ofstream(fs::path(out_s) / "metrics.md", std::ios::binary) << res.markdown;
    std::printf("wrote %s/metrics.{csv,md}\n", out_s.c_str());
  }
  return 0;
}

int run_ablate(const CommonFlags& common, const std::vector<std::string>& variants) {
  const json j = load_config_file(common.config);
  AblateConfig cfg;
  take(j, "seed", cfg.seed);
  take(j, "frames", cfg.frames);
  take(j, "epochs", cfg.epochs);
  take(j, "batch", cfg.batch);
  take(j, "height", cfg.height);
  take(j, "width", cfg.width);
  take(j, "lr", cfg.lr);
  take(j, "variants", cfg.variants);
  std::string out_s;
  take(j, "out", out_s);
  if (common.seed) cfg.seed = *common.seed;
  if (!common.out.empty()) out_s = common.out;
  if (!variants.empty()) cfg.variants = variants;
  if (out_s.empty()) throw ConfigError("ablate needs --out");
  cfg.out = out_s;

  // Typos in --variant should fail fast rather than burn a training run.
  const auto known = ablation_variants();
  for (const auto& v : cfg.variants)
    if (std::find(known.begin(), known.end(), v) == known.end())
      throw ConfigError("unknown ablation variant '" + v + "'");

  const AblationResult res = ablate(cfg);
  std::fputs(res.markdown.c_str(), stdout);
  std::printf("wrote %s/ablation.{csv,md,json}\n", out_s.c_str());
  for (const auto& row : res.rows)
    if (row.failed) std::fprintf(stderr, "variant %s failed: %s\n", row.name.c_str(),
                                 row.error.c_str());
  return 0;
}

int run_infer(const CommonFlags& common, const std::string& checkpoint, const std::string& data,
              const std::optional<int>& frame) {
  const json j = load_config_file(common.config);
  std::string ckpt_s, data_s, out_s;
  int frame_i = 0;
  take(j, "checkpoint", ckpt_s);
  take(j, "data", data_s);
  take(j, "frame", frame_i);
  take(j, "out", out_s);
  if (!checkpoint.empty()) ckpt_s = checkpoint;
  if (!data.empty()) data_s = data;
  if (frame) frame_i = *frame;
  if (!common.out.empty()) out_s = common.out;
  if (ckpt_s.empty() || data_s.empty() || out_s.empty())
    throw ConfigError("infer needs --checkpoint, --data and --out");

  infer(ckpt_s, data_s, frame_i, out_s);
  std::printf("wrote depth and confidence grids with previews to %s\n", out_s.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"radar-camera depth fusion pipeline"};
  app.require_subcommand(1);

  CommonFlags common;
  std::string data, gt, checkpoint, tau, patch, style, supervise, split;
  std::optional<int> frames, window, frame;
  std::vector<double> caps;
  std::vector<std::string> variants;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "json config file");
    sub->add_option("--seed", common.seed, "rng seed override");
    sub->add_option("--out", common.out, "output path override");
  };

  CLI::App* gen = app.add_subcommand("generate-data", "render a synthetic dataset");
  add_common(gen);
  gen->add_option("--frames", frames, "frame count override");

  CLI::App* mkgt = app.add_subcommand("make-gt", "build accumulated depth and confidence GT");
  add_common(mkgt);
  mkgt->add_option("--data", data, "dataset directory");
  mkgt->add_option("--tau", tau, "confidence depth tolerance (meters)");
  mkgt->add_option("--patch", patch, "noise patch WxH, e.g. 16x16");
  mkgt->add_option("--window", window, "accumulation half-window (frames)");
  mkgt->add_option("--gt-style", style, "ours|fixed-patch");

  CLI::App* tr = app.add_subcommand("train", "train the two-stage network");
  add_common(tr);
  tr->add_option("--data", data, "dataset directory");
  tr->add_option("--gt", gt, "ground-truth directory");
  tr->add_option("--supervise", supervise, "densified|raw");

  CLI::App* ev = app.add_subcommand("evaluate", "evaluate a checkpoint against lidar");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file");
  ev->add_option("--data", data, "dataset directory");
  ev->add_option("--caps", caps, "evaluation distance caps")->delimiter(',');
  ev->add_option("--split", split, "all|train|val");

  CLI::App* ab = app.add_subcommand("ablate", "train and evaluate the standard variants");
  add_common(ab);
  ab->add_option("--variant", variants, "restrict to these variants")->delimiter(',');

  CLI::App* in = app.add_subcommand("infer", "run one frame and write depth maps");
  add_common(in);
  in->add_option("--checkpoint", checkpoint, "checkpoint file");
  in->add_option("--data", data, "dataset directory");
  in->add_option("--frame", frame, "frame index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_generate(common, frames);
    if (mkgt->parsed()) return run_make_gt(common, data, tau, patch, window, style);
    if (tr->parsed()) return run_train(common, data, gt, supervise);
    if (ev->parsed()) return run_evaluate(common, checkpoint, data, caps, split);
    if (ab->parsed()) return run_ablate(common, variants);
    if (in->parsed()) return run_infer(common, checkpoint, data, frame);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 2;  // no subcommand matched (require_subcommand should prevent this)
}
