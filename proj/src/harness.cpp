#include "cafnet/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "cafnet/common.hpp"
#include "cafnet/losses.hpp"

namespace cafnet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("short write on " + p.string());
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Pipe-delimited table with columns padded to their widest cell.
std::string markdown_table(const std::vector<std::string>& header,
                           const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c)
      width[c] = std::max(width[c], r[c].size());
  const auto emit = [&](const std::vector<std::string>& cells) {
    std::string line = "|";
    for (std::size_t c = 0; c < width.size(); ++c) {
      std::string cell = c < cells.size() ? cells[c] : "";
      cell.resize(width[c], ' ');
      line += " " + cell + " |";
    }
    return line + "\n";
  };
  std::string out = emit(header);
  std::string sep = "|";
  for (std::size_t c = 0; c < width.size(); ++c) sep += " " + std::string(width[c], '-') + " |";
  out += sep + "\n";
  for (const auto& r : rows) out += emit(r);
  return out;
}

Tensor crop_grid(const Tensor& g, int y0, int x0, int ch, int cw) {
  if (g.ndim() == 2) {
    Tensor out({ch, cw});
    for (int i = 0; i < ch; ++i)
      for (int j = 0; j < cw; ++j) out.at(i, j) = g.at(y0 + i, x0 + j);
    return out;
  }
  Tensor out({g.dim(0), ch, cw});
  for (int c = 0; c < g.dim(0); ++c)
    for (int i = 0; i < ch; ++i)
      for (int j = 0; j < cw; ++j) out.at(c, i, j) = g.at(c, y0 + i, x0 + j);
  return out;
}

Tensor as_hw(const Tensor& chw) {  // {1,H,W} -> {H,W} view copy
  return Tensor({chw.dim(1), chw.dim(2)}, chw.raw());
}

// First-order adaptive minimizer (exponential moving averages of the gradient
// and its square, bias-corrected). Deterministic: fixed parameter order.
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Tensor> m, v;
  long t = 0;

  void init(const ad::ParamSet& ps) {
    for (const auto& e : ps.entries()) {
      m.emplace_back(e.value.shape());
      v.emplace_back(e.value.shape());
    }
  }

  void step(ad::ParamSet& ps, double lr, double grad_scale) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    auto& es = ps.entries();
    for (std::size_t i = 0; i < es.size(); ++i) {
      Tensor& val = es[i].value;
      const Tensor& grad = es[i].grad;
      for (std::size_t k = 0; k < val.size(); ++k) {
        const double g = grad[k] * grad_scale;
        m[i][k] = beta1 * m[i][k] + (1.0 - beta1) * g;
        v[i][k] = beta2 * v[i][k] + (1.0 - beta2) * g * g;
        val[k] -= lr * (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + eps);
      }
    }
  }
};

std::vector<int> split_ids(const DatasetManifest& m, const std::string& split) {
  std::vector<int> ids;
  if (split == "all") {
    for (int i = 0; i < m.frame_count; ++i) ids.push_back(i);
  } else if (split == "train") {
    ids = m.train_ids;
  } else if (split == "val") {
    ids = m.val_ids;
  } else {
    throw ConfigError("unknown split '" + split + "' (expected all|train|val)");
  }
  for (int id : ids)
    if (id < 0 || id >= m.frame_count) throw DataError("split references frame out of range");
  return ids;
}

EvalResult eval_frames(CafNet& net, const Dataset& ds, const std::vector<int>& ids,
                       const std::vector<double>& caps) {
  if (caps.empty()) throw ConfigError("evaluate: empty cap list");
  for (double c : caps)
    if (!(c > 0.0)) throw ConfigError("evaluate: caps must be positive");
  if (ids.empty()) throw DataError("evaluate: empty frame selection");

  std::vector<MetricsAccumulator> acc;
  acc.reserve(caps.size());
  for (double c : caps) acc.emplace_back(c);

  for (int id : ids) {
    const Frame& f = ds.frames[static_cast<std::size_t>(id)];
    const Tensor radar = build_radar_image(f);
    ad::Tape tape;
    CafNet::Forward fwd = net.forward(tape, f.image, radar);
    const Tensor pred = as_hw(tape.value(fwd.df));
    for (auto& a : acc) a.add(pred, f.lidar);
  }

  EvalResult res;
  std::string csv = MetricsReport::csv_header() + "\n";
  std::vector<std::vector<std::string>> md_rows;
  for (std::size_t c = 0; c < caps.size(); ++c) {
    EvalRow row;
    row.cap = caps[c];
    row.empty = acc[c].empty();
    if (!row.empty) row.report = acc[c].finalize();
    row.report.max_distance = caps[c];
    if (row.empty) {
      csv += fmt17(caps[c]) + ",,,,,,,,,0\n";
      md_rows.push_back({fmt6(caps[c]), "-", "-", "-", "-", "-", "-", "-", "-", "0"});
    } else {
      csv += row.report.csv_row() + "\n";
      const MetricsReport& r = row.report;
      md_rows.push_back({fmt6(r.max_distance), fmt6(r.mae), fmt6(r.rmse), fmt6(r.absrel),
                         fmt6(r.log10), fmt6(r.rmselog), fmt6(r.delta1), fmt6(r.delta2),
                         fmt6(r.delta3), std::to_string(r.n_valid)});
    }
    res.rows.push_back(std::move(row));
  }
  res.csv = std::move(csv);
  res.markdown = markdown_table(
      {"max_dist", "mae", "rmse", "absrel", "log10", "rmselog", "d1", "d2", "d3", "n_valid"},
      md_rows);
  return res;
}

double train_set_mae(CafNet& net, const Dataset& ds, const std::vector<int>& ids, double cap) {
  MetricsAccumulator acc(cap);
  for (int id : ids) {
    const Frame& f = ds.frames[static_cast<std::size_t>(id)];
    const Tensor radar = build_radar_image(f);
    ad::Tape tape;
    CafNet::Forward fwd = net.forward(tape, f.image, radar);
    acc.add(as_hw(tape.value(fwd.df)), f.lidar);
  }
  if (acc.empty()) throw DataError("train-set evaluation has no valid pixels");
  return acc.finalize().mae;
}

}  // namespace

// ---- helpers ------------------------------------------------------------------

Tensor flip_grid(const Tensor& grid) {
  if (grid.ndim() == 2) {
    Tensor out(grid.shape());
    const int h = grid.dim(0), w = grid.dim(1);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at(i, j) = grid.at(i, w - 1 - j);
    return out;
  }
  if (grid.ndim() == 3) {
    Tensor out(grid.shape());
    const int c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
    for (int k = 0; k < c; ++k)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) out.at(k, i, j) = grid.at(k, i, w - 1 - j);
    return out;
  }
  throw ConfigError("flip_grid expects a {H,W} or {C,H,W} grid");
}

void scale_patch_to(GtConfig& gt, int height, int width) {
  gt.patch_w = std::max(1, width / 8);    // 16 at width 128
  gt.patch_h = std::max(1, height / 4);   // 16 at height 64
}

std::uint64_t dataset_hash(const fs::path& data) {
  const fs::path mp = data / "manifest.json";
  const std::string manifest = read_bytes(mp);
  std::uint64_t h = fnv1a64(manifest.data(), manifest.size());
  json m = json::parse(manifest, nullptr, false);
  if (m.is_discarded() || !m.contains("frame_count"))
    throw DataError("dataset manifest unreadable: " + mp.string());
  const int n = m.at("frame_count").get<int>();
  char name[24];
  for (int i = 0; i < n; ++i) {
    std::snprintf(name, sizeof name, "frame_%06d", i);
    for (const char* file : {"image.raw", "lidar.raw", "radar.csv", "boxes.csv", "meta.json"}) {
      const std::string bytes = read_bytes(data / name / file);
      h = fnv1a64(bytes.data(), bytes.size(), h);
    }
  }
  return h;
}

// ---- generate-data ---------------------------------------------------------------

DatasetManifest generate_data(const GenerateConfig& config) {
  config.scene.validate();
  if (config.out.empty()) throw ConfigError("generate-data: output directory required");
  if (!(config.val_fraction >= 0.0 && config.val_fraction < 1.0))
    throw ConfigError("generate-data: val_fraction must be in [0, 1)");

  const std::vector<Frame> frames = generate_scene(config.scene, config.seed);
  DatasetManifest m;
  m.version = 1;
  m.seed = config.seed;
  m.frame_count = static_cast<int>(frames.size());
  m.height = config.scene.height;
  m.width = config.scene.width;
  int n_val = static_cast<int>(std::llround(config.val_fraction * m.frame_count));
  n_val = std::min(n_val, m.frame_count - 1);
  for (int i = 0; i < m.frame_count - n_val; ++i) m.train_ids.push_back(i);
  for (int i = m.frame_count - n_val; i < m.frame_count; ++i) m.val_ids.push_back(i);
  save_dataset(frames, m, config.out);
  return m;
}

// ---- make-gt ----------------------------------------------------------------------

GtManifest make_gt(const GtJobConfig& config) {
  if (config.out.empty()) throw ConfigError("make-gt: output directory required");
  if (config.window < 0) throw ConfigError("make-gt: window must be >= 0");

  const Dataset ds = load_dataset(config.data);
  GtConfig g = config.gt;
  if (!config.patch_explicit) scale_patch_to(g, ds.manifest.height, ds.manifest.width);
  g.validate();

  std::vector<FrameGt> out;
  out.reserve(ds.frames.size());
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    FrameGt fg;
    fg.dacc = accumulate_depth(ds.frames, static_cast<int>(i), config.window, true);
    fg.dacc_raw = accumulate_depth(ds.frames, static_cast<int>(i), config.window, false);
    fg.conf = build_confidence_gt(ds.frames[i], fg.dacc, g);
    out.push_back(std::move(fg));
  }

  GtManifest m;
  m.version = 1;
  m.frame_count = static_cast<int>(out.size());
  m.tau = g.tau;
  m.patch_w = g.patch_w;
  m.patch_h = g.patch_h;
  m.window = config.window;
  m.style = g.fixed_patch ? "fixed-patch" : "ours";
  save_gt(out, m, config.out);
  return m;
}

// ---- train config ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (data.empty() || gt.empty() || out.empty())
    throw ConfigError("train: data, gt and out paths are required");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (!(decay_power >= 0.0)) throw ConfigError("train: decay_power must be >= 0");
  if (supervise != "densified" && supervise != "raw")
    throw ConfigError("train: supervise must be densified|raw");
  if (!(loss.m >= 0.0)) throw ConfigError("train: loss weight m must be >= 0");
  if (!(loss.lambda >= 0.0)) throw ConfigError("train: loss weight lambda must be >= 0");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (eval_every < 0) throw ConfigError("train: eval_every must be >= 0");
  if (!(stop_mae >= 0.0)) throw ConfigError("train: stop_mae must be >= 0");
  if (!(stop_loss_frac >= 0.0 && stop_loss_frac <= 1.0))
    throw ConfigError("train: stop_loss_frac must be in [0, 1]");
  if (crop) {
    const int div = 1 << model.scales;
    if (crop->first < div || crop->second < div || crop->first % div != 0 ||
        crop->second % div != 0)
      throw ConfigError("train: crop dims must be positive multiples of " + std::to_string(div));
  }
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("train config: invalid json");
  TrainConfig c;
  try {
    if (j.contains("data")) c.data = j.at("data").get<std::string>();
    if (j.contains("gt")) c.gt = j.at("gt").get<std::string>();
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch")) c.batch = j.at("batch").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("decay_power")) c.decay_power = j.at("decay_power").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("flip")) c.flip = j.at("flip").get<bool>();
    if (j.contains("crop") && !j.at("crop").is_null()) {
      const auto v = j.at("crop").get<std::vector<int>>();
      if (v.size() != 2) throw ConfigError("train config: crop must be [height, width]");
      c.crop = {v[0], v[1]};
    }
    if (j.contains("supervise")) c.supervise = j.at("supervise").get<std::string>();
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      if (l.contains("m")) c.loss.m = l.at("m").get<double>();
      if (l.contains("lambda")) c.loss.lambda = l.at("lambda").get<double>();
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model").dump());
    if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<int>();
    if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<int>();
    if (j.contains("stop_mae")) c.stop_mae = j.at("stop_mae").get<double>();
    if (j.contains("stop_loss_frac")) c.stop_loss_frac = j.at("stop_loss_frac").get<double>();
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["data"] = c.data.string();
  j["gt"] = c.gt.string();
  j["out"] = c.out.string();
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["decay_power"] = c.decay_power;
  j["seed"] = c.seed;
  j["flip"] = c.flip;
  if (c.crop)
    j["crop"] = std::vector<int>{c.crop->first, c.crop->second};
  else
    j["crop"] = nullptr;
  j["supervise"] = c.supervise;
  j["loss"] = {{"m", c.loss.m}, {"lambda", c.loss.lambda}};
  j["model"] = json::parse(model_config_to_json(c.model));
  j["max_steps"] = c.max_steps;
  j["eval_every"] = c.eval_every;
  j["stop_mae"] = c.stop_mae;
  j["stop_loss_frac"] = c.stop_loss_frac;
  return j.dump(2);
}

// ---- train ------------------------------------------------------------------------

RunArtifact train(const TrainConfig& config_in) {
  const auto wall_start = std::chrono::steady_clock::now();
  TrainConfig cfg = config_in;
  cfg.validate();

  const Dataset ds = load_dataset(cfg.data);
  const GtData gt = load_gt(cfg.gt);
  if (gt.frames.size() != ds.frames.size())
    throw DataError("ground-truth frame count does not match the dataset");

  const int data_h = ds.manifest.height, data_w = ds.manifest.width;
  int in_h = data_h, in_w = data_w;
  if (cfg.crop) {
    if (cfg.crop->first > data_h || cfg.crop->second > data_w)
      throw ConfigError("train: crop exceeds the frame size");
    in_h = cfg.crop->first;
    in_w = cfg.crop->second;
  }
  cfg.model.height = in_h;
  cfg.model.width = in_w;
  cfg.model.validate();
  if (cfg.model.radar_channels != kRadarChannels)
    throw ConfigError("train: model radar_channels must match the projected radar image (" +
                      std::to_string(static_cast<int>(kRadarChannels)) + ")");

  const std::vector<int> ids = split_ids(ds.manifest, "train");
  if (ids.empty()) throw DataError("train: the dataset has no training frames");

  struct Sample {
    Tensor image, radar, target, conf;
  };
  std::vector<Sample> samples;
  samples.reserve(ids.size());
  for (int id : ids) {
    const Frame& f = ds.frames[static_cast<std::size_t>(id)];
    const FrameGt& fg = gt.frames[static_cast<std::size_t>(id)];
    Sample s;
    s.image = f.image;
    s.radar = build_radar_image(f);
    s.target = cfg.supervise == "densified" ? fg.dacc : fg.dacc_raw;
    s.conf = fg.conf;
    if (s.image.ndim() != 3 || s.image.dim(1) != data_h || s.image.dim(2) != data_w)
      throw DataError("train: frame image dims disagree with the manifest");
    if (s.target.ndim() != 2 || s.target.dim(0) != data_h || s.target.dim(1) != data_w ||
        !s.conf.same_shape(s.target))
      throw DataError("train: ground-truth grid dims disagree with the dataset");
    samples.push_back(std::move(s));
  }

  CafNet net(cfg.model, cfg.seed);
  Adam opt;
  opt.init(net.params());

  const int n = static_cast<int>(samples.size());
  const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const long total_steps =
      cfg.max_steps > 0 ? cfg.max_steps : static_cast<long>(cfg.epochs) * steps_per_epoch;
  const long max_epochs = cfg.max_steps > 0 ? (total_steps + steps_per_epoch - 1) / steps_per_epoch
                                            : cfg.epochs;

  fs::create_directories(cfg.out);
  std::string log = "step,lr,l_depth,l_smooth,l_conf,total\n";

  Rng aug_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<int> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  net.params().zero_grad();
  long step = 0;
  double initial_loss = 0.0, final_loss = 0.0;
  std::string stop_reason = "completed";

  for (long epoch = 0; epoch < max_epochs && step < total_steps; ++epoch) {
    for (int i = n - 1; i > 0; --i)  // Fisher-Yates over the frame order
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(aug_rng.uniform_int(0, i))]);

    for (int start = 0; start < n && step < total_steps; start += cfg.batch) {
      const int bs = std::min(cfg.batch, n - start);
      double sum_ld = 0.0, sum_ls = 0.0, sum_lc = 0.0, sum_total = 0.0;

      for (int bi = 0; bi < bs; ++bi) {
        const Sample& s = samples[static_cast<std::size_t>(order[static_cast<std::size_t>(start + bi)])];
        Tensor image = s.image, radar = s.radar, target = s.target, conf = s.conf;
        if (cfg.flip && aug_rng.bernoulli(0.5)) {
          image = flip_grid(image);
          radar = flip_grid(radar);
          target = flip_grid(target);
          conf = flip_grid(conf);
        }
        if (cfg.crop) {
          const int y0 = aug_rng.uniform_int(0, data_h - in_h);
          const int x0 = aug_rng.uniform_int(0, data_w - in_w);
          image = crop_grid(image, y0, x0, in_h, in_w);
          radar = crop_grid(radar, y0, x0, in_h, in_w);
          target = crop_grid(target, y0, x0, in_h, in_w);
          conf = crop_grid(conf, y0, x0, in_h, in_w);
        }

        ad::Tape tape;
        CafNet::Forward fwd = net.forward(tape, image, radar);
        ad::Var l_depth = depth_loss_graph(tape, fwd.dc, fwd.df, target, cfg.loss.m);
        ad::Var l_smooth = smoothness_loss_graph(tape, fwd.df, image);
        ad::Var objective;
        double lc_val = 0.0;
        if (cfg.model.use_confidence) {
          ad::Var l_conf = confidence_loss_graph(tape, fwd.conf, conf);
          lc_val = tape.value(l_conf)[0];
          objective = ad::add(tape, ad::add(tape, l_depth, l_conf),
                              ad::scale(tape, l_smooth, cfg.loss.lambda));
        } else {
          objective = ad::add(tape, l_depth, ad::scale(tape, l_smooth, cfg.loss.lambda));
        }
        const double total = tape.value(objective)[0];
        if (!std::isfinite(total))
          throw NumericError("non-finite loss at step " + std::to_string(step));
        tape.backward(objective);

        sum_ld += tape.value(l_depth)[0];
        sum_ls += tape.value(l_smooth)[0];
        sum_lc += lc_val;
        sum_total += total;
      }

      const double inv = 1.0 / bs;
      const double lr_t =
          cfg.lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps),
                            cfg.decay_power);
      opt.step(net.params(), lr_t, inv);
      net.params().zero_grad();

      const double mean_total = sum_total * inv;
      log += std::to_string(step) + "," + fmt17(lr_t) + "," + fmt17(sum_ld * inv) + "," +
             fmt17(sum_ls * inv) + "," + fmt17(sum_lc * inv) + "," + fmt17(mean_total) + "\n";
      if (step == 0) initial_loss = mean_total;
      final_loss = mean_total;
      ++step;

      if (cfg.eval_every > 0 && step % cfg.eval_every == 0 &&
          (cfg.stop_mae > 0.0 || cfg.stop_loss_frac > 0.0)) {
        const bool mae_ok =
            cfg.stop_mae <= 0.0 || train_set_mae(net, ds, ids, 80.0) < cfg.stop_mae;
        const bool loss_ok =
            cfg.stop_loss_frac <= 0.0 || final_loss < cfg.stop_loss_frac * initial_loss;
        if (mae_ok && loss_ok) {
          stop_reason = "early-stop at step " + std::to_string(step);
          goto done;
        }
      }
    }
  }
done:

  write_text(cfg.out / "loss_log.csv", log);

  const EvalResult ev = eval_frames(net, ds, ids, {50.0, 70.0, 80.0});
  write_text(cfg.out / "metrics.csv", ev.csv);
  write_text(cfg.out / "metrics.md", ev.markdown);

  RunArtifact art;
  art.checkpoint = cfg.out / "checkpoint.bin";
  art.loss_log = cfg.out / "loss_log.csv";
  art.metrics_csv = cfg.out / "metrics.csv";
  art.steps_run = static_cast<int>(step);
  art.initial_loss = initial_loss;
  art.final_loss = final_loss;
  art.final_mae80 = ev.rows.back().empty ? -1.0 : ev.rows.back().report.mae;
  net.save(art.checkpoint);

  const auto wall_end = std::chrono::steady_clock::now();
  art.wall_seconds = std::chrono::duration<double>(wall_end - wall_start).count();

  json run;
  run["command"] = "train";
  run["optimizer"] = {{"name", "adam"}, {"beta1", opt.beta1}, {"beta2", opt.beta2},
                      {"eps", opt.eps}, {"lr", cfg.lr}, {"decay_power", cfg.decay_power}};
  run["seed"] = cfg.seed;
  {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(dataset_hash(cfg.data)));
    run["dataset_hash"] = std::string(buf);
  }
  run["steps_run"] = art.steps_run;
  run["total_planned"] = total_steps;
  run["initial_loss"] = initial_loss;
  run["final_loss"] = final_loss;
  run["stop_reason"] = stop_reason;
  run["wall_seconds"] = art.wall_seconds;
  run["config"] = json::parse(train_config_to_json(cfg));
  write_text(cfg.out / "run.json", run.dump(2) + "\n");
  return art;
}

// ---- evaluate -----------------------------------------------------------------------

EvalResult evaluate(const fs::path& checkpoint, const fs::path& data,
                    const std::vector<double>& caps, const std::string& split) {
  CafNet net = CafNet::load(checkpoint);
  const Dataset ds = load_dataset(data);
  const int div = 1 << net.config().scales;
  if (ds.manifest.height % div != 0 || ds.manifest.width % div != 0)
    throw ConfigError("evaluate: frame dims " + std::to_string(ds.manifest.height) + "x" +
                      std::to_string(ds.manifest.width) + " are not divisible by " +
                      std::to_string(div) + "; pad or crop the input");
  return eval_frames(net, ds, split_ids(ds.manifest, split), caps);
}

// ---- ablate --------------------------------------------------------------------------

std::vector<std::string> ablation_variants() {
  return {"ours",          "gt-fixed-patch", "gt-fixed-patch-large",
          "no-rm",         "no-scm",         "no-confidence",
          "fusion-gf",     "fusion-add",     "fusion-concat"};
}

AblationResult ablate(const AblateConfig& config) {
  if (config.out.empty()) throw ConfigError("ablate: output directory required");
  if (config.frames < 2) throw ConfigError("ablate: at least 2 frames required");
  if (config.epochs < 1 || config.batch < 1) throw ConfigError("ablate: epochs and batch >= 1");

  GenerateConfig gen;
  gen.scene.height = config.height;
  gen.scene.width = config.width;
  gen.scene.n_objects = 3;
  gen.scene.n_frames = config.frames;
  gen.seed = config.seed;
  gen.val_fraction = 0.0;  // micro run: train == eval set
  gen.out = config.out / "data";
  generate_data(gen);

  const auto gt_dir = [&](const std::string& name) { return config.out / ("gt-" + name); };
  {
    GtJobConfig g;
    g.data = gen.out;
    g.window = 1;
    g.out = gt_dir("ours");
    make_gt(g);
    g.gt.fixed_patch = true;
    g.out = gt_dir("fixed");
    make_gt(g);
    GtConfig large;
    large.fixed_patch = true;
    scale_patch_to(large, config.height, config.width);
    large.patch_w *= 2;
    large.patch_h *= 2;
    g.gt = large;
    g.patch_explicit = true;
    g.out = gt_dir("fixed-large");
    make_gt(g);
  }

  AblationResult res;
  res.dataset_hash = dataset_hash(gen.out);
  const std::vector<std::string> names =
      config.variants.empty() ? ablation_variants() : config.variants;

  for (const std::string& name : names) {
    AblationRow row;
    row.name = name;
    try {
      TrainConfig tc;
      tc.data = gen.out;
      tc.gt = gt_dir("ours");
      tc.out = config.out / "rows" / name;
      tc.epochs = config.epochs;
      tc.batch = config.batch;
      tc.lr = config.lr;
      tc.seed = config.seed;
      tc.flip = false;

      if (name == "ours") {
      } else if (name == "gt-fixed-patch") {
        tc.gt = gt_dir("fixed");
      } else if (name == "gt-fixed-patch-large") {
        tc.gt = gt_dir("fixed-large");
      } else if (name == "no-rm") {
        tc.model.use_rm = false;
      } else if (name == "no-scm") {
        tc.model.use_scm = false;
      } else if (name == "no-confidence") {
        tc.model.use_confidence = false;
      } else if (name == "fusion-gf") {
        tc.model.fusion = "gf";
      } else if (name == "fusion-add") {
        tc.model.fusion = "add";
        tc.model.radar_widths = tc.model.image_widths;
      } else if (name == "fusion-concat") {
        tc.model.fusion = "concat";
      } else {
        throw ConfigError("ablate: unknown variant '" + name + "'");
      }

      const RunArtifact art = train(tc);
      const EvalResult ev = evaluate(art.checkpoint, gen.out, {80.0}, "all");
      if (ev.rows.at(0).empty) throw DataError("ablate: empty 80 m evaluation row");
      row.report = ev.rows.at(0).report;
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    res.rows.push_back(std::move(row));
  }

  std::string csv = "variant,mae,rmse,absrel,d1,status\n";
  std::vector<std::vector<std::string>> md_rows;
  json j;
  j["seed"] = config.seed;
  {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(res.dataset_hash));
    j["dataset_hash"] = std::string(buf);
  }
  j["rows"] = json::array();
  for (const AblationRow& r : res.rows) {
    json jr;
    jr["variant"] = r.name;
    jr["seed"] = config.seed;
    jr["dataset_hash"] = j["dataset_hash"];
    if (r.failed) {
      csv += r.name + ",,,,,failed\n";
      md_rows.push_back({r.name, "-", "-", "-", "-", "failed"});
      jr["status"] = "failed";
      jr["error"] = r.error;
    } else {
      csv += r.name + "," + fmt17(r.report.mae) + "," + fmt17(r.report.rmse) + "," +
             fmt17(r.report.absrel) + "," + fmt17(r.report.delta1) + ",ok\n";
      md_rows.push_back({r.name, fmt6(r.report.mae), fmt6(r.report.rmse), fmt6(r.report.absrel),
                         fmt6(r.report.delta1), "ok"});
      jr["status"] = "ok";
      jr["mae"] = r.report.mae;
      jr["rmse"] = r.report.rmse;
      jr["absrel"] = r.report.absrel;
      jr["d1"] = r.report.delta1;
    }
    j["rows"].push_back(jr);
  }
  res.csv = std::move(csv);
  res.markdown = markdown_table({"variant", "mae", "rmse", "absrel", "d1", "status"}, md_rows);
  fs::create_directories(config.out);
  write_text(config.out / "ablation.csv", res.csv);
  write_text(config.out / "ablation.md", res.markdown);
  write_text(config.out / "ablation.json", j.dump(2) + "\n");
  return res;
}

// ---- infer ---------------------------------------------------------------------------

namespace {

void write_pgm(const fs::path& p, const Tensor& grid, double lo, double hi) {
  const int h = grid.dim(0), w = grid.dim(1);
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double v = (grid.at(i, j) - lo) / (hi - lo);
      v = std::min(1.0, std::max(0.0, v));
      const double scaled = std::nearbyint(v * 255.0);  // round half to even
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(scaled)));
    }
  write_text(p, bytes);
}

Tensor quantized_hw(const Tensor& chw) {
  Tensor out({chw.dim(1), chw.dim(2)});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize_f32(chw[i]);
  return out;
}

}  // namespace

void infer(const fs::path& checkpoint, const fs::path& data, int frame_index,
           const fs::path& out) {
  CafNet net = CafNet::load(checkpoint);
  const Dataset ds = load_dataset(data);
  if (frame_index < 0 || frame_index >= static_cast<int>(ds.frames.size()))
    throw DataError("infer: frame index " + std::to_string(frame_index) + " out of range [0, " +
                    std::to_string(ds.frames.size()) + ")");
  const Frame& f = ds.frames[static_cast<std::size_t>(frame_index)];
  const int div = 1 << net.config().scales;
  if (f.image.dim(1) % div != 0 || f.image.dim(2) % div != 0)
    throw ConfigError("infer: frame dims " + std::to_string(f.image.dim(1)) + "x" +
                      std::to_string(f.image.dim(2)) + " are not divisible by " +
                      std::to_string(div) + "; pad or crop the input");

  const Tensor radar = build_radar_image(f);
  ad::Tape tape;
  CafNet::Forward fwd = net.forward(tape, f.image, radar);

  fs::create_directories(out);
  const ModelConfig& c = net.config();
  const Tensor df = quantized_hw(tape.value(fwd.df));
  const Tensor dc = quantized_hw(tape.value(fwd.dc));
  save_grid(out / "df.raw", df);
  save_grid(out / "dc.raw", dc);
  write_pgm(out / "df.pgm", df, c.d_min, c.d_max);
  write_pgm(out / "dc.pgm", dc, c.d_min, c.d_max);
  if (fwd.conf.valid()) {
    const Tensor conf = quantized_hw(tape.value(fwd.conf));
    save_grid(out / "conf.raw", conf);
    write_pgm(out / "conf.pgm", conf, 0.0, 1.0);
  }
}

}  // namespace cafnet
