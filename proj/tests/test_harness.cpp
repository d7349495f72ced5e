#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cafnet/common.hpp"
#include "cafnet/dataset_io.hpp"
#include "cafnet/harness.hpp"
#include "cafnet/losses.hpp"
#include "cafnet/metrics.hpp"
#include "cafnet/model.hpp"
#include "cafnet/radar_gt.hpp"
#include "cafnet/scene.hpp"

using namespace cafnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("cafnet_test_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

// One scene rendered to disk; returns the dataset directory.
fs::path write_micro_dataset(const fs::path& root, int h, int w, int frames, std::uint64_t seed,
                             double val_fraction = 0.0) {
  GenerateConfig g;
  g.scene.height = h;
  g.scene.width = w;
  g.scene.n_objects = 2;
  g.scene.n_frames = frames;
  g.seed = seed;
  g.val_fraction = val_fraction;
  g.out = root / "data";
  generate_data(g);
  return g.out;
}

fs::path write_micro_gt(const fs::path& root, const fs::path& data) {
  GtJobConfig g;
  g.data = data;
  g.out = root / "gt";
  g.window = 1;
  make_gt(g);
  return g.out;
}

TrainConfig micro_train_config(const fs::path& data, const fs::path& gt, const fs::path& out) {
  TrainConfig tc;
  tc.data = data;
  tc.gt = gt;
  tc.out = out;
  tc.epochs = 2;
  tc.batch = 2;
  tc.lr = 1e-3;
  tc.seed = 11;
  tc.flip = true;
  return tc;
}

}  // namespace

TEST_CASE("generate-data writes a loadable dataset with a deterministic split") {
  TempDir tmp("harness_gen");
  GenerateConfig g;
  g.scene.height = 32;
  g.scene.width = 64;
  g.scene.n_objects = 2;
  g.scene.n_frames = 8;
  g.seed = 5;
  g.val_fraction = 0.25;
  g.out = tmp.path / "data";
  const DatasetManifest m = generate_data(g);

  CHECK(m.frame_count == 8);
  CHECK(m.train_ids == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(m.val_ids == std::vector<int>{6, 7});

  const Dataset ds = load_dataset(g.out);
  CHECK(ds.frames.size() == 8);
  CHECK(ds.manifest.height == 32);
  CHECK(ds.manifest.seed == 5);

  // Same seed, same bytes; different seed, different bytes.
  g.out = tmp.path / "data2";
  generate_data(g);
  CHECK(dataset_hash(tmp.path / "data") == dataset_hash(tmp.path / "data2"));
  g.seed = 6;
  g.out = tmp.path / "data3";
  generate_data(g);
  CHECK(dataset_hash(tmp.path / "data") != dataset_hash(tmp.path / "data3"));

  SUBCASE("invalid configs are rejected") {
    GenerateConfig bad = g;
    bad.val_fraction = 1.0;
    CHECK_THROWS_AS(generate_data(bad), ConfigError);
    bad = g;
    bad.out.clear();
    CHECK_THROWS_AS(generate_data(bad), ConfigError);
  }
}

TEST_CASE("make-gt scales the default patch with resolution and matches direct construction") {
  TempDir tmp("harness_gt");
  const fs::path data = write_micro_dataset(tmp.path, 32, 64, 4, 9);

  GtJobConfig j;
  j.data = data;
  j.out = tmp.path / "gt";
  j.window = 1;
  const GtManifest m = make_gt(j);
  CHECK(m.patch_w == 8);   // 64 / 8
  CHECK(m.patch_h == 8);   // 32 / 4
  CHECK(m.style == "ours");
  CHECK(m.window == 1);
  CHECK(m.frame_count == 4);

  // Frames agree bitwise with assembling the same ground truth by hand.
  const Dataset ds = load_dataset(data);
  const GtData gt = load_gt(j.out);
  GtConfig direct;
  direct.patch_w = 8;
  direct.patch_h = 8;
  for (int i = 0; i < 4; ++i) {
    const Tensor dacc = accumulate_depth(ds.frames, i, 1, true);
    const Tensor raw = accumulate_depth(ds.frames, i, 1, false);
    const auto& fg = gt.frames[static_cast<std::size_t>(i)];
    CHECK(tensors_equal(fg.dacc, dacc));
    CHECK(tensors_equal(fg.dacc_raw, raw));
    CHECK(tensors_equal(fg.conf, build_confidence_gt(ds.frames[static_cast<std::size_t>(i)], dacc,
                                                     direct)));
  }

  SUBCASE("explicit patch and fixed style are recorded") {
    GtJobConfig k = j;
    k.out = tmp.path / "gt2";
    k.gt.fixed_patch = true;
    k.gt.patch_w = 5;
    k.gt.patch_h = 3;
    k.patch_explicit = true;
    const GtManifest m2 = make_gt(k);
    CHECK(m2.patch_w == 5);
    CHECK(m2.patch_h == 3);
    CHECK(m2.style == "fixed-patch");
  }

  SUBCASE("negative window is rejected") {
    GtJobConfig k = j;
    k.window = -1;
    CHECK_THROWS_AS(make_gt(k), ConfigError);
  }
}

TEST_CASE("confidence GT construction commutes with horizontal mirroring") {
  const SceneConfig sc = [] {
    SceneConfig c;
    c.height = 64;
    c.width = 128;
    c.n_objects = 3;
    c.n_frames = 3;
    return c;
  }();
  const auto frames = generate_scene(sc, 31);
  for (int style = 0; style < 2; ++style) {
    GtConfig cfg;
    cfg.fixed_patch = style == 1;
    for (int i = 0; i < sc.n_frames; ++i) {
      const Tensor dacc = accumulate_depth(frames, i, 1, true);
      const Tensor direct =
          build_confidence_gt(mirror_frame(frames[static_cast<std::size_t>(i)]), flip_grid(dacc),
                              cfg);
      const Tensor flipped =
          flip_grid(build_confidence_gt(frames[static_cast<std::size_t>(i)], dacc, cfg));
      CHECK(tensors_equal(direct, flipped));
    }
  }
}

TEST_CASE("flip_grid reverses columns and is an involution") {
  Rng rng(3);
  Tensor g({3, 4, 6});
  for (auto& v : g.raw()) v = rng.uniform(-5.0, 5.0);
  const Tensor f = flip_grid(g);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 6; ++j) CHECK(f.at(c, i, j) == g.at(c, i, 5 - j));
  CHECK(tensors_equal(flip_grid(f), g));
  CHECK_THROWS_AS(flip_grid(Tensor({2, 2, 2, 2})), ConfigError);
}

TEST_CASE("train config json round-trips and validates") {
  TrainConfig c;
  c.data = "a";
  c.gt = "b";
  c.out = "c";
  c.epochs = 7;
  c.batch = 3;
  c.lr = 2e-4;
  c.seed = 99;
  c.flip = false;
  c.crop = {32, 64};
  c.supervise = "raw";
  c.loss.m = 0.25;
  c.loss.lambda = 1e-2;
  c.model.fusion = "concat";
  c.max_steps = 17;

  const TrainConfig r = train_config_from_json(train_config_to_json(c));
  CHECK(r.epochs == 7);
  CHECK(r.batch == 3);
  CHECK(r.lr == 2e-4);
  CHECK(r.seed == 99);
  CHECK(r.flip == false);
  REQUIRE(r.crop.has_value());
  CHECK(r.crop->first == 32);
  CHECK(r.crop->second == 64);
  CHECK(r.supervise == "raw");
  CHECK(r.loss.m == 0.25);
  CHECK(r.loss.lambda == 1e-2);
  CHECK(r.model.fusion == "concat");
  CHECK(r.max_steps == 17);

  c.crop.reset();
  const TrainConfig r2 = train_config_from_json(train_config_to_json(c));
  CHECK(!r2.crop.has_value());

  CHECK_THROWS_AS(train_config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(R"({"epochs": "ten"})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(
                      R"({"data":"a","gt":"b","out":"c","crop":[1,2,3]})"),
                  ConfigError);

  TrainConfig bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.supervise = "sometimes";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.crop = {15, 32};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.stop_loss_frac = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training writes artifacts, logs the schedule, and reproduces bitwise") {
  TempDir tmp("harness_train");
  const fs::path data = write_micro_dataset(tmp.path, 32, 64, 4, 13);
  const fs::path gt = write_micro_gt(tmp.path, data);

  TrainConfig tc = micro_train_config(data, gt, tmp.path / "run_a");
  tc.crop = {32, 48};  // exercise the crop rng path
  const RunArtifact a = train(tc);

  CHECK(a.steps_run == 4);  // 4 frames / batch 2 * 2 epochs
  CHECK(fs::exists(a.checkpoint));
  CHECK(fs::exists(a.loss_log));
  CHECK(fs::exists(a.metrics_csv));
  CHECK(fs::exists(tc.out / "metrics.md"));
  CHECK(fs::exists(tc.out / "run.json"));
  CHECK(std::isfinite(a.initial_loss));
  CHECK(std::isfinite(a.final_loss));
  CHECK(a.wall_seconds > 0.0);

  const auto log_lines = lines_of(slurp(a.loss_log));
  REQUIRE(log_lines.size() == 5);  // header + 4 steps
  CHECK(log_lines[0] == "step,lr,l_depth,l_smooth,l_conf,total");

  // The logged lr column follows lr * (1 - t/T)^p exactly.
  for (int t = 0; t < 4; ++t) {
    std::istringstream ss(log_lines[static_cast<std::size_t>(t + 1)]);
    std::string step_s, lr_s;
    std::getline(ss, step_s, ',');
    std::getline(ss, lr_s, ',');
    CHECK(step_s == std::to_string(t));
    const double want = tc.lr * std::pow(1.0 - t / 4.0, tc.decay_power);
    CHECK(std::stod(lr_s) == doctest::Approx(want).epsilon(1e-15));
  }
  CHECK(tc.lr * std::pow(1.0 - 4.0 / 4.0, tc.decay_power) == 0.0);  // schedule endpoint

  const auto metric_lines = lines_of(slurp(a.metrics_csv));
  REQUIRE(metric_lines.size() == 4);  // header + caps 50/70/80
  CHECK(metric_lines[0] == MetricsReport::csv_header());
  CHECK(metric_lines[1].substr(0, 3) == "50,");
  CHECK(metric_lines[3].substr(0, 3) == "80,");

  const auto md_lines = lines_of(slurp(tc.out / "metrics.md"));
  REQUIRE(md_lines.size() == 5);  // header + separator + 3 rows
  CHECK(md_lines[0].substr(0, 10) == "| max_dist");

  // run.json carries the optimizer, seed and dataset hash.
  const nlohmann::json run = nlohmann::json::parse(slurp(tc.out / "run.json"));
  CHECK(run.at("optimizer").at("name") == "adam");
  CHECK(run.at("seed").get<std::uint64_t>() == 11);
  CHECK(run.at("dataset_hash").get<std::string>().size() == 16);
  CHECK(run.at("steps_run").get<int>() == 4);
  CHECK_NOTHROW(train_config_from_json(run.at("config").dump()));

  SUBCASE("identical config and seed reproduce the logs bitwise") {
    TrainConfig tb = tc;
    tb.out = tmp.path / "run_b";
    train(tb);
    CHECK(slurp(a.loss_log) == slurp(tb.out / "loss_log.csv"));
    CHECK(slurp(a.metrics_csv) == slurp(tb.out / "metrics.csv"));
    CHECK(slurp(a.checkpoint) == slurp(tb.out / "checkpoint.bin"));

    TrainConfig td = tc;
    td.out = tmp.path / "run_c";
    td.seed = 12;
    train(td);
    CHECK(slurp(a.loss_log) != slurp(td.out / "loss_log.csv"));
  }

  SUBCASE("missing ground truth is a data error") {
    TrainConfig bad = tc;
    bad.gt = tmp.path / "nowhere";
    bad.out = tmp.path / "run_bad";
    CHECK_THROWS_AS(train(bad), DataError);
  }

  SUBCASE("oversized crop is a config error") {
    TrainConfig bad = tc;
    bad.crop = {32, 128};
    bad.out = tmp.path / "run_bad2";
    CHECK_THROWS_AS(train(bad), ConfigError);
  }
}

TEST_CASE("a non-finite supervision target aborts with the step index") {
  TempDir tmp("harness_nan");
  const fs::path data = write_micro_dataset(tmp.path, 32, 64, 2, 17);
  const fs::path gt = write_micro_gt(tmp.path, data);

  GtData g = load_gt(gt);
  g.frames[0].dacc.at(5, 5) = std::numeric_limits<double>::infinity();
  g.frames[1].dacc.at(5, 5) = std::numeric_limits<double>::infinity();
  save_gt(g.frames, g.manifest, gt);

  TrainConfig tc = micro_train_config(data, gt, tmp.path / "run");
  tc.flip = false;
  try {
    train(tc);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("early stopping halts once the thresholds are met") {
  TempDir tmp("harness_stop");
  const fs::path data = write_micro_dataset(tmp.path, 32, 64, 2, 19);
  const fs::path gt = write_micro_gt(tmp.path, data);

  TrainConfig tc = micro_train_config(data, gt, tmp.path / "run");
  tc.flip = false;
  tc.epochs = 50;
  tc.batch = 2;
  tc.eval_every = 1;
  tc.stop_mae = 1e9;        // immediately satisfied
  tc.stop_loss_frac = 1.0;  // any loss below the initial value qualifies
  const RunArtifact art = train(tc);
  CHECK(art.steps_run < 50);
  const nlohmann::json run = nlohmann::json::parse(slurp(tc.out / "run.json"));
  CHECK(run.at("stop_reason").get<std::string>().find("early-stop") == 0);
}

TEST_CASE("evaluate reports per-cap rows against single-frame lidar") {
  TempDir tmp("harness_eval");
  const fs::path data = write_micro_dataset(tmp.path, 32, 64, 3, 23);
  const fs::path gt = write_micro_gt(tmp.path, data);
  TrainConfig tc = micro_train_config(data, gt, tmp.path / "run");
  tc.epochs = 1;
  const RunArtifact art = train(tc);

  const EvalResult ev = evaluate(art.checkpoint, data, {50.0, 70.0, 80.0}, "all");
  REQUIRE(ev.rows.size() == 3);
  CHECK(ev.rows[0].cap == 50.0);
  CHECK(ev.rows[2].cap == 80.0);
  for (const auto& r : ev.rows) CHECK(!r.empty);

  // Same accumulation assembled by hand from the checkpoint.
  CafNet net = CafNet::load(art.checkpoint);
  const Dataset ds = load_dataset(data);
  MetricsAccumulator acc(70.0);
  for (const Frame& f : ds.frames) {
    ad::Tape t;
    auto fwd = net.forward(t, f.image, build_radar_image(f));
    const Tensor& df = t.value(fwd.df);
    acc.add(Tensor({df.dim(1), df.dim(2)}, df.raw()), f.lidar);
  }
  const MetricsReport want = acc.finalize();
  CHECK(ev.rows[1].report.mae == want.mae);
  CHECK(ev.rows[1].report.rmse == want.rmse);
  CHECK(ev.rows[1].report.delta1 == want.delta1);
  CHECK(ev.rows[1].report.n_valid == want.n_valid);

  // Determinism and structure.
  const EvalResult ev2 = evaluate(art.checkpoint, data, {50.0, 70.0, 80.0}, "all");
  CHECK(ev2.csv == ev.csv);
  CHECK(ev2.markdown == ev.markdown);
  CHECK(lines_of(ev.csv).size() == 4);
  CHECK(lines_of(ev.csv)[0] == MetricsReport::csv_header());

  SUBCASE("a cap below every depth yields an empty, non-fatal row") {
    const EvalResult e = evaluate(art.checkpoint, data, {0.5, 80.0}, "all");
    REQUIRE(e.rows.size() == 2);
    CHECK(e.rows[0].empty);
    CHECK(!e.rows[1].empty);
    const auto ls = lines_of(e.csv);
    CHECK(ls[1] == "0.5,,,,,,,,,0");
  }

  SUBCASE("bad split or caps are config errors") {
    CHECK_THROWS_AS(evaluate(art.checkpoint, data, {80.0}, "test"), ConfigError);
    CHECK_THROWS_AS(evaluate(art.checkpoint, data, {}, "all"), ConfigError);
    CHECK_THROWS_AS(evaluate(art.checkpoint, data, {-1.0}, "all"), ConfigError);
    CHECK_THROWS_AS(evaluate(art.checkpoint, data, {80.0}, "val"), DataError);  // empty split
  }
}

TEST_CASE("infer writes raw grids and previews that match the forward pass") {
  TempDir tmp("harness_infer");
  const fs::path data = write_micro_dataset(tmp.path, 32, 64, 2, 29);

  ModelConfig mc;
  mc.height = 32;
  mc.width = 64;
  CafNet net(mc, 7);
  const fs::path ckpt = tmp.path / "net.bin";
  net.save(ckpt);

  const fs::path out = tmp.path / "pred";
  infer(ckpt, data, 1, out);

  const Dataset ds = load_dataset(data);
  ad::Tape t;
  auto fwd = net.forward(t, ds.frames[1].image, build_radar_image(ds.frames[1]));

  const auto quantized_hw = [](const Tensor& chw) {
    Tensor g({chw.dim(1), chw.dim(2)});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = quantize_f32(chw[i]);
    return g;
  };
  const Tensor df = load_grid(out / "df.raw");
  CHECK(tensors_equal(df, quantized_hw(t.value(fwd.df))));
  CHECK(tensors_equal(load_grid(out / "dc.raw"), quantized_hw(t.value(fwd.dc))));
  CHECK(tensors_equal(load_grid(out / "conf.raw"), quantized_hw(t.value(fwd.conf))));

  // Preview bytes follow the linear map with round-half-to-even.
  const std::string pgm = slurp(out / "df.pgm");
  const std::string header = "P5\n64 32\n255\n";
  REQUIRE(pgm.substr(0, header.size()) == header);
  REQUIRE(pgm.size() == header.size() + 64 * 32);
  std::size_t arg_lo = 0, arg_hi = 0;
  for (std::size_t i = 0; i < df.size(); ++i) {
    if (df[i] < df[arg_lo]) arg_lo = i;
    if (df[i] > df[arg_hi]) arg_hi = i;
    double v = (df[i] - mc.d_min) / (mc.d_max - mc.d_min);
    v = std::min(1.0, std::max(0.0, v));
    const auto want = static_cast<unsigned char>(std::nearbyint(v * 255.0));
    CHECK(static_cast<unsigned char>(pgm[header.size() + i]) == want);
  }
  // Extremes of the preview land on the grid's argmin/argmax.
  unsigned char lo = 255, hi = 0;
  for (std::size_t i = 0; i < df.size(); ++i) {
    lo = std::min(lo, static_cast<unsigned char>(pgm[header.size() + i]));
    hi = std::max(hi, static_cast<unsigned char>(pgm[header.size() + i]));
  }
  CHECK(static_cast<unsigned char>(pgm[header.size() + arg_lo]) == lo);
  CHECK(static_cast<unsigned char>(pgm[header.size() + arg_hi]) == hi);

  // Mid-gray rule: a 0.5 confidence maps to 128 under round-half-to-even.
  CHECK(std::nearbyint(0.5 * 255.0) == 128.0);
  CHECK(std::nearbyint(0.5 * 255.0) != 127.0);

  SUBCASE("frame index out of range is a data error") {
    CHECK_THROWS_AS(infer(ckpt, data, 2, out), DataError);
    CHECK_THROWS_AS(infer(ckpt, data, -1, out), DataError);
  }

  SUBCASE("dims not divisible by the pyramid stride suggest pad or crop") {
    TempDir tmp2("harness_infer_dims");
    const fs::path data48 = write_micro_dataset(tmp2.path, 32, 48, 1, 29);
    ModelConfig deep;
    deep.height = 32;
    deep.width = 64;
    deep.scales = 5;
    deep.image_widths = {8, 16, 32, 64, 128};
    deep.radar_widths = {4, 8, 16, 32, 64};
    deep.decoder_widths = {128, 64, 32, 16, 8, 8};
    CafNet net5(deep, 7);
    const fs::path ckpt5 = tmp2.path / "net5.bin";
    net5.save(ckpt5);
    try {
      infer(ckpt5, data48, 0, tmp2.path / "pred");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("pad or crop") != std::string::npos);
    }
  }
}

TEST_CASE("ablate emits a well-formed table and tolerates failing rows") {
  TempDir tmp("harness_ablate");
  AblateConfig ac;
  ac.out = tmp.path / "ab";
  ac.seed = 3;
  ac.frames = 2;
  ac.epochs = 1;
  ac.batch = 2;
  ac.height = 32;
  ac.width = 64;
  ac.variants = {"ours", "no-confidence", "not-a-variant"};

  const AblationResult res = ablate(ac);
  REQUIRE(res.rows.size() == 3);
  CHECK(res.rows[0].name == "ours");
  CHECK(!res.rows[0].failed);
  CHECK(res.rows[0].report.n_valid > 0);
  CHECK(!res.rows[1].failed);
  CHECK(res.rows[2].failed);
  CHECK(!res.rows[2].error.empty());

  const auto csv = lines_of(slurp(ac.out / "ablation.csv"));
  REQUIRE(csv.size() == 4);
  CHECK(csv[0] == "variant,mae,rmse,absrel,d1,status");
  CHECK(csv[1].substr(0, 5) == "ours,");
  CHECK(csv[3] == "not-a-variant,,,,,failed");

  const auto md = lines_of(slurp(ac.out / "ablation.md"));
  REQUIRE(md.size() == 5);  // header + separator + 3 rows
  for (const auto& line : md) CHECK(line.front() == '|');
  CHECK(md[0].find("variant") != std::string::npos);

  // Every row echoes the shared seed and dataset hash.
  const nlohmann::json j = nlohmann::json::parse(slurp(ac.out / "ablation.json"));
  REQUIRE(j.at("rows").size() == 3);
  for (const auto& row : j.at("rows")) {
    CHECK(row.at("seed").get<std::uint64_t>() == 3);
    CHECK(row.at("dataset_hash") == j.at("dataset_hash"));
  }
  CHECK(j.at("rows")[2].at("status") == "failed");

  CHECK(ablation_variants().size() == 9);
}
