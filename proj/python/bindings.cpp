// Python bindings for the radar-camera depth fusion pipeline. The module
// mirrors the CLI verbs (generate_data, make_gt, train, evaluate, ablate,
// infer) and adds array-level entry points for metrics and checkpoint
// inference so tests and notebooks can drive the model directly.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <cstdio>
#include <optional>
#include <utility>
#include <vector>

#include "cafnet/autodiff.hpp"
#include "cafnet/common.hpp"
#include "cafnet/dataset_io.hpp"
#include "cafnet/harness.hpp"
#include "cafnet/metrics.hpp"
#include "cafnet/model.hpp"
#include "cafnet/radar_gt.hpp"
#include "cafnet/scene.hpp"

namespace py = pybind11;
using namespace cafnet;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.raw().begin(), t.raw().end(), a.mutable_data());
  return a;
}

Tensor to_tensor(const DoubleArray& a) {
  std::vector<int> shape;
  shape.reserve(static_cast<std::size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(data));
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["max_distance"] = r.max_distance;
  d["mae"] = r.mae;
  d["rmse"] = r.rmse;
  d["absrel"] = r.absrel;
  d["log10"] = r.log10;
  d["rmselog"] = r.rmselog;
  d["delta1"] = r.delta1;
  d["delta2"] = r.delta2;
  d["delta3"] = r.delta3;
  d["n_valid"] = r.n_valid;
  return d;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

PYBIND11_MODULE(_cafnet, m) {
  m.doc() = "radar-camera depth fusion pipeline (native core)";
  m.attr("__version__") = "1.0.0";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "generate_data",
      [](const std::filesystem::path& out, int height, int width, int objects, double ghost_rate,
         int frames, int lidar_step, double d_max, std::uint64_t seed, double val_fraction) {
        GenerateConfig cfg;
        cfg.scene.height = height;
        cfg.scene.width = width;
        cfg.scene.n_objects = objects;
        cfg.scene.ghost_rate = ghost_rate;
        cfg.scene.n_frames = frames;
        cfg.scene.lidar_step = lidar_step;
        cfg.scene.d_max = d_max;
        cfg.seed = seed;
        cfg.val_fraction = val_fraction;
        cfg.out = out;
        DatasetManifest man;
        {
          py::gil_scoped_release release;
          man = generate_data(cfg);
        }
        py::dict d;
        d["frame_count"] = man.frame_count;
        d["height"] = man.height;
        d["width"] = man.width;
        d["seed"] = man.seed;
        d["train_ids"] = man.train_ids;
        d["val_ids"] = man.val_ids;
        return d;
      },
      py::arg("out"), py::kw_only(), py::arg("height") = 64, py::arg("width") = 128,
      py::arg("objects") = 4, py::arg("ghost_rate") = 0.3, py::arg("frames") = 8,
      py::arg("lidar_step") = 2, py::arg("d_max") = 80.0, py::arg("seed") = 1,
      py::arg("val_fraction") = 0.2,
      "Render a synthetic scene and write a dataset directory.");

  m.def(
      "make_gt",
      [](const std::filesystem::path& data, const std::filesystem::path& out, double tau,
         std::optional<std::pair<int, int>> patch, int window, bool fixed_patch) {
        GtJobConfig cfg;
        cfg.data = data;
        cfg.out = out;
        cfg.gt.tau = tau;
        cfg.gt.fixed_patch = fixed_patch;
        if (patch) {
          cfg.gt.patch_w = patch->first;
          cfg.gt.patch_h = patch->second;
          cfg.patch_explicit = true;
        }
        cfg.window = window;
        GtManifest man;
        {
          py::gil_scoped_release release;
          man = make_gt(cfg);
        }
        py::dict d;
        d["frame_count"] = man.frame_count;
        d["tau"] = man.tau;
        d["patch_w"] = man.patch_w;
        d["patch_h"] = man.patch_h;
        d["window"] = man.window;
        d["style"] = man.style;
        return d;
      },
      py::arg("data"), py::arg("out"), py::kw_only(), py::arg("tau") = 0.4,
      py::arg("patch") = std::nullopt, py::arg("window") = 1, py::arg("fixed_patch") = false,
      "Build accumulated-depth and confidence ground truth for a dataset.");

  m.def(
      "train",
      [](const std::filesystem::path& data, const std::filesystem::path& gt,
         const std::filesystem::path& out, int epochs, int batch, double lr, double decay_power,
         std::uint64_t seed, bool flip, std::optional<std::pair<int, int>> crop,
         const std::string& supervise, double m_weight, double smooth_lambda,
         const std::string& fusion, bool use_scm, bool use_rm, bool use_confidence,
         double conf_threshold, int max_steps, int eval_every, double stop_mae,
         double stop_loss_frac) {
        TrainConfig cfg;
        cfg.data = data;
        cfg.gt = gt;
        cfg.out = out;
        cfg.epochs = epochs;
        cfg.batch = batch;
        cfg.lr = lr;
        cfg.decay_power = decay_power;
        cfg.seed = seed;
        cfg.flip = flip;
        cfg.crop = crop;
        cfg.supervise = supervise;
        cfg.loss.m = m_weight;
        cfg.loss.lambda = smooth_lambda;
        cfg.model.fusion = fusion;
        cfg.model.use_scm = use_scm;
        cfg.model.use_rm = use_rm;
        cfg.model.use_confidence = use_confidence;
        cfg.model.conf_threshold = conf_threshold;
        cfg.max_steps = max_steps;
        cfg.eval_every = eval_every;
        cfg.stop_mae = stop_mae;
        cfg.stop_loss_frac = stop_loss_frac;
        RunArtifact art;
        {
          py::gil_scoped_release release;
          art = train(cfg);
        }
        py::dict d;
        d["checkpoint"] = art.checkpoint;
        d["loss_log"] = art.loss_log;
        d["metrics_csv"] = art.metrics_csv;
        d["steps_run"] = art.steps_run;
        d["initial_loss"] = art.initial_loss;
        d["final_loss"] = art.final_loss;
        d["final_mae80"] = art.final_mae80;
        d["wall_seconds"] = art.wall_seconds;
        return d;
      },
      py::arg("data"), py::arg("gt"), py::arg("out"), py::kw_only(), py::arg("epochs") = 30,
      py::arg("batch") = 4, py::arg("lr") = 1e-4, py::arg("decay_power") = 0.9,
      py::arg("seed") = 1, py::arg("flip") = true, py::arg("crop") = std::nullopt,
      py::arg("supervise") = "densified", py::arg("m") = 0.5, py::arg("smooth_lambda") = 1e-3,
      py::arg("fusion") = "cagf", py::arg("use_scm") = true, py::arg("use_rm") = true,
      py::arg("use_confidence") = true, py::arg("conf_threshold") = 0.4,
      py::arg("max_steps") = 0, py::arg("eval_every") = 0, py::arg("stop_mae") = 0.0,
      py::arg("stop_loss_frac") = 0.0,
      "Train the two-stage network; writes checkpoint, loss log, metrics and run record.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data,
         const std::vector<double>& caps, const std::string& split) {
        EvalResult res;
        {
          py::gil_scoped_release release;
          res = evaluate(checkpoint, data, caps, split);
        }
        py::list rows;
        for (const EvalRow& r : res.rows) {
          py::dict d;
          d["cap"] = r.cap;
          d["empty"] = r.empty;
          if (!r.empty) d["metrics"] = report_dict(r.report);
          rows.append(d);
        }
        py::dict d;
        d["rows"] = rows;
        d["csv"] = res.csv;
        d["markdown"] = res.markdown;
        return d;
      },
      py::arg("checkpoint"), py::arg("data"), py::kw_only(),
      py::arg("caps") = std::vector<double>{50.0, 70.0, 80.0}, py::arg("split") = "all",
      "Evaluate a checkpoint against per-frame lidar at the given distance caps.");

  m.def(
      "ablate",
      [](const std::filesystem::path& out, std::uint64_t seed, int frames, int epochs, int batch,
         int height, int width, double lr, const std::vector<std::string>& variants) {
        AblateConfig cfg;
        cfg.out = out;
        cfg.seed = seed;
        cfg.frames = frames;
        cfg.epochs = epochs;
        cfg.batch = batch;
        cfg.height = height;
        cfg.width = width;
        cfg.lr = lr;
        cfg.variants = variants;
        AblationResult res;
        {
          py::gil_scoped_release release;
          res = ablate(cfg);
        }
        py::list rows;
        for (const AblationRow& r : res.rows) {
          py::dict d;
          d["name"] = r.name;
          d["failed"] = r.failed;
          if (r.failed)
            d["error"] = r.error;
          else
            d["metrics"] = report_dict(r.report);
          rows.append(d);
        }
        py::dict d;
        d["rows"] = rows;
        d["csv"] = res.csv;
        d["markdown"] = res.markdown;
        d["dataset_hash"] = hash_hex(res.dataset_hash);
        return d;
      },
      py::arg("out"), py::kw_only(), py::arg("seed") = 1, py::arg("frames") = 16,
      py::arg("epochs") = 5, py::arg("batch") = 4, py::arg("height") = 32, py::arg("width") = 64,
      py::arg("lr") = 1e-3, py::arg("variants") = std::vector<std::string>{},
      "Train and evaluate model variants on a freshly generated micro dataset.");

  m.def("ablation_variants", &ablation_variants, "The standard ablation row names, in order.");

  m.def(
      "infer",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data, int frame,
         const std::filesystem::path& out) {
        py::gil_scoped_release release;
        infer(checkpoint, data, frame, out);
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("frame"), py::arg("out"),
      "Run one frame through a checkpoint; writes raw depth/confidence grids and previews.");

  m.def(
      "dataset_hash",
      [](const std::filesystem::path& data) {
        std::uint64_t h = 0;
        {
          py::gil_scoped_release release;
          h = dataset_hash(data);
        }
        return hash_hex(h);
      },
      py::arg("data"), "Order-fixed FNV-1a hash over a dataset directory, as 16 hex digits.");

  m.def(
      "compute_metrics",
      [](const DoubleArray& pred, const DoubleArray& gt, double max_distance) {
        return report_dict(compute_metrics(to_tensor(pred), to_tensor(gt), max_distance));
      },
      py::arg("pred"), py::arg("gt"), py::arg("max_distance") = 80.0,
      "Depth metrics over the valid set {0 < gt <= max_distance}.");

  m.def(
      "run_model",
      [](const std::filesystem::path& checkpoint, const DoubleArray& image,
         const DoubleArray& radar) {
        const Tensor img = to_tensor(image);
        const Tensor rad = to_tensor(radar);
        CafNet net = CafNet::load(checkpoint);
        ad::Tape tape;
        const CafNet::Forward f = net.forward(tape, img, rad);
        py::dict d;
        d["df"] = to_array(tape.value(f.df));
        d["dc"] = to_array(tape.value(f.dc));
        if (f.conf.valid()) d["conf"] = to_array(tape.value(f.conf));
        if (f.dcr.valid()) d["dcr"] = to_array(tape.value(f.dcr));
        if (!f.refine_mask.empty()) d["refine_mask"] = to_array(f.refine_mask);
        return d;
      },
      py::arg("checkpoint"), py::arg("image"), py::arg("radar"),
      "Forward one image ({3,H,W}) + radar image ({5,H,W}) pair through a checkpoint.");

  m.def(
      "load_frame_grids",
      [](const std::filesystem::path& data, int index) {
        Dataset ds = load_dataset(data);
        if (index < 0 || index >= static_cast<int>(ds.frames.size()))
          throw DataError("frame index out of range");
        const Frame& f = ds.frames[static_cast<std::size_t>(index)];
        py::dict d;
        d["image"] = to_array(f.image);
        d["lidar"] = to_array(f.lidar);
        d["radar_image"] = to_array(build_radar_image(f));
        return d;
      },
      py::arg("data"), py::arg("index"),
      "Load one frame's image, lidar and projected radar image as arrays.");
}
