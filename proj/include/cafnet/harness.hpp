#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cafnet/dataset_io.hpp"
#include "cafnet/metrics.hpp"
#include "cafnet/model.hpp"
#include "cafnet/radar_gt.hpp"
#include "cafnet/scene.hpp"

namespace cafnet {

// ---- generate-data -----------------------------------------------------------

struct GenerateConfig {
  SceneConfig scene;
  std::uint64_t seed = 1;
  double val_fraction = 0.2;  ///< tail frames go to the validation split
  std::filesystem::path out;
};

// Renders a scene and writes the dataset directory; returns the manifest.
DatasetManifest generate_data(const GenerateConfig& config);

// ---- make-gt -------------------------------------------------------------------

struct GtJobConfig {
  std::filesystem::path data;
  std::filesystem::path out;
  GtConfig gt;                ///< tau / patch / style
  bool patch_explicit = false;  ///< false: scale the default patch with resolution
  int window = 1;             ///< accumulation half-window, frames
};

GtManifest make_gt(const GtJobConfig& config);

// ---- train ---------------------------------------------------------------------

struct LossWeights {
  double m = 0.5;
  double lambda = 1e-3;
};

struct TrainConfig {
  std::filesystem::path data;  ///< dataset directory
  std::filesystem::path gt;    ///< ground-truth directory
  std::filesystem::path out;   ///< artifact directory

  int epochs = 30;
  int batch = 4;
  double lr = 1e-4;
  double decay_power = 0.9;  ///< lr * (1 - t/T)^p
  std::uint64_t seed = 1;

  bool flip = true;               ///< random horizontal flip
  std::optional<std::pair<int, int>> crop;  ///< (h, w) random crop, divisible by 16

  std::string supervise = "densified";  ///< densified | raw
  LossWeights loss;
  ModelConfig model;  ///< height/width auto-set from the data unless cropped

  // Optional early stop: check the train-set MAE (80 m cap) every eval_every
  // steps and stop once mae < stop_mae and loss < stop_loss_frac * initial.
  int max_steps = 0;  ///< 0: epochs decide
  int eval_every = 0;
  double stop_mae = 0.0;
  double stop_loss_frac = 0.0;

  void validate() const;
};

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& config);

struct RunArtifact {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_log;
  std::filesystem::path metrics_csv;
  int steps_run = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_mae80 = 0.0;
  double wall_seconds = 0.0;
};

// Trains per the config and writes checkpoint.bin, loss_log.csv, metrics.csv,
// metrics.md and run.json into config.out. Loss log and metric tables are
// bitwise reproducible for a fixed (config, seed) on one platform.
RunArtifact train(const TrainConfig& config);

// ---- evaluate --------------------------------------------------------------------

struct EvalRow {
  double cap = 0.0;
  bool empty = false;  ///< no valid pixels at this cap
  MetricsReport report;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  std::string csv;
  std::string markdown;
};

// Evaluates the fused depth against each frame's own (single-frame) lidar.
EvalResult evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                    const std::vector<double>& caps, const std::string& split = "all");

// ---- ablate ---------------------------------------------------------------------

struct AblateConfig {
  std::filesystem::path out;
  std::uint64_t seed = 1;
  int frames = 16;
  int epochs = 5;
  int batch = 4;
  int height = 32, width = 64;
  double lr = 1e-3;
  std::vector<std::string> variants;  ///< empty: the standard 9 rows
};

struct AblationRow {
  std::string name;
  bool failed = false;
  std::string error;
  MetricsReport report;  ///< at the 80 m cap
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string csv;
  std::string markdown;
  std::uint64_t dataset_hash = 0;
};

// Trains and evaluates the 9 standard variants on a freshly generated micro
// dataset. A failing variant marks its row and the run continues.
AblationResult ablate(const AblateConfig& config);

// The standard variant names, in table order.
std::vector<std::string> ablation_variants();

// ---- infer ----------------------------------------------------------------------

// Runs one frame through a checkpoint and writes df/dc/conf raw grids plus
// 8-bit grayscale previews (PGM, round-half-to-even) into out.
void infer(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
           int frame_index, const std::filesystem::path& out);

// ---- shared helpers ---------------------------------------------------------------

// Order-fixed FNV-1a over the dataset's manifest and frame payload files.
std::uint64_t dataset_hash(const std::filesystem::path& data);

// Column-mirrors every channel of a {C,H,W} or {H,W} grid.
Tensor flip_grid(const Tensor& grid);

// Proportional default noise patch for a resolution (16x16 at 64x128).
void scale_patch_to(GtConfig& gt, int height, int width);

}  // namespace cafnet
