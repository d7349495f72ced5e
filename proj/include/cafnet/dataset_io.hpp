#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cafnet/scene.hpp"
#include "cafnet/tensor.hpp"

namespace cafnet {

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  int frame_count = 0;
  int height = 0, width = 0;
  std::string channel_layout = "depth,vx,vy,rcs,valid";
  std::vector<int> train_ids, val_ids;
};

// Raw grid file: 8-byte magic "CAFGRD01", u32 rank, u32 dims[rank], u64
// FNV-1a checksum of the payload, float32 little-endian payload. Values are
// expected to already be float32-representable so that save/load round-trips
// bitwise; see quantize_f32.
void save_grid(const std::filesystem::path& path, const Tensor& grid);
Tensor load_grid(const std::filesystem::path& path);

// One directory per frame (image.raw, lidar.raw, radar.csv, boxes.csv,
// meta.json) plus manifest.json at the root.
void save_dataset(const std::vector<Frame>& frames, const DatasetManifest& manifest,
                  const std::filesystem::path& dir);

struct Dataset {
  std::vector<Frame> frames;
  DatasetManifest manifest;
};
Dataset load_dataset(const std::filesystem::path& dir);

// Derived ground truth for one frame.
struct FrameGt {
  Tensor dacc;      ///< {H,W} densified accumulated depth
  Tensor dacc_raw;  ///< {H,W} pre-densification (0 = invalid)
  Tensor conf;      ///< {H,W} binary confidence
};

struct GtManifest {
  int version = 1;
  int frame_count = 0;
  double tau = 0.4;
  int patch_w = 16, patch_h = 16;
  int window = 1;
  std::string style = "ours";  ///< ours | fixed-patch
};

void save_gt(const std::vector<FrameGt>& frames, const GtManifest& manifest,
             const std::filesystem::path& dir);

struct GtData {
  std::vector<FrameGt> frames;
  GtManifest manifest;
};
GtData load_gt(const std::filesystem::path& dir);

}  // namespace cafnet
