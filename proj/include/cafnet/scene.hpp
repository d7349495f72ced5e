#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cafnet/geometry.hpp"
#include "cafnet/tensor.hpp"

namespace cafnet {

struct SceneConfig {
  int height = 64;
  int width = 128;
  int n_objects = 4;        ///< 1..10
  double ghost_rate = 0.3;  ///< ghost points per real point, [0,1]
  int n_frames = 8;
  int lidar_step = 2;  ///< scan lattice stride, pixels
  double d_max = 80.0;

  void validate() const;
};

struct Frame {
  Tensor image;                  ///< {3,H,W}, values in [0,1]
  Tensor lidar;                  ///< {H,W} depth in meters, 0 = invalid
  std::vector<RadarPoint> radar; ///< camera frame
  std::vector<BBox3D> boxes;     ///< camera frame, projected corners filled
  CameraIntrinsics intrinsics;
  Pose pose;  ///< camera-to-world
  int index = 0;
};

// Deterministic synthetic sequence: static boxes on a ground plane, camera
// translating through the scene. Every box is visible in every frame, gets
// lidar returns, and carries at least one surface radar point per frame;
// ghost points carry scene-uncorrelated depths.
std::vector<Frame> generate_scene(const SceneConfig& config, std::uint64_t seed);

// Ray-cast scene description used by the generator (exposed for tests).
struct World {
  std::vector<BBox3D> boxes;  ///< world frame
  double ground_y = 1.5;
};

struct RayHit {
  double t = -1.0;      ///< parameter along the ray; depth when dir.z == 1
  int surface = -1;     ///< box index, boxes.size() = ground, -1 = none
  Vec3 normal;
};

// Nearest intersection with t > 1e-9; boxes win over the ground on exact
// ties (nearer surface first, then lower surface index).
RayHit cast_ray(const World& world, const Vec3& origin, const Vec3& dir);

// Merges lidar depth of frames [index-window, index+window] (clipped to the
// sequence) into frame `index` via relative poses. Nearest depth wins per
// pixel; exact ties go to the later contribution. When densify is true the
// result is passed through densify_depth.
Tensor accumulate_depth(const std::vector<Frame>& frames, int index, int window,
                        bool densify = true);

// Every invalid (zero) pixel takes the depth of the nearest valid pixel
// (Euclidean pixel distance; ties by row-major order of the valid pixel).
Tensor densify_depth(const Tensor& sparse);

// Horizontal mirror of a frame: grids are column-reversed, radar and box x
// coordinates are negated about the principal axis, projected corners are
// recomputed. Exposed so tests can check that mirroring commutes with
// confidence-GT construction.
Frame mirror_frame(const Frame& f);

}  // namespace cafnet
