#pragma once

#include <optional>
#include <vector>

#include "cafnet/scene.hpp"
#include "cafnet/tensor.hpp"

namespace cafnet {

// Radar-projected image channel layout (C_R = 5).
enum RadarChannel { kRadarDepth = 0, kRadarVx, kRadarVy, kRadarRcs, kRadarValid, kRadarChannels };

struct GtConfig {
  int patch_w = 16, patch_h = 16;  ///< noise-point patch extents, pixels
  double tau = 0.4;                ///< depth tolerance, meters
  bool fixed_patch = false;        ///< true: every point gets a patch region

  void validate() const;
};

// Projects every radar point into a {5,H,W} grid [depth, vx, vy, rcs,
// valid]. Pixel collisions keep the nearer point; exact depth ties keep the
// earlier point in list order.
Tensor build_radar_image(const Frame& frame);

// For each point, the index of the smallest-volume containing box, or -1.
// Equal volumes resolve to the lower box index.
std::vector<int> classify_points(const std::vector<RadarPoint>& points,
                                 const std::vector<BBox3D>& boxes);

struct SelectiveRegion {
  int x_lo = 0, x_hi = -1, y_lo = 0, y_hi = -1;  ///< inclusive pixel bounds
  std::size_t owner = 0;                         ///< radar point index
  bool in_box = false;
};

// Region over which a projected point's confidence is evaluated: the
// projected corners of its box for in-box points, a (patch_w, patch_h) patch
// centered on the point's pixel otherwise; both clipped to the image. A
// degenerate box projection collapses to the point's own pixel.
SelectiveRegion region_for_point(const ProjectedPoint& proj, int assignment,
                                 const GtConfig& config, const Frame& frame);

// Binary confidence: pixel (i,j) of some point's region is 1 iff
// |D_acc(i,j) - d_m| <= tau for that point; contributions combine by OR.
Tensor build_confidence_gt(const Frame& frame, const Tensor& dacc, const GtConfig& config);

}  // namespace cafnet
