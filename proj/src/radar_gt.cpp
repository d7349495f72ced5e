#include "cafnet/radar_gt.hpp"

#include <algorithm>
#include <cmath>

#include "cafnet/common.hpp"

namespace cafnet {

void GtConfig::validate() const {
  if (patch_w < 1 || patch_h < 1) throw ConfigError("gt: patch dims must be >= 1");
  if (tau <= 0.0) throw ConfigError("gt: tau must be positive");
}

Tensor build_radar_image(const Frame& frame) {
  const CameraIntrinsics& k = frame.intrinsics;
  Tensor r({kRadarChannels, k.height, k.width});
  for (const RadarPoint& p : frame.radar) {
    const auto proj = project_point(p.position, k);
    if (!proj) continue;
    double& depth = r.at(kRadarDepth, proj->v, proj->u);
    const bool occupied = r.at(kRadarValid, proj->v, proj->u) > 0.0;
    if (occupied && depth <= proj->depth) continue;  // nearer wins, first wins ties
    depth = proj->depth;
    r.at(kRadarVx, proj->v, proj->u) = p.vx;
    r.at(kRadarVy, proj->v, proj->u) = p.vy;
    r.at(kRadarRcs, proj->v, proj->u) = p.rcs;
    r.at(kRadarValid, proj->v, proj->u) = 1.0;
  }
  return r;
}

std::vector<int> classify_points(const std::vector<RadarPoint>& points,
                                 const std::vector<BBox3D>& boxes) {
  std::vector<int> assign(points.size(), -1);
  for (std::size_t i = 0; i < points.size(); ++i) {
    double best_vol = 0.0;
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      if (!boxes[b].contains(points[i].position)) continue;
      const double vol = boxes[b].volume();
      if (assign[i] < 0 || vol < best_vol) {
        assign[i] = static_cast<int>(b);
        best_vol = vol;
      }
    }
  }
  return assign;
}

SelectiveRegion region_for_point(const ProjectedPoint& proj, int assignment,
                                 const GtConfig& config, const Frame& frame) {
  const CameraIntrinsics& k = frame.intrinsics;
  SelectiveRegion reg;
  reg.owner = proj.source;
  const auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };

  if (assignment >= 0 && !config.fixed_patch) {
    const BBox3D& b = frame.boxes[static_cast<std::size_t>(assignment)];
    reg.in_box = true;
    if (b.x2 < b.x1 || b.y2 < b.y1) {  // degenerate projection: the point's own pixel
      reg.x_lo = reg.x_hi = proj.u;
      reg.y_lo = reg.y_hi = proj.v;
      return reg;
    }
    reg.x_lo = b.x1;
    reg.x_hi = b.x2;
    reg.y_lo = b.y1;
    reg.y_hi = b.y2;
    return reg;
  }

  reg.x_lo = clampi(proj.u - config.patch_w / 2, 0, k.width - 1);
  reg.x_hi = clampi(proj.u + config.patch_w / 2, 0, k.width - 1);
  reg.y_lo = clampi(proj.v - config.patch_h / 2, 0, k.height - 1);
  reg.y_hi = clampi(proj.v + config.patch_h / 2, 0, k.height - 1);
  return reg;
}

Tensor build_confidence_gt(const Frame& frame, const Tensor& dacc, const GtConfig& config) {
  config.validate();
  const CameraIntrinsics& k = frame.intrinsics;
  if (dacc.ndim() != 2 || dacc.dim(0) != k.height || dacc.dim(1) != k.width)
    throw DataError("confidence gt: accumulated depth dims disagree with frame");

  Tensor c({k.height, k.width});
  const std::vector<int> assign = classify_points(frame.radar, frame.boxes);
  for (std::size_t i = 0; i < frame.radar.size(); ++i) {
    const auto proj = project_point(frame.radar[i].position, k);
    if (!proj) continue;
    ProjectedPoint pp = *proj;
    pp.source = i;
    const SelectiveRegion reg = region_for_point(pp, assign[i], config, frame);
    const double dm = pp.depth;
    for (int y = reg.y_lo; y <= reg.y_hi; ++y)
      for (int x = reg.x_lo; x <= reg.x_hi; ++x)
        if (std::abs(dacc.at(y, x) - dm) <= config.tau) c.at(y, x) = 1.0;
  }
  return c;
}

}  // namespace cafnet
