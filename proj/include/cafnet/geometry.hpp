#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "cafnet/common.hpp"

namespace cafnet {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return Mat3{}; }

  // Rotation about the vertical (y) axis.
  static Mat3 rot_y(double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return Mat3{{c, 0, s, 0, 1, 0, -s, 0, c}};
  }

  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  // Apply the transpose (inverse, for rotations).
  Vec3 apply_t(const Vec3& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z, m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  double orthonormality_error() const {
    double worst = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += m[static_cast<std::size_t>(3 * k + i)] *
                                           m[static_cast<std::size_t>(3 * k + j)];
        worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
      }
    return worst;
  }
};

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;  ///< focal lengths, pixels
  double cx = 0.0, cy = 0.0;  ///< principal point, pixels
  int width = 0, height = 0;  ///< image dims, pixels

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0) throw ConfigError("intrinsics: focal lengths must be positive");
    if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
      throw ConfigError("intrinsics: principal point outside image");
    if (width <= 0 || height <= 0) throw ConfigError("intrinsics: non-positive dims");
  }
};

// Camera-to-world transform.
struct Pose {
  Mat3 rotation;
  Vec3 translation;

  Vec3 to_world(const Vec3& p_cam) const { return rotation.apply(p_cam) + translation; }
  Vec3 to_camera(const Vec3& p_world) const { return rotation.apply_t(p_world - translation); }

  void validate() const {
    if (rotation.orthonormality_error() > 1e-9) throw DataError("pose: rotation not orthonormal");
    if (std::abs(rotation.det() - 1.0) > 1e-9) throw DataError("pose: rotation not right-handed");
  }
};

// A point that survived projection. u_cont/v_cont are continuous image
// coordinates; the pixel is their floor.
struct ProjectedPoint {
  int u = 0, v = 0;
  double u_cont = 0.0, v_cont = 0.0;
  double depth = 0.0;
  std::size_t source = 0;  ///< index into the input list
};

inline std::optional<ProjectedPoint> project_point(const Vec3& p, const CameraIntrinsics& k) {
  if (p.z <= 0.0) return std::nullopt;
  ProjectedPoint out;
  out.u_cont = k.fx * p.x / p.z + k.cx;
  out.v_cont = k.fy * p.y / p.z + k.cy;
  out.u = static_cast<int>(std::floor(out.u_cont));
  out.v = static_cast<int>(std::floor(out.v_cont));
  out.depth = p.z;
  if (out.u < 0 || out.u >= k.width || out.v < 0 || out.v >= k.height) return std::nullopt;
  return out;
}

struct ProjectionResult {
  std::vector<ProjectedPoint> points;
  std::size_t dropped = 0;
};

inline ProjectionResult project_points(const std::vector<Vec3>& pts, const CameraIntrinsics& k) {
  ProjectionResult r;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (auto p = project_point(pts[i], k)) {
      p->source = i;
      r.points.push_back(*p);
    } else {
      ++r.dropped;
    }
  }
  return r;
}

// Inverse of project_point at continuous coordinates.
inline Vec3 backproject(double u_cont, double v_cont, double depth, const CameraIntrinsics& k) {
  return {(u_cont - k.cx) / k.fx * depth, (v_cont - k.cy) / k.fy * depth, depth};
}

// Inverse through the center of pixel (u, v).
inline Vec3 backproject_pixel(int u, int v, double depth, const CameraIntrinsics& k) {
  return backproject(u + 0.5, v + 0.5, depth, k);
}

struct RadarPoint {
  Vec3 position;  ///< camera frame, meters
  double vx = 0.0, vy = 0.0;
  double rcs = 0.0;
  bool is_ghost = false;  ///< synthetic label, never fed to the model
};

struct BBox3D {
  Vec3 center;  ///< camera frame, meters
  Vec3 size;    ///< full extents (x, y, z), meters
  double yaw = 0.0;
  // Projected 2D corners in pixels, clipped to the image. x2 < x1 flags a
  // degenerate (invisible) projection.
  int x1 = 0, y1 = 0, x2 = -1, y2 = -1;

  double volume() const { return size.x * size.y * size.z; }

  // Inclusive containment, yaw-aware (rotation about the vertical axis).
  bool contains(const Vec3& p) const {
    const Vec3 local = Mat3::rot_y(-yaw).apply(p - center);
    return std::abs(local.x) <= size.x * 0.5 && std::abs(local.y) <= size.y * 0.5 &&
           std::abs(local.z) <= size.z * 0.5;
  }

  // The 8 corners in the box's frame of reference rotated+translated out.
  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> out;
    const Mat3 r = Mat3::rot_y(yaw);
    int n = 0;
    for (int ix = -1; ix <= 1; ix += 2)
      for (int iy = -1; iy <= 1; iy += 2)
        for (int iz = -1; iz <= 1; iz += 2)
          out[static_cast<std::size_t>(n++)] =
              r.apply({ix * size.x * 0.5, iy * size.y * 0.5, iz * size.z * 0.5}) + center;
    return out;
  }
};

// Projects the 8 corners and stores the clipped pixel bounding rectangle.
// Boxes fully behind the camera or fully outside the image are marked
// degenerate (x2 < x1).
inline void project_box_corners(BBox3D& box, const CameraIntrinsics& k) {
  double min_u = 0, max_u = 0, min_v = 0, max_v = 0;
  bool any = false;
  for (const Vec3& c : box.corners()) {
    if (c.z <= 1e-9) continue;
    const double u = k.fx * c.x / c.z + k.cx;
    const double v = k.fy * c.y / c.z + k.cy;
    if (!any) {
      min_u = max_u = u;
      min_v = max_v = v;
      any = true;
    } else {
      min_u = std::min(min_u, u);
      max_u = std::max(max_u, u);
      min_v = std::min(min_v, v);
      max_v = std::max(max_v, v);
    }
  }
  const auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  if (!any || max_u < 0.0 || min_u >= k.width || max_v < 0.0 || min_v >= k.height) {
    box.x1 = box.y1 = 0;
    box.x2 = box.y2 = -1;
    return;
  }
  box.x1 = clampi(static_cast<int>(std::floor(min_u)), 0, k.width - 1);
  box.x2 = clampi(static_cast<int>(std::floor(max_u)), 0, k.width - 1);
  box.y1 = clampi(static_cast<int>(std::floor(min_v)), 0, k.height - 1);
  box.y2 = clampi(static_cast<int>(std::floor(max_v)), 0, k.height - 1);
}

}  // namespace cafnet
