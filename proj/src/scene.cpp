#include "cafnet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "cafnet/common.hpp"

namespace cafnet {

void SceneConfig::validate() const {
  if (height < 32 || height > 512 || width < 32 || width > 512)
    throw ConfigError("scene: dims must lie in [32, 512]");
  if (height % 16 != 0 || width % 16 != 0)
    throw ConfigError("scene: dims must be divisible by 16");
  if (n_objects < 1 || n_objects > 10) throw ConfigError("scene: object count must be 1..10");
  if (ghost_rate < 0.0 || ghost_rate > 1.0) throw ConfigError("scene: ghost rate must be in [0,1]");
  if (n_frames < 1) throw ConfigError("scene: need at least one frame");
  if (lidar_step < 1) throw ConfigError("scene: lidar step must be >= 1");
  if (d_max <= 0.0) throw ConfigError("scene: d_max must be positive");
}

// ---- ray casting -------------------------------------------------------------

namespace {

constexpr double kRayEps = 1e-9;

// Entry intersection with one axis-aligned (after -yaw rotation) box.
// Returns t > kRayEps of the entry face, or a negative value on miss.
// Rays starting inside the box do not hit it (one-sided surfaces).
double intersect_box(const BBox3D& box, const Vec3& origin, const Vec3& dir, Vec3* normal) {
  const Mat3 r = Mat3::rot_y(-box.yaw);
  const Vec3 o = r.apply(origin - box.center);
  const Vec3 d = r.apply(dir);
  double tnear = -std::numeric_limits<double>::infinity();
  double tfar = std::numeric_limits<double>::infinity();
  int near_axis = -1;
  double near_sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double half = box.size[a] * 0.5;
    const double oa = o[a], da = d[a];
    if (da == 0.0) {
      if (oa < -half || oa > half) return -1.0;
      continue;
    }
    double t1 = (-half - oa) / da;
    double t2 = (half - oa) / da;
    double sign = -1.0;  // entering through the low face
    if (t1 > t2) {
      std::swap(t1, t2);
      sign = 1.0;
    }
    if (t1 > tnear) {
      tnear = t1;
      near_axis = a;
      near_sign = sign;
    }
    tfar = std::min(tfar, t2);
  }
  if (tnear > tfar || tnear <= kRayEps) return -1.0;
  if (normal) {
    Vec3 n{0, 0, 0};
    if (near_axis == 0) n.x = near_sign;
    if (near_axis == 1) n.y = near_sign;
    if (near_axis == 2) n.z = near_sign;
    *normal = Mat3::rot_y(box.yaw).apply(n);
  }
  return tnear;
}

}  // namespace

RayHit cast_ray(const World& world, const Vec3& origin, const Vec3& dir) {
  RayHit hit;
  for (std::size_t i = 0; i < world.boxes.size(); ++i) {
    Vec3 n;
    const double t = intersect_box(world.boxes[i], origin, dir, &n);
    if (t > kRayEps && (hit.surface < 0 || t < hit.t)) {
      hit.t = t;
      hit.surface = static_cast<int>(i);
      hit.normal = n;
    }
  }
  if (dir.y != 0.0) {
    const double t = (world.ground_y - origin.y) / dir.y;
    if (t > kRayEps && (hit.surface < 0 || t < hit.t)) {
      hit.t = t;
      hit.surface = static_cast<int>(world.boxes.size());
      hit.normal = Vec3{0, -1, 0};
    }
  }
  return hit;
}

// ---- generation ----------------------------------------------------------------

namespace {

CameraIntrinsics make_intrinsics(const SceneConfig& cfg) {
  CameraIntrinsics k;
  k.width = cfg.width;
  k.height = cfg.height;
  k.fx = 0.9 * cfg.width;
  k.fy = 0.9 * cfg.width;
  k.cx = cfg.width / 2.0;
  k.cy = cfg.height / 2.0;
  return k;
}

Pose camera_pose(int frame) {
  Pose p;
  p.translation = Vec3{0.05 * frame, 0.0, 0.4 * frame};
  return p;
}

struct Palette {
  double r, g, b;
};
constexpr Palette kPalette[6] = {{0.85, 0.25, 0.2}, {0.2, 0.55, 0.85}, {0.9, 0.75, 0.2},
                                 {0.3, 0.75, 0.35}, {0.7, 0.35, 0.8},  {0.9, 0.5, 0.25}};

void render_image(const World& world, const Pose& pose, const CameraIntrinsics& k, Tensor& img) {
  const Vec3 light = Vec3{-0.3, -0.8, 0.45} * (1.0 / Vec3{-0.3, -0.8, 0.45}.norm());
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) {
      const Vec3 dir{(u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, 1.0};
      const RayHit hit = cast_ray(world, pose.translation, dir);
      double r, g, b;
      if (hit.surface < 0) {  // sky gradient
        const double a = 1.0 - static_cast<double>(v) / (k.height - 1);
        r = 0.45 + 0.15 * a;
        g = 0.55 + 0.15 * a;
        b = 0.80;
      } else if (hit.surface == static_cast<int>(world.boxes.size())) {  // checkered ground
        const Vec3 p = pose.translation + dir * hit.t;
        const long par = static_cast<long>(std::floor(p.x / 2.0)) +
                         static_cast<long>(std::floor(p.z / 2.0));
        const double base = (par % 2 == 0) ? 0.42 : 0.24;
        const double fade = 1.0 / (1.0 + 0.012 * hit.t);
        r = g = b = base * fade;
      } else {
        const Palette& c = kPalette[hit.surface % 6];
        const double lambert = std::max(0.0, -hit.normal.dot(light));
        const double shade = 0.35 + 0.65 * lambert;
        r = c.r * shade;
        g = c.g * shade;
        b = c.b * shade;
      }
      img.at(0, v, u) = quantize_f32(r);
      img.at(1, v, u) = quantize_f32(g);
      img.at(2, v, u) = quantize_f32(b);
    }
}

// Renders the lidar lattice; counts per-box hits so the caller can verify
// that every object contributes depth pixels.
void render_lidar(const World& world, const Pose& pose, const CameraIntrinsics& k,
                  const SceneConfig& cfg, Tensor& lidar, std::vector<int>& box_hits) {
  box_hits.assign(world.boxes.size(), 0);
  for (int v = 0; v < k.height; v += cfg.lidar_step)
    for (int u = 0; u < k.width; u += cfg.lidar_step) {
      const Vec3 dir{(u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, 1.0};
      const RayHit hit = cast_ray(world, pose.translation, dir);
      if (hit.surface < 0 || hit.t > cfg.d_max) continue;
      lidar.at(v, u) = quantize_f32(hit.t);  // dir.z == 1, so t is z-depth
      if (hit.surface < static_cast<int>(world.boxes.size())) ++box_hits[hit.surface];
    }
}

bool boxes_overlap(const BBox3D& a, const BBox3D& b, double margin) {
  return std::abs(a.center.x - b.center.x) < (a.size.x + b.size.x) * 0.5 + margin &&
         std::abs(a.center.y - b.center.y) < (a.size.y + b.size.y) * 0.5 + margin &&
         std::abs(a.center.z - b.center.z) < (a.size.z + b.size.z) * 0.5 + margin;
}

// Front-face center must stay comfortably inside every frame's view.
bool visible_in_all_frames(const BBox3D& box, const SceneConfig& cfg, const CameraIntrinsics& k) {
  for (int f = 0; f < cfg.n_frames; ++f) {
    const Pose pose = camera_pose(f);
    const Vec3 front{box.center.x, box.center.y, box.center.z - box.size.z * 0.5};
    const Vec3 c = pose.to_camera(front);
    if (c.z < 5.0) return false;
    const double u = k.fx * c.x / c.z + k.cx;
    const double v = k.fy * c.y / c.z + k.cy;
    if (u < 4.0 || u > k.width - 5.0 || v < 4.0 || v > k.height - 5.0) return false;
  }
  return true;
}

bool place_boxes(World& world, const SceneConfig& cfg, const CameraIntrinsics& k, Rng& rng) {
  world.boxes.clear();
  const double z_cam_max = 0.4 * (cfg.n_frames - 1);
  for (int i = 0; i < cfg.n_objects; ++i) {
    bool placed = false;
    for (int tries = 0; tries < 200 && !placed; ++tries) {
      BBox3D b;
      b.size = Vec3{rng.uniform(1.4, 3.5), rng.uniform(1.2, 2.2), rng.uniform(1.5, 4.5)};
      b.center.x = rng.uniform(-7.0, 7.0);
      b.center.z = rng.uniform(z_cam_max + 8.0, z_cam_max + 28.0);
      b.center.y = world.ground_y - b.size.y * 0.5;  // resting on the ground
      b.yaw = 0.0;
      bool ok = visible_in_all_frames(b, cfg, k);
      for (const auto& other : world.boxes)
        if (ok && boxes_overlap(b, other, 0.8)) ok = false;
      if (ok) {
        world.boxes.push_back(b);
        placed = true;
      }
    }
    if (!placed) return false;
  }
  return true;
}

// Radar points on the camera-facing face, slightly inset so containment is
// strict. Returns false if any box fails to produce a projectable point.
bool sample_radar(const World& world, const Pose& pose, const CameraIntrinsics& k, Rng& rng,
                  std::vector<RadarPoint>& out) {
  for (const BBox3D& wb : world.boxes) {
    const int want = rng.uniform_int(1, 2);
    int got = 0;
    for (int tries = 0; tries < 25 && got < want; ++tries) {
      Vec3 wp{wb.center.x + rng.uniform(-0.4, 0.4) * wb.size.x,
              wb.center.y + rng.uniform(-0.4, 0.4) * wb.size.y,
              wb.center.z - wb.size.z * 0.5 + 0.02 * wb.size.z};
      RadarPoint rp;
      rp.position = pose.to_camera(wp);
      rp.vx = rng.uniform(-2.0, 2.0);
      rp.vy = rng.uniform(-1.0, 1.0);
      rp.rcs = rng.uniform(5.0, 20.0);
      rp.is_ghost = false;
      if (project_point(rp.position, k)) {
        out.push_back(rp);
        ++got;
      }
    }
    if (got == 0) return false;
  }
  return true;
}

void sample_ghosts(const SceneConfig& cfg, const CameraIntrinsics& k, Rng& rng,
                   std::vector<RadarPoint>& out) {
  const std::size_t n_real = out.size();
  const auto n_ghost =
      static_cast<std::size_t>(std::llround(cfg.ghost_rate * static_cast<double>(n_real)));
  for (std::size_t g = 0; g < n_ghost; ++g) {
    const int u = rng.uniform_int(0, cfg.width - 1);
    const int v = rng.uniform_int(0, cfg.height - 1);
    RadarPoint rp;
    rp.position = backproject_pixel(u, v, rng.uniform(2.0, 0.75 * cfg.d_max), k);
    rp.vx = rng.uniform(-5.0, 5.0);
    rp.vy = rng.uniform(-5.0, 5.0);
    rp.rcs = rng.uniform(-10.0, 10.0);
    rp.is_ghost = true;
    out.push_back(rp);
  }
}

}  // namespace

std::vector<Frame> generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const CameraIntrinsics k = make_intrinsics(cfg);
  k.validate();
  Rng rng(seed);

  for (int attempt = 0; attempt < 64; ++attempt) {
    World world;
    if (!place_boxes(world, cfg, k, rng)) continue;

    std::vector<Frame> frames;
    bool ok = true;
    for (int f = 0; f < cfg.n_frames && ok; ++f) {
      Frame fr;
      fr.index = f;
      fr.intrinsics = k;
      fr.pose = camera_pose(f);
      fr.image = Tensor({3, cfg.height, cfg.width});
      fr.lidar = Tensor({cfg.height, cfg.width});

      render_image(world, fr.pose, k, fr.image);
      std::vector<int> box_hits;
      render_lidar(world, fr.pose, k, cfg, fr.lidar, box_hits);
      for (int hits : box_hits)
        if (hits == 0) ok = false;  // occluded object: retry the whole scene

      if (ok) ok = sample_radar(world, fr.pose, k, rng, fr.radar);
      sample_ghosts(cfg, k, rng, fr.radar);

      for (const BBox3D& wb : world.boxes) {
        BBox3D cb = wb;
        cb.center = fr.pose.to_camera(wb.center);
        project_box_corners(cb, k);
        fr.boxes.push_back(cb);
      }
      frames.push_back(std::move(fr));
    }
    if (ok) return frames;
  }
  throw DataError("scene generation failed: could not place visible objects");
}

// ---- accumulation & densification ---------------------------------------------

Tensor accumulate_depth(const std::vector<Frame>& frames, int index, int window, bool densify) {
  if (index < 0 || index >= static_cast<int>(frames.size()))
    throw ConfigError("accumulate_depth: frame index out of range");
  if (window < 0) throw ConfigError("accumulate_depth: window must be >= 0");
  const Frame& target = frames[static_cast<std::size_t>(index)];
  const CameraIntrinsics& k = target.intrinsics;
  Tensor acc({k.height, k.width});

  const int lo = std::max(0, index - window);
  const int hi = std::min(static_cast<int>(frames.size()) - 1, index + window);
  for (int j = lo; j <= hi; ++j) {
    const Frame& src = frames[static_cast<std::size_t>(j)];
    for (int v = 0; v < k.height; ++v)
      for (int u = 0; u < k.width; ++u) {
        const double d = src.lidar.at(v, u);
        if (d <= 0.0) continue;
        const Vec3 world = src.pose.to_world(backproject_pixel(u, v, d, src.intrinsics));
        const Vec3 cam = target.pose.to_camera(world);
        const auto proj = project_point(cam, k);
        if (!proj) continue;
        const double dq = quantize_f32(cam.z);
        double& cell = acc.at(proj->v, proj->u);
        if (cell == 0.0 || dq <= cell) cell = dq;  // nearest wins, later wins ties
      }
  }
  return densify ? densify_depth(acc) : acc;
}

Tensor densify_depth(const Tensor& sparse) {
  const int h = sparse.dim(0), w = sparse.dim(1);
  bool any = false;
  for (double v : sparse.raw())
    if (v > 0.0) any = true;
  if (!any) throw DataError("densify_depth: no depth support");

  Tensor out = sparse;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (sparse.at(r, c) > 0.0) continue;
      long best_d2 = std::numeric_limits<long>::max();
      long best_idx = -1;
      const int ring_max = std::max(h, w);
      for (int ring = 1; ring <= ring_max; ++ring) {
        if (static_cast<long>(ring) * ring > best_d2) break;
        const int r0 = r - ring, r1 = r + ring, c0 = c - ring, c1 = c + ring;
        auto visit = [&](int rr, int cc) {
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) return;
          if (sparse.at(rr, cc) <= 0.0) return;
          const long dr = rr - r, dc = cc - c;
          const long d2 = dr * dr + dc * dc;
          const long idx = static_cast<long>(rr) * w + cc;
          if (d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
            best_d2 = d2;
            best_idx = idx;
          }
        };
        for (int cc = c0; cc <= c1; ++cc) {
          visit(r0, cc);
          visit(r1, cc);
        }
        for (int rr = r0 + 1; rr <= r1 - 1; ++rr) {
          visit(rr, c0);
          visit(rr, c1);
        }
      }
      out.at(r, c) = sparse[static_cast<std::size_t>(best_idx)];
    }
  return out;
}

// ---- mirroring --------------------------------------------------------------------

namespace {

Tensor mirror_cols(const Tensor& t) {
  Tensor out(t.shape());
  if (t.ndim() == 2) {
    for (int r = 0; r < t.dim(0); ++r)
      for (int c = 0; c < t.dim(1); ++c) out.at(r, c) = t.at(r, t.dim(1) - 1 - c);
  } else {
    for (int ch = 0; ch < t.dim(0); ++ch)
      for (int r = 0; r < t.dim(1); ++r)
        for (int c = 0; c < t.dim(2); ++c) out.at(ch, r, c) = t.at(ch, r, t.dim(2) - 1 - c);
  }
  return out;
}

}  // namespace

Frame mirror_frame(const Frame& f) {
  const CameraIntrinsics& k = f.intrinsics;
  // Pixel mirror u -> W-1-u corresponds to x -> s*z - x in camera space.
  const double s = (k.width - 2.0 * k.cx) / k.fx;
  Frame out;
  out.index = f.index;
  out.intrinsics = k;
  out.pose = f.pose;  // pose kept; a mirrored frame is a standalone sample
  out.image = mirror_cols(f.image);
  out.lidar = mirror_cols(f.lidar);
  out.radar = f.radar;
  for (auto& rp : out.radar) rp.position.x = s * rp.position.z - rp.position.x;
  out.boxes = f.boxes;
  for (auto& b : out.boxes) {
    b.center.x = s * b.center.z - b.center.x;
    b.yaw = -b.yaw;
    project_box_corners(b, k);
  }
  return out;
}

}  // namespace cafnet
