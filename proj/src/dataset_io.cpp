#include "cafnet/dataset_io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cafnet/common.hpp"

namespace cafnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kGridMagic[8] = {'C', 'A', 'F', 'G', 'R', 'D', '0', '1'};

[[noreturn]] void fail(const fs::path& p, const std::string& what) {
  throw DataError(what + ": " + p.string());
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_all(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(p, "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(p, "write failed");
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(p, "missing file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
void append_le(std::string& s, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  s.append(buf, sizeof(T));
}

template <typename T>
T read_le(const std::string& s, std::size_t& off, const fs::path& p) {
  if (off + sizeof(T) > s.size()) fail(p, "truncated file");
  T v;
  std::memcpy(&v, s.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

void save_grid(const fs::path& path, const Tensor& grid) {
  std::string bytes(kGridMagic, sizeof kGridMagic);
  append_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(grid.ndim()));
  for (int i = 0; i < grid.ndim(); ++i)
    append_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(grid.dim(i)));
  std::string payload;
  payload.reserve(grid.size() * 4);
  for (double v : grid.raw()) append_le<float>(payload, static_cast<float>(v));
  append_le<std::uint64_t>(bytes, fnv1a64(payload.data(), payload.size()));
  bytes += payload;
  write_all(path, bytes);
}

Tensor load_grid(const fs::path& path) {
  const std::string bytes = read_all(path);
  std::size_t off = 0;
  if (bytes.size() < sizeof kGridMagic ||
      std::memcmp(bytes.data(), kGridMagic, sizeof kGridMagic) != 0)
    fail(path, "bad grid magic");
  off = sizeof kGridMagic;
  const auto rank = read_le<std::uint32_t>(bytes, off, path);
  if (rank == 0 || rank > 4) fail(path, "bad grid rank");
  std::vector<int> shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = read_le<std::uint32_t>(bytes, off, path);
    if (d == 0 || d > (1u << 20)) fail(path, "bad grid dimension");
    shape.push_back(static_cast<int>(d));
    n *= d;
  }
  const auto checksum = read_le<std::uint64_t>(bytes, off, path);
  if (bytes.size() - off != n * 4) fail(path, "truncated file");
  if (fnv1a64(bytes.data() + off, n * 4) != checksum) fail(path, "checksum mismatch");
  Tensor t(shape);
  for (std::size_t i = 0; i < n; ++i)
    t[i] = static_cast<double>(read_le<float>(bytes, off, path));
  return t;
}

// ---- CSV ------------------------------------------------------------------------

namespace {

void save_radar_csv(const fs::path& p, const std::vector<RadarPoint>& pts) {
  std::string s = "x,y,z,vx,vy,rcs,is_ghost\n";
  for (const auto& r : pts) {
    s += fmt_double(r.position.x) + "," + fmt_double(r.position.y) + "," +
         fmt_double(r.position.z) + "," + fmt_double(r.vx) + "," + fmt_double(r.vy) + "," +
         fmt_double(r.rcs) + "," + (r.is_ghost ? "1" : "0") + "\n";
  }
  write_all(p, s);
}

void save_boxes_csv(const fs::path& p, const std::vector<BBox3D>& boxes) {
  std::string s = "cx,cy,cz,sx,sy,sz,yaw,x1,y1,x2,y2\n";
  for (const auto& b : boxes) {
    s += fmt_double(b.center.x) + "," + fmt_double(b.center.y) + "," + fmt_double(b.center.z) +
         "," + fmt_double(b.size.x) + "," + fmt_double(b.size.y) + "," + fmt_double(b.size.z) +
         "," + fmt_double(b.yaw) + "," + std::to_string(b.x1) + "," + std::to_string(b.y1) + "," +
         std::to_string(b.x2) + "," + std::to_string(b.y2) + "\n";
  }
  write_all(p, s);
}

std::vector<std::vector<std::string>> parse_csv(const fs::path& p, const std::string& header,
                                                std::size_t n_cols) {
  std::istringstream in(read_all(p));
  std::string line;
  if (!std::getline(in, line) || line != header) fail(p, "bad csv header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != n_cols) fail(p, "bad csv row");
    rows.push_back(std::move(cells));
  }
  return rows;
}

double to_double(const std::string& s, const fs::path& p) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') fail(p, "bad numeric cell");
  return v;
}

std::vector<RadarPoint> load_radar_csv(const fs::path& p) {
  std::vector<RadarPoint> pts;
  for (const auto& row : parse_csv(p, "x,y,z,vx,vy,rcs,is_ghost", 7)) {
    RadarPoint r;
    r.position = {to_double(row[0], p), to_double(row[1], p), to_double(row[2], p)};
    r.vx = to_double(row[3], p);
    r.vy = to_double(row[4], p);
    r.rcs = to_double(row[5], p);
    r.is_ghost = row[6] == "1";
    pts.push_back(r);
  }
  return pts;
}

std::vector<BBox3D> load_boxes_csv(const fs::path& p) {
  std::vector<BBox3D> boxes;
  for (const auto& row : parse_csv(p, "cx,cy,cz,sx,sy,sz,yaw,x1,y1,x2,y2", 11)) {
    BBox3D b;
    b.center = {to_double(row[0], p), to_double(row[1], p), to_double(row[2], p)};
    b.size = {to_double(row[3], p), to_double(row[4], p), to_double(row[5], p)};
    b.yaw = to_double(row[6], p);
    b.x1 = static_cast<int>(to_double(row[7], p));
    b.y1 = static_cast<int>(to_double(row[8], p));
    b.x2 = static_cast<int>(to_double(row[9], p));
    b.y2 = static_cast<int>(to_double(row[10], p));
    boxes.push_back(b);
  }
  return boxes;
}

json intrinsics_json(const CameraIntrinsics& k) {
  return json{{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx},
              {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

CameraIntrinsics intrinsics_from(const json& j) {
  CameraIntrinsics k;
  k.fx = j.at("fx");
  k.fy = j.at("fy");
  k.cx = j.at("cx");
  k.cy = j.at("cy");
  k.width = j.at("width");
  k.height = j.at("height");
  return k;
}

std::string frame_dir_name(int i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "frame_%06d", i);
  return buf;
}

json parse_json_file(const fs::path& p) {
  json j = json::parse(read_all(p), nullptr, false);
  if (j.is_discarded()) fail(p, "invalid json");
  return j;
}

}  // namespace

void save_dataset(const std::vector<Frame>& frames, const DatasetManifest& manifest,
                  const fs::path& dir) {
  if (manifest.frame_count != static_cast<int>(frames.size()))
    throw DataError("manifest frame count does not match frames");
  fs::create_directories(dir);
  for (const Frame& f : frames) {
    const fs::path fd = dir / frame_dir_name(f.index);
    fs::create_directories(fd);
    save_grid(fd / "image.raw", f.image);
    save_grid(fd / "lidar.raw", f.lidar);
    save_radar_csv(fd / "radar.csv", f.radar);
    save_boxes_csv(fd / "boxes.csv", f.boxes);
    json meta;
    meta["index"] = f.index;
    meta["intrinsics"] = intrinsics_json(f.intrinsics);
    meta["pose"] = {{"rotation", f.pose.rotation.m}, {"translation", std::array<double, 3>{
        f.pose.translation.x, f.pose.translation.y, f.pose.translation.z}}};
    write_all(fd / "meta.json", meta.dump(2) + "\n");
  }
  json m;
  m["version"] = manifest.version;
  m["seed"] = manifest.seed;
  m["frame_count"] = manifest.frame_count;
  m["height"] = manifest.height;
  m["width"] = manifest.width;
  m["channel_layout"] = manifest.channel_layout;
  m["splits"] = {{"train", manifest.train_ids}, {"val", manifest.val_ids}};
  write_all(dir / "manifest.json", m.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mp = dir / "manifest.json";
  json m = parse_json_file(mp);
  Dataset ds;
  ds.manifest.version = m.at("version");
  if (ds.manifest.version != 1) fail(mp, "unsupported dataset version");
  ds.manifest.seed = m.at("seed");
  ds.manifest.frame_count = m.at("frame_count");
  ds.manifest.height = m.at("height");
  ds.manifest.width = m.at("width");
  ds.manifest.channel_layout = m.at("channel_layout");
  ds.manifest.train_ids = m.at("splits").at("train").get<std::vector<int>>();
  ds.manifest.val_ids = m.at("splits").at("val").get<std::vector<int>>();

  for (int i = 0; i < ds.manifest.frame_count; ++i) {
    const fs::path fd = dir / frame_dir_name(i);
    if (!fs::exists(fd)) fail(mp, "manifest frame count does not match files on disk");
    Frame f;
    f.image = load_grid(fd / "image.raw");
    f.lidar = load_grid(fd / "lidar.raw");
    f.radar = load_radar_csv(fd / "radar.csv");
    f.boxes = load_boxes_csv(fd / "boxes.csv");
    json meta = parse_json_file(fd / "meta.json");
    f.index = meta.at("index");
    f.intrinsics = intrinsics_from(meta.at("intrinsics"));
    const auto rot = meta.at("pose").at("rotation").get<std::array<double, 9>>();
    f.pose.rotation.m = rot;
    const auto tr = meta.at("pose").at("translation").get<std::array<double, 3>>();
    f.pose.translation = {tr[0], tr[1], tr[2]};
    f.pose.validate();
    if (f.image.ndim() != 3 || f.image.dim(1) != ds.manifest.height ||
        f.image.dim(2) != ds.manifest.width)
      fail(fd / "image.raw", "grid dims disagree with manifest");
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

void save_gt(const std::vector<FrameGt>& frames, const GtManifest& manifest,
             const fs::path& dir) {
  if (manifest.frame_count != static_cast<int>(frames.size()))
    throw DataError("gt manifest frame count does not match frames");
  fs::create_directories(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const fs::path fd = dir / frame_dir_name(static_cast<int>(i));
    fs::create_directories(fd);
    save_grid(fd / "dacc.raw", frames[i].dacc);
    save_grid(fd / "dacc_raw.raw", frames[i].dacc_raw);
    save_grid(fd / "conf.raw", frames[i].conf);
  }
  json m;
  m["version"] = manifest.version;
  m["frame_count"] = manifest.frame_count;
  m["tau"] = manifest.tau;
  m["patch_w"] = manifest.patch_w;
  m["patch_h"] = manifest.patch_h;
  m["window"] = manifest.window;
  m["style"] = manifest.style;
  write_all(dir / "gt_manifest.json", m.dump(2) + "\n");
}

GtData load_gt(const fs::path& dir) {
  const fs::path mp = dir / "gt_manifest.json";
  json m = parse_json_file(mp);
  GtData gt;
  gt.manifest.version = m.at("version");
  if (gt.manifest.version != 1) fail(mp, "unsupported gt version");
  gt.manifest.frame_count = m.at("frame_count");
  gt.manifest.tau = m.at("tau");
  gt.manifest.patch_w = m.at("patch_w");
  gt.manifest.patch_h = m.at("patch_h");
  gt.manifest.window = m.at("window");
  gt.manifest.style = m.at("style");
  for (int i = 0; i < gt.manifest.frame_count; ++i) {
    const fs::path fd = dir / frame_dir_name(i);
    if (!fs::exists(fd)) fail(mp, "gt manifest frame count does not match files on disk");
    FrameGt g;
    g.dacc = load_grid(fd / "dacc.raw");
    g.dacc_raw = load_grid(fd / "dacc_raw.raw");
    g.conf = load_grid(fd / "conf.raw");
    gt.frames.push_back(std::move(g));
  }
  return gt;
}

}  // namespace cafnet
