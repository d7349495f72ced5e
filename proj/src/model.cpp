#include "cafnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cafnet/common.hpp"

namespace cafnet {

namespace {

using json = nlohmann::json;

// ---- config ----------------------------------------------------------------

const char* kFusionNames[] = {"cagf", "gf", "add", "concat"};

bool known_fusion(const std::string& f) {
  for (const char* n : kFusionNames)
    if (f == n) return true;
  return false;
}

// ---- parameter bookkeeping ---------------------------------------------------

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  double init_scale;  // stddev of the gaussian init; 0 = zero init
};

// The full parameter list in registration order. Shapes are derived from the
// config only, so fresh construction and checkpoint load agree.
std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  std::vector<ParamSpec> specs;
  const auto conv = [&specs](const std::string& name, int cout, int cin, int k) {
    specs.push_back({name + ".w", {cout, cin, k, k}, std::sqrt(2.0 / (cin * k * k))});
    specs.push_back({name + ".b", {cout}, 0.0});
  };
  const auto encoder = [&](const std::string& prefix, int in_ch, const std::vector<int>& widths) {
    int cin = in_ch;
    for (int s = 0; s < c.scales; ++s) {
      const int w = widths[static_cast<std::size_t>(s)];
      conv(prefix + ".s" + std::to_string(s) + ".down", w, cin, 3);
      conv(prefix + ".s" + std::to_string(s) + ".res.c1", w, w, 3);
      conv(prefix + ".s" + std::to_string(s) + ".res.c2", w, w, 3);
      cin = w;
    }
  };
  // Decoder consuming per-scale skip features of the given widths. The full-
  // resolution stage has no skip.
  const auto decoder = [&](const std::string& prefix, const std::vector<int>& skip_widths) {
    const std::vector<int>& dw = c.decoder_widths;
    conv(prefix + ".bott", dw[0], skip_widths[static_cast<std::size_t>(c.scales - 1)], 3);
    for (int s = c.scales - 2; s >= 0; --s) {
      const int di = c.scales - 1 - s;  // decoder_widths index for this stage
      conv(prefix + ".m" + std::to_string(s), dw[static_cast<std::size_t>(di)],
           dw[static_cast<std::size_t>(di - 1)] + skip_widths[static_cast<std::size_t>(s)], 3);
    }
    conv(prefix + ".full", dw[static_cast<std::size_t>(c.scales)],
         dw[static_cast<std::size_t>(c.scales - 1)], 3);
  };

  if (c.use_scm) {
    int cin = c.radar_channels;
    for (int l = 0; l < 4; ++l) {
      conv("scm.l" + std::to_string(l), c.scm_width, cin, 3);
      cin = c.scm_width;
    }
  }
  encoder("enc_i", c.image_channels, c.image_widths);
  encoder("enc_r1", c.use_scm ? c.scm_width : c.radar_channels, c.radar_widths);

  std::vector<int> skip1(static_cast<std::size_t>(c.scales));
  for (int s = 0; s < c.scales; ++s)
    skip1[static_cast<std::size_t>(s)] =
        c.image_widths[static_cast<std::size_t>(s)] + c.radar_widths[static_cast<std::size_t>(s)];
  decoder("dec1", skip1);
  conv("dec1.depth", 1, c.decoder_widths[static_cast<std::size_t>(c.scales)], 3);
  if (c.use_confidence)
    conv("dec1.conf", 1, c.decoder_widths[static_cast<std::size_t>(c.scales)], 3);

  const int stage2_in = c.radar_channels + (c.use_confidence ? (c.effective_rm() ? 1 : 2) : 1);
  encoder("enc_r2", stage2_in, c.radar_widths);

  const std::string fusion = c.effective_fusion();
  for (int s = 0; s < c.scales; ++s) {
    const int cr = c.radar_widths[static_cast<std::size_t>(s)];
    const int cc = c.image_widths[static_cast<std::size_t>(s)];
    const std::string base = "fuse.s" + std::to_string(s);
    if (fusion == "cagf" || fusion == "gf") {
      specs.push_back({base + ".p", {cr}, 1.0 / std::sqrt(static_cast<double>(cr))});
      specs.push_back({base + ".q", {cr, cc}, 1.0 / std::sqrt(static_cast<double>(cr))});
    } else if (fusion == "concat") {
      conv(base + ".proj", cc, cr + cc, 1);
    }  // add: no parameters
  }
  decoder("dec2", c.image_widths);
  conv("dec2.depth", 1, c.decoder_widths[static_cast<std::size_t>(c.scales)], 3);
  return specs;
}

// ---- little-endian checkpoint encoding --------------------------------------

constexpr char kCkptMagic[8] = {'C', 'A', 'F', 'C', 'K', 'P', '0', '1'};

template <typename T>
void append_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_le(const std::string& in, std::size_t& off, const std::string& path) {
  if (off + sizeof(T) > in.size()) throw DataError("checkpoint truncated: " + path);
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (scales < 1 || scales > 6) throw ConfigError("model: scales must be in [1,6]");
  const int div = 1 << scales;
  if (height <= 0 || width <= 0 || height % div != 0 || width % div != 0)
    throw ConfigError("model: height and width must be positive and divisible by 2^scales");
  if (image_channels < 1 || radar_channels < 1) throw ConfigError("model: channels must be >= 1");
  if (!known_fusion(fusion)) throw ConfigError("model: unknown fusion variant: " + fusion);
  if (conf_threshold < 0.0 || conf_threshold > 1.0)
    throw ConfigError("model: conf_threshold must be in [0,1]");
  if (d_min <= 0.0 || d_max <= d_min) throw ConfigError("model: need 0 < d_min < d_max");
  if (static_cast<int>(image_widths.size()) != scales ||
      static_cast<int>(radar_widths.size()) != scales ||
      static_cast<int>(decoder_widths.size()) != scales + 1)
    throw ConfigError("model: width lists must have one entry per scale (+1 for the decoder)");
  for (int w : image_widths)
    if (w < 1) throw ConfigError("model: image widths must be >= 1");
  for (int w : radar_widths)
    if (w < 1) throw ConfigError("model: radar widths must be >= 1");
  for (int w : decoder_widths)
    if (w < 1) throw ConfigError("model: decoder widths must be >= 1");
  if (scm_width < 1) throw ConfigError("model: scm_width must be >= 1");
  if (effective_fusion() == "add" && radar_widths != image_widths)
    throw ConfigError("model: fusion 'add' needs matching radar and image widths");
}

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["image_channels"] = c.image_channels;
  j["radar_channels"] = c.radar_channels;
  j["scales"] = c.scales;
  j["fusion"] = c.fusion;
  j["use_scm"] = c.use_scm;
  j["use_rm"] = c.use_rm;
  j["use_confidence"] = c.use_confidence;
  j["conf_threshold"] = c.conf_threshold;
  j["d_min"] = c.d_min;
  j["d_max"] = c.d_max;
  j["image_widths"] = c.image_widths;
  j["radar_widths"] = c.radar_widths;
  j["decoder_widths"] = c.decoder_widths;
  j["scm_width"] = c.scm_width;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("model config: invalid json");
  ModelConfig c;
  try {
    if (j.contains("height")) c.height = j.at("height").get<int>();
    if (j.contains("width")) c.width = j.at("width").get<int>();
    if (j.contains("image_channels")) c.image_channels = j.at("image_channels").get<int>();
    if (j.contains("radar_channels")) c.radar_channels = j.at("radar_channels").get<int>();
    if (j.contains("scales")) c.scales = j.at("scales").get<int>();
    if (j.contains("fusion")) c.fusion = j.at("fusion").get<std::string>();
    if (j.contains("use_scm")) c.use_scm = j.at("use_scm").get<bool>();
    if (j.contains("use_rm")) c.use_rm = j.at("use_rm").get<bool>();
    if (j.contains("use_confidence")) c.use_confidence = j.at("use_confidence").get<bool>();
    if (j.contains("conf_threshold")) c.conf_threshold = j.at("conf_threshold").get<double>();
    if (j.contains("d_min")) c.d_min = j.at("d_min").get<double>();
    if (j.contains("d_max")) c.d_max = j.at("d_max").get<double>();
    if (j.contains("image_widths")) c.image_widths = j.at("image_widths").get<std::vector<int>>();
    if (j.contains("radar_widths")) c.radar_widths = j.at("radar_widths").get<std::vector<int>>();
    if (j.contains("decoder_widths"))
      c.decoder_widths = j.at("decoder_widths").get<std::vector<int>>();
    if (j.contains("scm_width")) c.scm_width = j.at("scm_width").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor refine_mask(const Tensor& conf, double threshold) {
  Tensor m(conf.shape());
  for (std::size_t i = 0; i < conf.size(); ++i) m[i] = conf[i] >= threshold ? 1.0 : 0.0;
  return m;
}

ad::Var cagf_fuse(ad::Tape& t, ad::Var f_r, ad::Var f_c, ad::Var p, ad::Var q, ad::Var conf,
                  int pool, bool use_conf) {
  ad::Var alpha = ad::sigmoid(t, ad::channel_dot(t, f_r, p));
  ad::Var beta = ad::channel_project(t, f_r, q);
  ad::Var gate = alpha;
  if (use_conf) {
    ad::Var chat = pool > 1 ? ad::avg_pool(t, conf, pool) : conf;
    gate = ad::mul(t, alpha, chat);
  }
  return ad::add(t, ad::broadcast_mul(t, beta, gate), f_c);
}

CafNet::CafNet(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

CafNet::CafNet(ModelConfig config, std::uint64_t seed) : CafNet(std::move(config)) {
  init_params(seed);
}

void CafNet::init_params(std::uint64_t seed) {
  Rng rng(seed);
  for (const ParamSpec& s : param_specs(config_)) {
    Tensor t(s.shape);
    if (s.init_scale > 0.0)
      for (auto& v : t.raw()) v = rng.normal() * s.init_scale;
    params_.add(s.name, std::move(t));
  }
}

CafNet::Forward CafNet::forward(ad::Tape& t, const Tensor& image, const Tensor& radar,
                                const Tensor* conf_override) {
  const ModelConfig& c = config_;
  // The network is fully convolutional: any resolution divisible by 2^scales
  // runs; config.height/width are only the declared training dims.
  if (image.ndim() != 3 || image.dim(0) != c.image_channels)
    throw ConfigError("forward: image shape disagrees with the model config");
  const int div = 1 << c.scales;
  if (image.dim(1) <= 0 || image.dim(2) <= 0 || image.dim(1) % div != 0 || image.dim(2) % div != 0)
    throw ConfigError("forward: input dims " + std::to_string(image.dim(1)) + "x" +
                      std::to_string(image.dim(2)) + " are not divisible by " + std::to_string(div) +
                      "; pad or crop the input");
  if (radar.ndim() != 3 || radar.dim(0) != c.radar_channels || radar.dim(1) != image.dim(1) ||
      radar.dim(2) != image.dim(2))
    throw ConfigError("forward: radar shape disagrees with the image");

  ad::ParamSet& ps = params_;
  const auto w = [&](const std::string& n) { return t.param(ps, n + ".w"); };
  const auto b = [&](const std::string& n) { return t.param(ps, n + ".b"); };
  const auto conv = [&](ad::Var x, const std::string& n, int stride) {
    return ad::conv2d(t, x, w(n), b(n), stride);
  };
  const auto encoder = [&](ad::Var x, const std::string& prefix) {
    std::vector<ad::Var> feats;
    for (int s = 0; s < c.scales; ++s) {
      const std::string base = prefix + ".s" + std::to_string(s);
      x = ad::relu(t, conv(x, base + ".down", 2));
      ad::Var h = ad::relu(t, conv(x, base + ".res.c1", 1));
      x = ad::add(t, x, conv(h, base + ".res.c2", 1));
      feats.push_back(x);
    }
    return feats;
  };
  const auto decoder = [&](const std::vector<ad::Var>& skips, const std::string& prefix) {
    ad::Var x = ad::relu(t, conv(skips[static_cast<std::size_t>(c.scales - 1)], prefix + ".bott", 1));
    for (int s = c.scales - 2; s >= 0; --s) {
      x = ad::upsample2(t, x);
      x = ad::concat_ch(t, {x, skips[static_cast<std::size_t>(s)]});
      x = ad::relu(t, conv(x, prefix + ".m" + std::to_string(s), 1));
    }
    x = ad::upsample2(t, x);
    return ad::relu(t, conv(x, prefix + ".full", 1));
  };
  const auto depth_head = [&](ad::Var feat, const std::string& n) {
    ad::Var logit = conv(feat, n, 1);
    return ad::add_scalar(t, ad::scale(t, ad::sigmoid(t, logit), c.d_max - c.d_min), c.d_min);
  };

  Forward out;
  ad::Var image_var = t.constant(image);
  ad::Var radar_var = t.constant(radar);

  // ---- stage 1 ----
  out.image_feats = encoder(image_var, "enc_i");

  ad::Var radar_in = radar_var;
  if (c.use_scm) {
    Tensor mask({1, image.dim(1), image.dim(2)});
    for (int i = 0; i < image.dim(1); ++i)
      for (int j = 0; j < image.dim(2); ++j)
        mask.at(0, i, j) = radar.at(c.radar_channels - 1, i, j) > 0.0 ? 1.0 : 0.0;
    ad::Var x = radar_var;
    for (int l = 0; l < 4; ++l) {
      const std::string base = "scm.l" + std::to_string(l);
      ad::SparseConvOut sc = ad::sparse_conv(t, x, mask, w(base), b(base), 1e-8);
      mask = sc.mask;
      x = l < 3 ? ad::relu(t, sc.y) : sc.y;
    }
    radar_in = x;
  }
  const std::vector<ad::Var> radar_feats1 = encoder(radar_in, "enc_r1");

  std::vector<ad::Var> skips1;
  for (int s = 0; s < c.scales; ++s)
    skips1.push_back(ad::concat_ch(t, {out.image_feats[static_cast<std::size_t>(s)],
                                       radar_feats1[static_cast<std::size_t>(s)]}));
  ad::Var dec1 = decoder(skips1, "dec1");
  out.dc = depth_head(dec1, "dec1.depth");

  ad::Var conf_used;  // what downstream consumers see
  if (c.use_confidence) {
    out.conf = ad::sigmoid(t, conv(dec1, "dec1.conf", 1));
    conf_used = out.conf;
    if (conf_override != nullptr) {
      Tensor o = *conf_override;
      if (o.ndim() == 2) o = Tensor({1, o.dim(0), o.dim(1)}, o.raw());
      if (o.ndim() != 3 || o.dim(0) != 1 || o.dim(1) != image.dim(1) || o.dim(2) != image.dim(2))
        throw ConfigError("forward: confidence override must be {1,H,W}");
      conf_used = t.constant(o);
    }
  }

  // ---- stage 2 input ----
  std::vector<ad::Var> stage2_parts{radar_var};
  if (c.use_confidence && c.effective_rm()) {
    out.refine_mask = refine_mask(t.value(conf_used), c.conf_threshold);
    out.dcr = ad::mul_mask(t, out.dc, out.refine_mask);
    stage2_parts.push_back(out.dcr);
  } else if (c.use_confidence) {
    stage2_parts.push_back(out.dc);
    stage2_parts.push_back(conf_used);
  } else {
    stage2_parts.push_back(out.dc);
  }
  ad::Var stage2_in = ad::concat_ch(t, stage2_parts);

  // ---- stage 2 ----
  const std::vector<ad::Var> radar_feats2 = encoder(stage2_in, "enc_r2");
  const std::string fusion = c.effective_fusion();
  for (int s = 0; s < c.scales; ++s) {
    ad::Var fr = radar_feats2[static_cast<std::size_t>(s)];
    ad::Var fc = out.image_feats[static_cast<std::size_t>(s)];
    const std::string base = "fuse.s" + std::to_string(s);
    ad::Var fused;
    if (fusion == "cagf" || fusion == "gf") {
      fused = cagf_fuse(t, fr, fc, t.param(ps, base + ".p"), t.param(ps, base + ".q"),
                        conf_used, 1 << (s + 1), fusion == "cagf");
    } else if (fusion == "add") {
      fused = ad::add(t, fr, fc);
    } else {  // concat
      fused = conv(ad::concat_ch(t, {fr, fc}), base + ".proj", 1);
    }
    out.fused_feats.push_back(fused);
  }
  out.df = depth_head(decoder(out.fused_feats, "dec2"), "dec2.depth");
  return out;
}

void CafNet::save(const std::filesystem::path& path) const {
  std::string body;
  append_le<std::uint32_t>(body, 1);  // format version
  const std::string cfg = model_config_to_json(config_);
  append_le<std::uint32_t>(body, static_cast<std::uint32_t>(cfg.size()));
  body += cfg;
  const auto& entries = params_.entries();
  append_le<std::uint32_t>(body, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    append_le<std::uint32_t>(body, static_cast<std::uint32_t>(e.name.size()));
    body += e.name;
    append_le<std::uint32_t>(body, static_cast<std::uint32_t>(e.value.ndim()));
    for (int d = 0; d < e.value.ndim(); ++d)
      append_le<std::uint32_t>(body, static_cast<std::uint32_t>(e.value.dim(d)));
    for (std::size_t i = 0; i < e.value.size(); ++i) append_le<double>(body, e.value[i]);
  }

  std::string blob(kCkptMagic, sizeof kCkptMagic);
  blob += body;
  append_le<std::uint64_t>(blob, fnv1a64(body.data(), body.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for write: " + path.string());
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw DataError("write failed: " + path.string());
}

CafNet CafNet::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (blob.size() < sizeof kCkptMagic + sizeof(std::uint64_t))
    throw DataError("checkpoint truncated: " + name);
  if (std::memcmp(blob.data(), kCkptMagic, sizeof kCkptMagic) != 0)
    throw DataError("not a checkpoint file: " + name);

  const std::size_t body_end = blob.size() - sizeof(std::uint64_t);
  std::size_t off = body_end;
  const std::uint64_t want = read_le<std::uint64_t>(blob, off, name);
  const std::uint64_t got = fnv1a64(blob.data() + sizeof kCkptMagic, body_end - sizeof kCkptMagic);
  if (want != got) throw DataError("checkpoint checksum mismatch: " + name);

  off = sizeof kCkptMagic;
  const auto version = read_le<std::uint32_t>(blob, off, name);
  if (version != 1) throw DataError("unsupported checkpoint version: " + name);
  const auto cfg_len = read_le<std::uint32_t>(blob, off, name);
  if (off + cfg_len > body_end) throw DataError("checkpoint truncated: " + name);
  ModelConfig config = model_config_from_json(blob.substr(off, cfg_len));
  off += cfg_len;

  CafNet net(std::move(config));
  const auto n_params = read_le<std::uint32_t>(blob, off, name);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const auto name_len = read_le<std::uint32_t>(blob, off, name);
    if (off + name_len > body_end) throw DataError("checkpoint truncated: " + name);
    const std::string pname = blob.substr(off, name_len);
    off += name_len;
    const auto rank = read_le<std::uint32_t>(blob, off, name);
    if (rank < 1 || rank > 4) throw DataError("checkpoint has a bad tensor rank: " + name);
    std::vector<int> shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = read_le<std::uint32_t>(blob, off, name);
      if (dim == 0 || dim > (1u << 20)) throw DataError("checkpoint has a bad dim: " + name);
      shape.push_back(static_cast<int>(dim));
    }
    Tensor tensor(shape);
    for (std::size_t k = 0; k < tensor.size(); ++k) tensor[k] = read_le<double>(blob, off, name);
    net.params_.add(pname, std::move(tensor));
  }
  if (off != body_end) throw DataError("checkpoint has trailing bytes: " + name);

  // The archive must cover exactly the parameters this config needs.
  const std::vector<ParamSpec> specs = param_specs(net.config_);
  if (net.params_.entries().size() != specs.size())
    throw DataError("checkpoint parameter count disagrees with its config: " + name);
  for (const ParamSpec& s : specs) {
    if (!net.params_.has(s.name)) throw DataError("checkpoint missing parameter: " + s.name);
    if (net.params_.at(s.name).value.shape() != s.shape)
      throw DataError("checkpoint parameter shape mismatch: " + s.name);
  }
  return net;
}

}  // namespace cafnet
