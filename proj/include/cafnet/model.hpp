#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cafnet/autodiff.hpp"
#include "cafnet/tensor.hpp"

namespace cafnet {

// Two-stage depth network configuration. Defaults are the toy scale used
// throughout; resolutions must be divisible by 2^scales.
struct ModelConfig {
  int height = 64, width = 128;
  int image_channels = 3;
  int radar_channels = 5;
  int scales = 4;  ///< encoder pyramid depth; strides 2..2^scales

  std::string fusion = "cagf";  ///< cagf | gf | add | concat
  bool use_scm = true;          ///< sparse-conv preprocessing of the radar image
  bool use_rm = true;           ///< refinement: thresholded coarse depth as an extra channel
  bool use_confidence = true;   ///< confidence head + gate; off forces gf fusion

  double conf_threshold = 0.4;  ///< T in the refinement mask
  double d_min = 0.001, d_max = 80.0;

  std::vector<int> image_widths = {16, 32, 64, 128};
  std::vector<int> radar_widths = {8, 16, 32, 64};
  std::vector<int> decoder_widths = {128, 64, 32, 16, 16};  ///< scales 1/16 .. 1/1
  int scm_width = 16;

  void validate() const;  ///< throws ConfigError

  // When the confidence branch is off there is nothing to threshold; the
  // refinement module is effectively disabled and fusion degrades to gf.
  bool effective_rm() const { return use_rm && use_confidence; }
  std::string effective_fusion() const {
    return (!use_confidence && fusion == "cagf") ? "gf" : fusion;
  }
};

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

// M-hat = 1 where conf >= threshold, else 0 (shape-preserving).
Tensor refine_mask(const Tensor& conf, double threshold);

// Confidence-aware gated fusion at one scale. f_r: {C_r,h,w}, f_c: {C_c,h,w},
// p: {C_r}, q: {C_r,C_c}, conf: {1,H,W} with H = h*pool.
//   alpha = sigmoid(p . f_r)        {1,h,w}
//   beta  = q^T f_r                 {C_c,h,w}
//   c-hat = avg_pool(conf, pool)    {1,h,w}   (skipped when use_conf = false)
//   out   = alpha * beta * c-hat + f_c
// With conf identically 1 the gate is the exact multiplicative identity, so
// cagf and gf agree bitwise.
ad::Var cagf_fuse(ad::Tape& t, ad::Var f_r, ad::Var f_c, ad::Var p, ad::Var q, ad::Var conf,
                  int pool, bool use_conf);

class CafNet {
 public:
  CafNet(ModelConfig config, std::uint64_t seed);  ///< fresh seeded init

  const ModelConfig& config() const { return config_; }
  ad::ParamSet& params() { return params_; }
  const ad::ParamSet& params() const { return params_; }

  struct Forward {
    ad::Var dc;    ///< coarse depth {1,H,W} in [d_min, d_max]
    ad::Var conf;  ///< confidence {1,H,W} in (0,1); invalid when disabled
    ad::Var dcr;   ///< refined coarse depth {1,H,W}; invalid when rm disabled
    ad::Var df;    ///< fused depth {1,H,W} in [d_min, d_max]
    std::vector<ad::Var> image_feats;  ///< per-scale image features (stage 1)
    std::vector<ad::Var> fused_feats;  ///< per-scale stage-2 fused features
    Tensor refine_mask;                ///< the binary mask; empty when rm disabled
  };

  // Builds the full two-stage graph on the tape. image: {3,H,W},
  // radar: {C_R,H,W} with the validity mask in its last channel.
  // conf_override, when given, replaces the predicted confidence everywhere
  // it is consumed (refinement, gating, stage-2 input) — a test hook for the
  // gating degeneracies.
  Forward forward(ad::Tape& t, const Tensor& image, const Tensor& radar,
                  const Tensor* conf_override = nullptr);

  // Named-parameter archive with config echo; round-trips bitwise.
  void save(const std::filesystem::path& path) const;
  static CafNet load(const std::filesystem::path& path);

 private:
  CafNet(ModelConfig config);  // uninitialized params (used by load)
  void init_params(std::uint64_t seed);

  ModelConfig config_;
  ad::ParamSet params_;
};

}  // namespace cafnet
