#pragma once

#include "cafnet/autodiff.hpp"
#include "cafnet/tensor.hpp"

namespace cafnet {

struct LossBreakdown {
  double l_depth = 0.0;
  double l_smooth = 0.0;
  double l_conf = 0.0;
  double total = 0.0;  ///< l_depth + l_conf + lambda * l_smooth, in that order
};

// Plain (non-differentiable) evaluations. The tape builders below mirror the
// same summation order, so plain and graph values agree bitwise.

// (m/|O|) sum |dacc - dc| + (1/|O|) sum |dacc - df| over O = {dacc > 0}.
double depth_loss(const Tensor& dc, const Tensor& df, const Tensor& dacc, double m);

// Mean over interior pixels of |du(df)| e^{-|du(L)|} + |dv(df)| e^{-|dv(L)|},
// forward differences, L = channel-mean luminance of the image, each
// direction averaged without its last column/row.
double smoothness_loss(const Tensor& df, const Tensor& image);

// Binary cross-entropy over the full domain with c_hat clamped to
// [1e-7, 1-1e-7].
double confidence_loss(const Tensor& c_hat, const Tensor& c);

LossBreakdown total_loss(double l_depth, double l_conf, double l_smooth, double lambda);

// Differentiable graph builders. dc/df/c_hat are {1,H,W} tape vars; targets
// are plain tensors (not differentiated).
ad::Var depth_loss_graph(ad::Tape& t, ad::Var dc, ad::Var df, const Tensor& dacc, double m);
ad::Var smoothness_loss_graph(ad::Tape& t, ad::Var df, const Tensor& image);
ad::Var confidence_loss_graph(ad::Tape& t, ad::Var c_hat, const Tensor& c);

// Luminance-gradient attenuation masks shared by both smoothness versions.
Tensor smoothness_weight_u(const Tensor& image);
Tensor smoothness_weight_v(const Tensor& image);

}  // namespace cafnet
