#include "cafnet/losses.hpp"

#include <cmath>

#include "cafnet/common.hpp"

namespace cafnet {

namespace {

constexpr double kBceClamp = 1e-7;

// Channel-mean luminance of a {3,H,W} image (or pass-through for {1,H,W}).
Tensor luminance(const Tensor& image) {
  if (image.ndim() != 3) throw ConfigError("smoothness: image must be {C,H,W}");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor lum({1, h, w});
  const double inv = 1.0 / c;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int cc = 0; cc < c; ++cc) acc += image.at(cc, i, j);
      lum.at(0, i, j) = acc * inv;
    }
  return lum;
}

// Pixel count and flattened views shared by the plain/graph depth losses.
struct DepthDomain {
  Tensor mask;  // {1,H,W} indicator of dacc > 0
  std::size_t count = 0;
};

DepthDomain depth_domain(const Tensor& dacc) {
  DepthDomain d;
  d.mask = Tensor({1, dacc.dim(0), dacc.dim(1)});
  for (std::size_t i = 0; i < dacc.size(); ++i)
    if (dacc[i] > 0.0) {
      d.mask[i] = 1.0;
      ++d.count;
    }
  if (d.count == 0) throw DataError("depth loss: no supervision pixels");
  return d;
}

}  // namespace

Tensor smoothness_weight_u(const Tensor& image) {
  const Tensor lum = luminance(image);
  const int h = lum.dim(1), w = lum.dim(2);
  Tensor wu({1, h, w - 1});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j + 1 < w; ++j)
      wu.at(0, i, j) = std::exp(-std::abs(lum.at(0, i, j + 1) - lum.at(0, i, j)));
  return wu;
}

Tensor smoothness_weight_v(const Tensor& image) {
  const Tensor lum = luminance(image);
  const int h = lum.dim(1), w = lum.dim(2);
  Tensor wv({1, h - 1, w});
  for (int i = 0; i + 1 < h; ++i)
    for (int j = 0; j < w; ++j)
      wv.at(0, i, j) = std::exp(-std::abs(lum.at(0, i + 1, j) - lum.at(0, i, j)));
  return wv;
}

double depth_loss(const Tensor& dc, const Tensor& df, const Tensor& dacc, double m) {
  if (dc.size() != dacc.size() || df.size() != dacc.size())
    throw ConfigError("depth loss: shape mismatch");
  const DepthDomain dom = depth_domain(dacc);
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < dacc.size(); ++i) {
    if (dom.mask[i] == 0.0) continue;
    s1 += std::abs(dacc[i] - dc[i]);
    s2 += std::abs(dacc[i] - df[i]);
  }
  const double n = static_cast<double>(dom.count);
  return (m / n) * s1 + (1.0 / n) * s2;
}

double smoothness_loss(const Tensor& df, const Tensor& image) {
  if (df.ndim() != 3 && df.ndim() != 2) throw ConfigError("smoothness: bad depth rank");
  const Tensor wu = smoothness_weight_u(image);
  const Tensor wv = smoothness_weight_v(image);
  const int h = image.dim(1), w = image.dim(2);
  const auto d = [&](int i, int j) { return df.ndim() == 3 ? df.at(0, i, j) : df.at(i, j); };
  double su = 0.0, sv = 0.0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j + 1 < w; ++j) su += std::abs(d(i, j + 1) - d(i, j)) * wu.at(0, i, j);
  for (int i = 0; i + 1 < h; ++i)
    for (int j = 0; j < w; ++j) sv += std::abs(d(i + 1, j) - d(i, j)) * wv.at(0, i, j);
  return (1.0 / (static_cast<double>(h) * (w - 1))) * su +
         (1.0 / (static_cast<double>(h - 1) * w)) * sv;
}

double confidence_loss(const Tensor& c_hat, const Tensor& c) {
  if (c_hat.size() != c.size()) throw ConfigError("confidence loss: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double a = std::min(1.0 - kBceClamp, std::max(kBceClamp, c_hat[i]));
    s += c[i] * std::log(a) + (1.0 - c[i]) * std::log(1.0 - a);
  }
  return (-1.0 / static_cast<double>(c.size())) * s;
}

LossBreakdown total_loss(double l_depth, double l_conf, double l_smooth, double lambda) {
  if (lambda < 0.0) throw ConfigError("total loss: lambda must be >= 0");
  LossBreakdown b;
  b.l_depth = l_depth;
  b.l_conf = l_conf;
  b.l_smooth = l_smooth;
  b.total = l_depth + l_conf + lambda * l_smooth;
  return b;
}

ad::Var depth_loss_graph(ad::Tape& t, ad::Var dc, ad::Var df, const Tensor& dacc, double m) {
  const DepthDomain dom = depth_domain(dacc);
  Tensor target({1, dacc.dim(0), dacc.dim(1)}, dacc.raw());
  ad::Var tgt = t.constant(target);
  const double n = static_cast<double>(dom.count);
  ad::Var s1 = ad::sum(t, ad::mul_mask(t, ad::abs(t, ad::sub(t, tgt, dc)), dom.mask));
  ad::Var s2 = ad::sum(t, ad::mul_mask(t, ad::abs(t, ad::sub(t, tgt, df)), dom.mask));
  return ad::add(t, ad::scale(t, s1, m / n), ad::scale(t, s2, 1.0 / n));
}

ad::Var smoothness_loss_graph(ad::Tape& t, ad::Var df, const Tensor& image) {
  const Tensor wu = smoothness_weight_u(image);
  const Tensor wv = smoothness_weight_v(image);
  const int h = image.dim(1), w = image.dim(2);
  ad::Var su = ad::sum(t, ad::mul_mask(t, ad::abs(t, ad::diff_u(t, df)), wu));
  ad::Var sv = ad::sum(t, ad::mul_mask(t, ad::abs(t, ad::diff_v(t, df)), wv));
  return ad::add(t, ad::scale(t, su, 1.0 / (static_cast<double>(h) * (w - 1))),
                 ad::scale(t, sv, 1.0 / (static_cast<double>(h - 1) * w)));
}

ad::Var confidence_loss_graph(ad::Tape& t, ad::Var c_hat, const Tensor& c) {
  Tensor pos({1, c.dim(0), c.dim(1)}, c.raw());
  Tensor neg(pos.shape());
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = 1.0 - pos[i];
  ad::Var a = ad::clamp(t, c_hat, kBceClamp, 1.0 - kBceClamp);
  ad::Var one_minus = ad::add_scalar(t, ad::scale(t, a, -1.0), 1.0);
  ad::Var s = ad::sum(t, ad::add(t, ad::mul_mask(t, ad::log(t, a), pos),
                                 ad::mul_mask(t, ad::log(t, one_minus), neg)));
  return ad::scale(t, s, -1.0 / static_cast<double>(c.size()));
}

}  // namespace cafnet
