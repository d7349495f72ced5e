#include "cafnet/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "cafnet/common.hpp"

namespace cafnet {

std::string MetricsReport::csv_header() {
  return "max_dist,mae,rmse,absrel,log10,rmselog,d1,d2,d3,n_valid";
}

std::string MetricsReport::csv_row() const {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu",
                max_distance, mae, rmse, absrel, log10, rmselog, delta1, delta2, delta3, n_valid);
  return buf;
}

void MetricsAccumulator::add(const Tensor& pred, const Tensor& gt) {
  if (pred.size() != gt.size()) throw ConfigError("metrics: shape mismatch");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double d = gt[i];
    if (d <= 0.0 || d > max_distance_) continue;
    const double p = pred[i];
    if (p <= 0.0) throw NumericError("metrics: non-positive prediction at a valid pixel");
    const double err = p - d;
    abs_ += std::abs(err);
    sq_ += err * err;
    rel_ += std::abs(err) / d;
    const double lg = std::log10(p) - std::log10(d);
    log_ += std::abs(lg);
    logsq_ += lg * lg;
    const double ratio = p > d ? p / d : d / p;
    if (ratio < 1.25) ++d1_;
    if (ratio < 1.5625) ++d2_;
    if (ratio < 1.953125) ++d3_;
    ++n_;
  }
}

MetricsReport MetricsAccumulator::finalize() const {
  if (n_ == 0) throw DataError("metrics: no valid pixels");
  const double n = static_cast<double>(n_);
  MetricsReport r;
  r.max_distance = max_distance_;
  r.n_valid = n_;
  r.mae = abs_ / n;
  r.rmse = std::sqrt(sq_ / n);
  r.absrel = rel_ / n;
  r.log10 = log_ / n;
  r.rmselog = std::sqrt(logsq_ / n);
  r.delta1 = static_cast<double>(d1_) / n;
  r.delta2 = static_cast<double>(d2_) / n;
  r.delta3 = static_cast<double>(d3_) / n;
  return r;
}

MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, double max_distance) {
  if (max_distance <= 0.0) throw ConfigError("metrics: max distance must be positive");
  MetricsAccumulator acc(max_distance);
  acc.add(pred, gt);
  return acc.finalize();
}

}  // namespace cafnet
