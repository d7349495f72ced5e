#pragma once

#include <cstddef>
#include <string>

#include "cafnet/tensor.hpp"

namespace cafnet {

struct MetricsReport {
  double max_distance = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  double absrel = 0.0;
  double log10 = 0.0;
  double rmselog = 0.0;
  double delta1 = 0.0, delta2 = 0.0, delta3 = 0.0;
  std::size_t n_valid = 0;

  static std::string csv_header();  // max_dist,mae,rmse,absrel,log10,rmselog,d1,d2,d3,n_valid
  std::string csv_row() const;
};

// Standard depth metrics over the valid set {0 < gt <= max_distance}:
// mean absolute / root-mean-square error, mean absolute relative error,
// mean |log10 pred - log10 gt|, RMS of that log difference, and the
// delta_n ratios (fraction with max(pred/gt, gt/pred) < 1.25^n).
// Throws if the valid set is empty or a valid prediction is not positive.
MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, double max_distance);

// Streaming accumulation across frames (dataset-level metrics): sums the
// per-pixel statistics; finalize() divides once.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(double max_distance) : max_distance_(max_distance) {}
  void add(const Tensor& pred, const Tensor& gt);
  bool empty() const { return n_ == 0; }
  MetricsReport finalize() const;  // throws when empty

 private:
  double max_distance_;
  double abs_ = 0.0, sq_ = 0.0, rel_ = 0.0, log_ = 0.0, logsq_ = 0.0;
  std::size_t d1_ = 0, d2_ = 0, d3_ = 0, n_ = 0;
};

}  // namespace cafnet
