#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <vector>

namespace cafnet {

// Dense row-major tensor of doubles. Rank is 1..4; grids are {H,W},
// feature maps {C,H,W}, conv kernels {Cout,Cin,Kh,Kw}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel(shape_), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    assert(data_.size() == numel(shape_));
  }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static std::size_t numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-d access on the trailing two dims of a {H,W} tensor.
  double& at(int h, int w) { return data_[static_cast<std::size_t>(h) * dim(1) + w]; }
  double at(int h, int w) const { return data_[static_cast<std::size_t>(h) * dim(1) + w]; }

  // 3-d access for {C,H,W}.
  double& at(int c, int h, int w) {
    return data_[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  double at(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace cafnet
