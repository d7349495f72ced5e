#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cafnet/tensor.hpp"

namespace cafnet::ad {

// Named trainable tensors with gradient buffers. Order of insertion is the
// canonical order for checkpoints, optimizers and gradient checks.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  Entry& add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad();
  std::size_t total_size() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Handle into a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops append nodes; backward() walks them in reverse and
// accumulates parameter gradients into the bound ParamSet entries.
class Tape {
 public:
  Var constant(Tensor value);
  Var leaf(Tensor value, bool needs_grad);
  Var param(ParamSet& ps, const std::string& name);

  // References stay valid while the tape lives; nodes are stored in a deque
  // so later ops never invalidate them.
  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  // Root must be a scalar (numel 1). May be called once per tape; parameter
  // gradients accumulate into the bound ParamSet across tapes, which is how
  // batch gradients are formed.
  void backward(Var root);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  friend struct OpBuilder;
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Tensor* bound_grad = nullptr;  // ParamSet entry, when a param leaf
    std::function<void(Tape&)> backward_fn;
  };
  int push(Node n);
  Tensor& grad_buf(int id);
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// ---- differentiable ops ----------------------------------------------------

// Dense 2-d convolution, zero "same" padding (pad = k/2), stride 1 or 2.
// x: {Cin,H,W}, w: {Cout,Cin,K,K}, optional bias b: {Cout}.
Var conv2d(Tape& t, Var x, Var w, Var b, int stride = 1);
Var conv2d(Tape& t, Var x, Var w, int stride = 1);

Var relu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var abs(Tape& t, Var x);
Var log(Tape& t, Var x);
Var clamp(Tape& t, Var x, double lo, double hi);

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, double s);
Var add_scalar(Tape& t, Var x, double s);

// Multiply by a constant tensor; mask shape equals x or is {1,H,W} and
// broadcasts over channels.
Var mul_mask(Tape& t, Var x, const Tensor& mask);

// Per-channel bias add on {C,H,W}.
Var add_channel_bias(Tape& t, Var x, Var b);

Var concat_ch(Tape& t, const std::vector<Var>& xs);

// Bilinear x2 upsampling (half-pixel centers, edge clamp) on {C,H,W}.
Var upsample2(Tape& t, Var x);

// Non-overlapping s x s mean pooling; s must divide H and W.
Var avg_pool(Tape& t, Var x, int s);

// y(h,w) = sum_c p(c) * f(c,h,w).  f: {C,H,W}, p: {C} -> {1,H,W}
Var channel_dot(Tape& t, Var f, Var p);

// y(co,h,w) = sum_ci q(ci,co) * f(ci,h,w).  q: {Cin,Cout} -> {Cout,H,W}
Var channel_project(Tape& t, Var f, Var q);

// x: {C,H,W} times s: {1,H,W}, broadcast over channels.
Var broadcast_mul(Tape& t, Var x, Var s);

// Forward differences along width/height; output loses the last column/row.
Var diff_u(Tape& t, Var x);
Var diff_v(Tape& t, Var x);

Var sum(Tape& t, Var x);  // -> {1}

// ---- sparse (sparsity-invariant) convolution -------------------------------

struct FeatureGrid {
  Tensor data;           // {C,H,W}
  Tensor mask;           // {1,H,W} in {0,1}; empty when absent
  bool has_mask() const { return !mask.empty(); }
};

// y = conv(x .* m, K) / (conv(m, ones) + eps) + bias. The mask is data, not a
// differentiated input; the updated mask is its max-pool over the kernel
// window (same padding, stride 1).
struct SparseConvOut {
  Var y;
  Tensor mask;
};
SparseConvOut sparse_conv(Tape& t, Var x, const Tensor& mask, Var kernel, Var bias, double eps);

// Plain helpers shared with sparse_conv (not differentiated).
Tensor correlate_ones(const Tensor& mask, int k);  // window sums, same padding
Tensor mask_maxpool(const Tensor& mask, int k);

// ---- gradient checking ------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  int coords_checked = 0;
};

// fn evaluates the scalar objective; when want_grad it must also leave
// analytic gradients in ps (callers zero + fill via Tape::backward).
using GradFn = std::function<double(ParamSet&, bool want_grad)>;

// Central differences (f(th+eps)-f(th-eps))/(2 eps) per coordinate against the
// analytic gradient. Relative error denominator max(|a|,|fd|,1e-8). When the
// parameter count exceeds max_coords, a seeded random subsample is checked.
GradCheckReport grad_check(const GradFn& fn, ParamSet& ps, double eps, int max_coords,
                           std::uint64_t seed);

}  // namespace cafnet::ad
