#include "cafnet/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "cafnet/common.hpp"

namespace cafnet::ad {

// ---- ParamSet ---------------------------------------------------------------

ParamSet::Entry& ParamSet::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, std::move(init), Tensor{}});
  Entry& e = entries_.back();
  e.grad = Tensor(e.value.shape());
  return e;
}

ParamSet::Entry& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second];
}

const ParamSet::Entry& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second];
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) std::fill(e.grad.raw().begin(), e.grad.raw().end(), 0.0);
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

// ---- Tape -------------------------------------------------------------------

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return Var{push(std::move(n))};
}

Var Tape::leaf(Tensor value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  return Var{push(std::move(n))};
}

Var Tape::param(ParamSet& ps, const std::string& name) {
  auto& e = ps.at(name);
  Node n;
  n.value = e.value;
  n.needs_grad = true;
  n.bound_grad = &e.grad;
  return Var{push(std::move(n))};
}

void Tape::backward(Var root) {
  Node& r = nodes_[static_cast<std::size_t>(root.id)];
  if (r.value.size() != 1) throw NumericError("backward root must be scalar");
  if (backward_done_) throw NumericError("backward may be called once per tape");
  backward_done_ = true;
  grad_buf(root.id)[0] += 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.empty()) continue;
    if (n.backward_fn) n.backward_fn(*this);
    if (n.bound_grad) {
      for (std::size_t j = 0; j < n.grad.size(); ++j) (*n.bound_grad)[j] += n.grad[j];
    }
  }
}

// Op construction helper with access to node internals.
struct OpBuilder {
  static Var make(Tape& t, Tensor value, bool needs_grad) {
    Tape::Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    return Var{t.push(std::move(n))};
  }
  static void set_bwd(Tape& t, Var v, std::function<void(Tape&)> fn) {
    t.nodes_[static_cast<std::size_t>(v.id)].backward_fn = std::move(fn);
  }
  static bool needs(Tape& t, Var v) {
    return v.valid() && t.nodes_[static_cast<std::size_t>(v.id)].needs_grad;
  }
  static const Tensor& val(Tape& t, Var v) { return t.value(v); }
  // Gradient of v, allocating if needed (accumulation target).
  static Tensor& gacc(Tape& t, Var v) { return t.grad_buf(v.id); }
  // Gradient of v as produced so far (may be empty if v unused).
  static const Tensor& gout(Tape& t, Var v) {
    return t.nodes_[static_cast<std::size_t>(v.id)].grad;
  }
};

namespace {

using OB = OpBuilder;

int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : a / b; }
int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

inline double wt(const Tensor& w, int oc, int ic, int kh, int kw) {
  const int cin = w.dim(1), k = w.dim(2);
  return w.data()[((static_cast<std::size_t>(oc) * cin + ic) * k + kh) * k + kw];
}

// y(oc,oh,ow) += sum_{ic,kh,kw} w(oc,ic,kh,kw) * x(ic, oh*s+kh-p, ow*s+kw-p)
void conv_fwd(const Tensor& x, const Tensor& w, Tensor& y, int s) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  const int p = k / 2;
  const int ho = y.dim(1), wo = y.dim(2);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int oc = 0; oc < cout; ++oc) {
    double* yc = y.data() + static_cast<std::size_t>(oc) * ho * wo;
    for (int ic = 0; ic < cin; ++ic) {
      const double* xc = x.data() + static_cast<std::size_t>(ic) * h * wd;
      for (int kh = 0; kh < k; ++kh) {
        const int oh_lo = std::max(0, ceil_div(p - kh, s));
        const int oh_hi = std::min(ho - 1, floor_div(h - 1 - kh + p, s));
        for (int kw = 0; kw < k; ++kw) {
          const double wv = wt(w, oc, ic, kh, kw);
          const int ow_lo = std::max(0, ceil_div(p - kw, s));
          const int ow_hi = std::min(wo - 1, floor_div(wd - 1 - kw + p, s));
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const int ih = oh * s + kh - p;
            double* yrow = yc + static_cast<std::size_t>(oh) * wo;
            const double* xrow = xc + static_cast<std::size_t>(ih) * wd + (kw - p);
            if (s == 1) {
              for (int ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += wv * xrow[ow];
            } else {
              for (int ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += wv * xrow[ow * s];
            }
          }
        }
      }
    }
  }
}

void conv_bwd_x(const Tensor& dy, const Tensor& w, Tensor& dx, int s) {
  const int cin = dx.dim(0), h = dx.dim(1), wd = dx.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  const int p = k / 2;
  const int ho = dy.dim(1), wo = dy.dim(2);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int ic = 0; ic < cin; ++ic) {
    double* dxc = dx.data() + static_cast<std::size_t>(ic) * h * wd;
    for (int oc = 0; oc < cout; ++oc) {
      const double* dyc = dy.data() + static_cast<std::size_t>(oc) * ho * wo;
      for (int kh = 0; kh < k; ++kh) {
        const int oh_lo = std::max(0, ceil_div(p - kh, s));
        const int oh_hi = std::min(ho - 1, floor_div(h - 1 - kh + p, s));
        for (int kw = 0; kw < k; ++kw) {
          const double wv = wt(w, oc, ic, kh, kw);
          const int ow_lo = std::max(0, ceil_div(p - kw, s));
          const int ow_hi = std::min(wo - 1, floor_div(wd - 1 - kw + p, s));
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const int ih = oh * s + kh - p;
            const double* dyrow = dyc + static_cast<std::size_t>(oh) * wo;
            double* dxrow = dxc + static_cast<std::size_t>(ih) * wd + (kw - p);
            if (s == 1) {
              for (int ow = ow_lo; ow <= ow_hi; ++ow) dxrow[ow] += wv * dyrow[ow];
            } else {
              for (int ow = ow_lo; ow <= ow_hi; ++ow) dxrow[ow * s] += wv * dyrow[ow];
            }
          }
        }
      }
    }
  }
}

void conv_bwd_w(const Tensor& dy, const Tensor& x, Tensor& dw, int s) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = dw.dim(0), k = dw.dim(2);
  const int p = k / 2;
  const int ho = dy.dim(1), wo = dy.dim(2);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int oc = 0; oc < cout; ++oc) {
    const double* dyc = dy.data() + static_cast<std::size_t>(oc) * ho * wo;
    for (int ic = 0; ic < cin; ++ic) {
      const double* xc = x.data() + static_cast<std::size_t>(ic) * h * wd;
      for (int kh = 0; kh < k; ++kh) {
        const int oh_lo = std::max(0, ceil_div(p - kh, s));
        const int oh_hi = std::min(ho - 1, floor_div(h - 1 - kh + p, s));
        for (int kw = 0; kw < k; ++kw) {
          const int ow_lo = std::max(0, ceil_div(p - kw, s));
          const int ow_hi = std::min(wo - 1, floor_div(wd - 1 - kw + p, s));
          double acc = 0.0;
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const int ih = oh * s + kh - p;
            const double* dyrow = dyc + static_cast<std::size_t>(oh) * wo;
            const double* xrow = xc + static_cast<std::size_t>(ih) * wd + (kw - p);
            if (s == 1) {
              for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += dyrow[ow] * xrow[ow];
            } else {
              for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += dyrow[ow] * xrow[ow * s];
            }
          }
          dw.data()[((static_cast<std::size_t>(oc) * cin + ic) * k + kh) * k + kw] += acc;
        }
      }
    }
  }
}

}  // namespace

// ---- ops ----------------------------------------------------------------------

Var conv2d(Tape& t, Var x, Var w, Var b, int stride) {
  const Tensor& xv = OB::val(t, x);
  const Tensor& wv = OB::val(t, w);
  if (xv.ndim() != 3 || wv.ndim() != 4) throw ConfigError("conv2d: bad ranks");
  if (xv.dim(0) != wv.dim(1)) throw ConfigError("conv2d: channel mismatch");
  if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2");
  const int k = wv.dim(2);
  if (k % 2 == 0 || k != wv.dim(3)) throw ConfigError("conv2d: kernel must be square and odd");
  const int ho = (xv.dim(1) + 2 * (k / 2) - k) / stride + 1;
  const int wo = (xv.dim(2) + 2 * (k / 2) - k) / stride + 1;
  const int cout = wv.dim(0);

  Tensor y({cout, ho, wo});
  conv_fwd(xv, wv, y, stride);
  if (b.valid()) {
    const Tensor& bv = OB::val(t, b);
    if (bv.size() != static_cast<std::size_t>(cout)) throw ConfigError("conv2d: bias size");
    for (int oc = 0; oc < cout; ++oc) {
      double* yc = y.data() + static_cast<std::size_t>(oc) * ho * wo;
      const double bb = bv[static_cast<std::size_t>(oc)];
      for (int i = 0; i < ho * wo; ++i) yc[i] += bb;
    }
  }

  const bool ng = OB::needs(t, x) || OB::needs(t, w) || OB::needs(t, b);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, x, w, b, stride](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      if (OB::needs(tt, x)) conv_bwd_x(dy, OB::val(tt, w), OB::gacc(tt, x), stride);
      if (OB::needs(tt, w)) conv_bwd_w(dy, OB::val(tt, x), OB::gacc(tt, w), stride);
      if (b.valid() && OB::needs(tt, b)) {
        Tensor& db = OB::gacc(tt, b);
        const int cout = dy.dim(0);
        const std::size_t hw = dy.size() / static_cast<std::size_t>(cout);
        for (int oc = 0; oc < cout; ++oc) {
          const double* dyc = dy.data() + static_cast<std::size_t>(oc) * hw;
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += dyc[i];
          db[static_cast<std::size_t>(oc)] += acc;
        }
      }
    });
  }
  return out;
}

Var conv2d(Tape& t, Var x, Var w, int stride) { return conv2d(t, x, w, Var{}, stride); }

Var relu(Tape& t, Var x) {
  Tensor y = OB::val(t, x);
  for (auto& v : y.raw()) v = v > 0.0 ? v : 0.0;
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& xv = OB::val(tt, x);
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (xv[i] > 0.0) dx[i] += dy[i];
    });
  }
  return out;
}

Var sigmoid(Tape& t, Var x) {
  Tensor y = OB::val(t, x);
  for (auto& v : y.raw()) v = 1.0 / (1.0 + std::exp(-v));
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& yv = OB::val(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * yv[i] * (1.0 - yv[i]);
    });
  }
  return out;
}

Var abs(Tape& t, Var x) {
  Tensor y = OB::val(t, x);
  for (auto& v : y.raw()) v = std::abs(v);
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& xv = OB::val(tt, x);
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (xv[i] > 0.0)
          dx[i] += dy[i];
        else if (xv[i] < 0.0)
          dx[i] -= dy[i];
      }
    });
  }
  return out;
}

Var log(Tape& t, Var x) {
  Tensor y = OB::val(t, x);
  for (auto& v : y.raw()) v = std::log(v);
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& xv = OB::val(tt, x);
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] / xv[i];
    });
  }
  return out;
}

Var clamp(Tape& t, Var x, double lo, double hi) {
  Tensor y = OB::val(t, x);
  for (auto& v : y.raw()) v = std::min(hi, std::max(lo, v));
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x, lo, hi](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& xv = OB::val(tt, x);
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (xv[i] > lo && xv[i] < hi) dx[i] += dy[i];
    });
  }
  return out;
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = OB::val(t, a);
  const Tensor& bv = OB::val(t, b);
  if (!av.same_shape(bv)) throw ConfigError("add: shape mismatch");
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const bool ng = OB::needs(t, a) || OB::needs(t, b);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, a, b](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      if (OB::needs(tt, a)) {
        Tensor& da = OB::gacc(tt, a);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (OB::needs(tt, b)) {
        Tensor& db = OB::gacc(tt, b);
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& av = OB::val(t, a);
  const Tensor& bv = OB::val(t, b);
  if (!av.same_shape(bv)) throw ConfigError("sub: shape mismatch");
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const bool ng = OB::needs(t, a) || OB::needs(t, b);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, a, b](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      if (OB::needs(tt, a)) {
        Tensor& da = OB::gacc(tt, a);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (OB::needs(tt, b)) {
        Tensor& db = OB::gacc(tt, b);
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
      }
    });
  }
  return out;
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = OB::val(t, a);
  const Tensor& bv = OB::val(t, b);
  if (!av.same_shape(bv)) throw ConfigError("mul: shape mismatch");
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const bool ng = OB::needs(t, a) || OB::needs(t, b);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, a, b](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& av2 = OB::val(tt, a);
      const Tensor& bv2 = OB::val(tt, b);
      if (OB::needs(tt, a)) {
        Tensor& da = OB::gacc(tt, a);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv2[i];
      }
      if (OB::needs(tt, b)) {
        Tensor& db = OB::gacc(tt, b);
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av2[i];
      }
    });
  }
  return out;
}

Var scale(Tape& t, Var x, double s) {
  Tensor y = OB::val(t, x);
  for (auto& v : y.raw()) v *= s;
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x, s](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * s;
    });
  }
  return out;
}

Var add_scalar(Tape& t, Var x, double s) {
  Tensor y = OB::val(t, x);
  for (auto& v : y.raw()) v += s;
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

namespace {

// mask is either same shape as x or {1,H,W} against x {C,H,W}.
void check_maskable(const Tensor& x, const Tensor& m) {
  if (x.shape() == m.shape()) return;
  if (x.ndim() == 3 && m.ndim() == 3 && m.dim(0) == 1 && m.dim(1) == x.dim(1) &&
      m.dim(2) == x.dim(2))
    return;
  throw ConfigError("mask shape incompatible");
}

}  // namespace

Var mul_mask(Tape& t, Var x, const Tensor& mask) {
  const Tensor& xv = OB::val(t, x);
  check_maskable(xv, mask);
  const bool bc = xv.shape() != mask.shape();
  const std::size_t hw = mask.size();
  Tensor y = xv;
  if (bc) {
    const int c = xv.dim(0);
    for (int cc = 0; cc < c; ++cc) {
      double* yc = y.data() + static_cast<std::size_t>(cc) * hw;
      for (std::size_t i = 0; i < hw; ++i) yc[i] *= mask[i];
    }
  } else {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  }
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x, mask, bc, hw](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      if (bc) {
        const int c = dy.dim(0);
        for (int cc = 0; cc < c; ++cc) {
          const double* dyc = dy.data() + static_cast<std::size_t>(cc) * hw;
          double* dxc = dx.data() + static_cast<std::size_t>(cc) * hw;
          for (std::size_t i = 0; i < hw; ++i) dxc[i] += dyc[i] * mask[i];
        }
      } else {
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
      }
    });
  }
  return out;
}

Var add_channel_bias(Tape& t, Var x, Var b) {
  const Tensor& xv = OB::val(t, x);
  const Tensor& bv = OB::val(t, b);
  if (xv.ndim() != 3 || bv.size() != static_cast<std::size_t>(xv.dim(0)))
    throw ConfigError("add_channel_bias: shape");
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor y = xv;
  for (int c = 0; c < xv.dim(0); ++c) {
    double* yc = y.data() + static_cast<std::size_t>(c) * hw;
    for (std::size_t i = 0; i < hw; ++i) yc[i] += bv[static_cast<std::size_t>(c)];
  }
  const bool ng = OB::needs(t, x) || OB::needs(t, b);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, x, b, hw](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      if (OB::needs(tt, x)) {
        Tensor& dx = OB::gacc(tt, x);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
      if (OB::needs(tt, b)) {
        Tensor& db = OB::gacc(tt, b);
        for (int c = 0; c < dy.dim(0); ++c) {
          const double* dyc = dy.data() + static_cast<std::size_t>(c) * hw;
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += dyc[i];
          db[static_cast<std::size_t>(c)] += acc;
        }
      }
    });
  }
  return out;
}

Var concat_ch(Tape& t, const std::vector<Var>& xs) {
  if (xs.empty()) throw ConfigError("concat_ch: empty");
  const Tensor& first = OB::val(t, xs[0]);
  const int h = first.dim(1), w = first.dim(2);
  int ctot = 0;
  bool ng = false;
  for (Var v : xs) {
    const Tensor& xv = OB::val(t, v);
    if (xv.ndim() != 3 || xv.dim(1) != h || xv.dim(2) != w)
      throw ConfigError("concat_ch: spatial mismatch");
    ctot += xv.dim(0);
    ng = ng || OB::needs(t, v);
  }
  Tensor y({ctot, h, w});
  std::size_t off = 0;
  for (Var v : xs) {
    const Tensor& xv = OB::val(t, v);
    std::copy(xv.raw().begin(), xv.raw().end(), y.raw().begin() + static_cast<long>(off));
    off += xv.size();
  }
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    std::vector<Var> parents = xs;
    OB::set_bwd(t, out, [out, parents](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      std::size_t off2 = 0;
      for (Var v : parents) {
        const std::size_t n = OB::val(tt, v).size();
        if (OB::needs(tt, v)) {
          Tensor& dx = OB::gacc(tt, v);
          for (std::size_t i = 0; i < n; ++i) dx[i] += dy[off2 + i];
        }
        off2 += n;
      }
    });
  }
  return out;
}

namespace {

struct Lerp {
  int i0, i1;
  double w0, w1;
};

// Half-pixel source coordinate for 2x upsampling with edge clamp.
Lerp lerp_coeff(int oi, int n_in) {
  const double src = (oi + 0.5) / 2.0 - 0.5;
  double f = std::floor(src);
  int i0 = static_cast<int>(f);
  double a = src - f;
  int i1 = i0 + 1;
  if (i0 < 0) i0 = 0;
  if (i1 < 0) i1 = 0;
  if (i0 > n_in - 1) i0 = n_in - 1;
  if (i1 > n_in - 1) i1 = n_in - 1;
  return Lerp{i0, i1, 1.0 - a, a};
}

}  // namespace

Var upsample2(Tape& t, Var x) {
  const Tensor& xv = OB::val(t, x);
  if (xv.ndim() != 3) throw ConfigError("upsample2: rank");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor y({c, 2 * h, 2 * w});
  std::vector<Lerp> lv(static_cast<std::size_t>(2 * h)), lu(static_cast<std::size_t>(2 * w));
  for (int i = 0; i < 2 * h; ++i) lv[static_cast<std::size_t>(i)] = lerp_coeff(i, h);
  for (int j = 0; j < 2 * w; ++j) lu[static_cast<std::size_t>(j)] = lerp_coeff(j, w);
  for (int cc = 0; cc < c; ++cc) {
    for (int oy = 0; oy < 2 * h; ++oy) {
      const Lerp& a = lv[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < 2 * w; ++ox) {
        const Lerp& b = lu[static_cast<std::size_t>(ox)];
        y.at(cc, oy, ox) = a.w0 * (b.w0 * xv.at(cc, a.i0, b.i0) + b.w1 * xv.at(cc, a.i0, b.i1)) +
                           a.w1 * (b.w0 * xv.at(cc, a.i1, b.i0) + b.w1 * xv.at(cc, a.i1, b.i1));
      }
    }
  }
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x, c, h, w, lv, lu](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      for (int cc = 0; cc < c; ++cc) {
        for (int oy = 0; oy < 2 * h; ++oy) {
          const Lerp& a = lv[static_cast<std::size_t>(oy)];
          for (int ox = 0; ox < 2 * w; ++ox) {
            const Lerp& b = lu[static_cast<std::size_t>(ox)];
            const double g = dy.at(cc, oy, ox);
            dx.at(cc, a.i0, b.i0) += g * a.w0 * b.w0;
            dx.at(cc, a.i0, b.i1) += g * a.w0 * b.w1;
            dx.at(cc, a.i1, b.i0) += g * a.w1 * b.w0;
            dx.at(cc, a.i1, b.i1) += g * a.w1 * b.w1;
          }
        }
      }
    });
  }
  return out;
}

Var avg_pool(Tape& t, Var x, int s) {
  const Tensor& xv = OB::val(t, x);
  if (xv.ndim() != 3) throw ConfigError("avg_pool: rank");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (s <= 0 || h % s != 0 || w % s != 0)
    throw ConfigError("avg_pool: stride must divide dims");
  const int ho = h / s, wo = w / s;
  Tensor y({c, ho, wo});
  const double inv = 1.0 / (static_cast<double>(s) * s);
  for (int cc = 0; cc < c; ++cc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int dy = 0; dy < s; ++dy)
          for (int dx = 0; dx < s; ++dx) acc += xv.at(cc, oy * s + dy, ox * s + dx);
        y.at(cc, oy, ox) = acc * inv;
      }
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x, c, ho, wo, s, inv](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      for (int cc = 0; cc < c; ++cc)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const double g = dy.at(cc, oy, ox) * inv;
            for (int yy = 0; yy < s; ++yy)
              for (int xx = 0; xx < s; ++xx) dx.at(cc, oy * s + yy, ox * s + xx) += g;
          }
    });
  }
  return out;
}

Var channel_dot(Tape& t, Var f, Var p) {
  const Tensor& fv = OB::val(t, f);
  const Tensor& pv = OB::val(t, p);
  if (fv.ndim() != 3 || pv.size() != static_cast<std::size_t>(fv.dim(0)))
    throw ConfigError("channel_dot: shape");
  const int c = fv.dim(0), h = fv.dim(1), w = fv.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor y({1, h, w});
  for (int cc = 0; cc < c; ++cc) {
    const double* fc = fv.data() + static_cast<std::size_t>(cc) * hw;
    const double pc = pv[static_cast<std::size_t>(cc)];
    for (std::size_t i = 0; i < hw; ++i) y[i] += pc * fc[i];
  }
  const bool ng = OB::needs(t, f) || OB::needs(t, p);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, f, p, c, hw](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& fv2 = OB::val(tt, f);
      const Tensor& pv2 = OB::val(tt, p);
      if (OB::needs(tt, f)) {
        Tensor& df = OB::gacc(tt, f);
        for (int cc = 0; cc < c; ++cc) {
          double* dfc = df.data() + static_cast<std::size_t>(cc) * hw;
          const double pc = pv2[static_cast<std::size_t>(cc)];
          for (std::size_t i = 0; i < hw; ++i) dfc[i] += pc * dy[i];
        }
      }
      if (OB::needs(tt, p)) {
        Tensor& dp = OB::gacc(tt, p);
        for (int cc = 0; cc < c; ++cc) {
          const double* fc = fv2.data() + static_cast<std::size_t>(cc) * hw;
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += fc[i] * dy[i];
          dp[static_cast<std::size_t>(cc)] += acc;
        }
      }
    });
  }
  return out;
}

Var channel_project(Tape& t, Var f, Var q) {
  const Tensor& fv = OB::val(t, f);
  const Tensor& qv = OB::val(t, q);
  if (fv.ndim() != 3 || qv.ndim() != 2 || qv.dim(0) != fv.dim(0))
    throw ConfigError("channel_project: radar channel count must match q rows");
  const int ci = fv.dim(0), co = qv.dim(1), h = fv.dim(1), w = fv.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor y({co, h, w});
  for (int oc = 0; oc < co; ++oc) {
    double* yc = y.data() + static_cast<std::size_t>(oc) * hw;
    for (int icc = 0; icc < ci; ++icc) {
      const double qq = qv.at(icc, oc);
      const double* fc = fv.data() + static_cast<std::size_t>(icc) * hw;
      for (std::size_t i = 0; i < hw; ++i) yc[i] += qq * fc[i];
    }
  }
  const bool ng = OB::needs(t, f) || OB::needs(t, q);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, f, q, ci, co, hw](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& fv2 = OB::val(tt, f);
      const Tensor& qv2 = OB::val(tt, q);
      if (OB::needs(tt, f)) {
        Tensor& df = OB::gacc(tt, f);
        for (int icc = 0; icc < ci; ++icc) {
          double* dfc = df.data() + static_cast<std::size_t>(icc) * hw;
          for (int oc = 0; oc < co; ++oc) {
            const double qq = qv2.at(icc, oc);
            const double* dyc = dy.data() + static_cast<std::size_t>(oc) * hw;
            for (std::size_t i = 0; i < hw; ++i) dfc[i] += qq * dyc[i];
          }
        }
      }
      if (OB::needs(tt, q)) {
        Tensor& dq = OB::gacc(tt, q);
        for (int icc = 0; icc < ci; ++icc) {
          const double* fc = fv2.data() + static_cast<std::size_t>(icc) * hw;
          for (int oc = 0; oc < co; ++oc) {
            const double* dyc = dy.data() + static_cast<std::size_t>(oc) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += fc[i] * dyc[i];
            dq.at(icc, oc) += acc;
          }
        }
      }
    });
  }
  return out;
}

Var broadcast_mul(Tape& t, Var x, Var s) {
  const Tensor& xv = OB::val(t, x);
  const Tensor& sv = OB::val(t, s);
  if (xv.ndim() != 3 || sv.ndim() != 3 || sv.dim(0) != 1 || sv.dim(1) != xv.dim(1) ||
      sv.dim(2) != xv.dim(2))
    throw ConfigError("broadcast_mul: shape");
  const int c = xv.dim(0);
  const std::size_t hw = sv.size();
  Tensor y = xv;
  for (int cc = 0; cc < c; ++cc) {
    double* yc = y.data() + static_cast<std::size_t>(cc) * hw;
    for (std::size_t i = 0; i < hw; ++i) yc[i] *= sv[i];
  }
  const bool ng = OB::needs(t, x) || OB::needs(t, s);
  Var out = OB::make(t, std::move(y), ng);
  if (ng) {
    OB::set_bwd(t, out, [out, x, s, c, hw](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      const Tensor& xv2 = OB::val(tt, x);
      const Tensor& sv2 = OB::val(tt, s);
      if (OB::needs(tt, x)) {
        Tensor& dx = OB::gacc(tt, x);
        for (int cc = 0; cc < c; ++cc) {
          double* dxc = dx.data() + static_cast<std::size_t>(cc) * hw;
          const double* dyc = dy.data() + static_cast<std::size_t>(cc) * hw;
          for (std::size_t i = 0; i < hw; ++i) dxc[i] += dyc[i] * sv2[i];
        }
      }
      if (OB::needs(tt, s)) {
        Tensor& ds = OB::gacc(tt, s);
        for (int cc = 0; cc < c; ++cc) {
          const double* dyc = dy.data() + static_cast<std::size_t>(cc) * hw;
          const double* xc = xv2.data() + static_cast<std::size_t>(cc) * hw;
          for (std::size_t i = 0; i < hw; ++i) ds[i] += dyc[i] * xc[i];
        }
      }
    });
  }
  return out;
}

Var diff_u(Tape& t, Var x) {
  const Tensor& xv = OB::val(t, x);
  if (xv.ndim() != 3) throw ConfigError("diff_u: rank");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor y({c, h, w - 1});
  for (int cc = 0; cc < c; ++cc)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j + 1 < w; ++j) y.at(cc, i, j) = xv.at(cc, i, j + 1) - xv.at(cc, i, j);
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x, c, h, w](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      for (int cc = 0; cc < c; ++cc)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j + 1 < w; ++j) {
            const double g = dy.at(cc, i, j);
            dx.at(cc, i, j + 1) += g;
            dx.at(cc, i, j) -= g;
          }
    });
  }
  return out;
}

Var diff_v(Tape& t, Var x) {
  const Tensor& xv = OB::val(t, x);
  if (xv.ndim() != 3) throw ConfigError("diff_v: rank");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor y({c, h - 1, w});
  for (int cc = 0; cc < c; ++cc)
    for (int i = 0; i + 1 < h; ++i)
      for (int j = 0; j < w; ++j) y.at(cc, i, j) = xv.at(cc, i + 1, j) - xv.at(cc, i, j);
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x, c, h, w](Tape& tt) {
      const Tensor& dy = OB::gout(tt, out);
      Tensor& dx = OB::gacc(tt, x);
      for (int cc = 0; cc < c; ++cc)
        for (int i = 0; i + 1 < h; ++i)
          for (int j = 0; j < w; ++j) {
            const double g = dy.at(cc, i, j);
            dx.at(cc, i + 1, j) += g;
            dx.at(cc, i, j) -= g;
          }
    });
  }
  return out;
}

Var sum(Tape& t, Var x) {
  const Tensor& xv = OB::val(t, x);
  double acc = 0.0;
  for (double v : xv.raw()) acc += v;
  Tensor y({1});
  y[0] = acc;
  Var out = OB::make(t, std::move(y), OB::needs(t, x));
  if (OB::needs(t, x)) {
    OB::set_bwd(t, out, [out, x](Tape& tt) {
      const double g = OB::gout(tt, out)[0];
      Tensor& dx = OB::gacc(tt, x);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

// ---- sparse convolution --------------------------------------------------------

Tensor correlate_ones(const Tensor& mask, int k) {
  const int h = mask.dim(1), w = mask.dim(2);
  const int p = k / 2;
  Tensor out({1, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int di = -p; di <= p; ++di) {
        const int ii = i + di;
        if (ii < 0 || ii >= h) continue;
        for (int dj = -p; dj <= p; ++dj) {
          const int jj = j + dj;
          if (jj < 0 || jj >= w) continue;
          acc += mask.at(0, ii, jj);
        }
      }
      out.at(0, i, j) = acc;
    }
  return out;
}

Tensor mask_maxpool(const Tensor& mask, int k) {
  const int h = mask.dim(1), w = mask.dim(2);
  const int p = k / 2;
  Tensor out({1, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double m = 0.0;
      for (int di = -p; di <= p && m == 0.0; ++di) {
        const int ii = i + di;
        if (ii < 0 || ii >= h) continue;
        for (int dj = -p; dj <= p; ++dj) {
          const int jj = j + dj;
          if (jj < 0 || jj >= w) continue;
          if (mask.at(0, ii, jj) > 0.0) {
            m = 1.0;
            break;
          }
        }
      }
      out.at(0, i, j) = m;
    }
  return out;
}

SparseConvOut sparse_conv(Tape& t, Var x, const Tensor& mask, Var kernel, Var bias, double eps) {
  if (eps <= 0.0) throw ConfigError("sparse_conv: eps must be positive");
  const Tensor& xv = OB::val(t, x);
  if (mask.ndim() != 3 || mask.dim(0) != 1 || mask.dim(1) != xv.dim(1) ||
      mask.dim(2) != xv.dim(2))
    throw ConfigError("sparse_conv: mask shape");
  const int k = OB::val(t, kernel).dim(2);

  Var xm = mul_mask(t, x, mask);
  Var num = conv2d(t, xm, kernel, 1);

  Tensor norm = correlate_ones(mask, k);
  for (auto& v : norm.raw()) v = 1.0 / (v + eps);
  Var y = mul_mask(t, num, norm);
  y = add_channel_bias(t, y, bias);

  return SparseConvOut{y, mask_maxpool(mask, k)};
}

// ---- gradient check --------------------------------------------------------------

GradCheckReport grad_check(const GradFn& fn, ParamSet& ps, double eps, int max_coords,
                           std::uint64_t seed) {
  if (eps < 1e-7 || eps > 1e-4) throw ConfigError("grad_check: eps out of [1e-7, 1e-4]");

  ps.zero_grad();
  const double f0 = fn(ps, true);
  if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite objective");

  // Snapshot analytic gradients.
  std::vector<std::vector<double>> analytic;
  analytic.reserve(ps.entries().size());
  for (const auto& e : ps.entries()) analytic.push_back(e.grad.raw());

  std::vector<std::pair<std::size_t, std::size_t>> coords;  // (entry, index)
  const std::size_t total = ps.total_size();
  if (max_coords <= 0 || total <= static_cast<std::size_t>(max_coords)) {
    for (std::size_t ei = 0; ei < ps.entries().size(); ++ei)
      for (std::size_t i = 0; i < ps.entries()[ei].value.size(); ++i) coords.emplace_back(ei, i);
  } else {
    Rng rng(seed);
    for (int n = 0; n < max_coords; ++n) {
      std::size_t flat = rng.next_u64() % total;
      std::size_t ei = 0;
      while (flat >= ps.entries()[ei].value.size()) {
        flat -= ps.entries()[ei].value.size();
        ++ei;
      }
      coords.emplace_back(ei, flat);
    }
  }

  GradCheckReport rep;
  rep.coords_checked = static_cast<int>(coords.size());
  for (const auto& [ei, i] : coords) {
    auto& entry = ps.entries()[ei];
    const double saved = entry.value[i];
    entry.value[i] = saved + eps;
    const double fp = fn(ps, false);
    entry.value[i] = saved - eps;
    const double fm = fn(ps, false);
    entry.value[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite objective");
    const double fd = (fp - fm) / (2.0 * eps);
    const double an = analytic[ei][i];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param = entry.name;
      rep.worst_index = i;
    }
  }
  return rep;
}

}  // namespace cafnet::ad
