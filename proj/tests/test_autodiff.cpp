#include <doctest.h>

#include <cmath>
#include <vector>

#include "cafnet/autodiff.hpp"
#include "cafnet/common.hpp"
#include "cafnet/tensor.hpp"
#include "oracles.hpp"

using namespace cafnet;
using namespace cafnet::ad;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.raw()) v = rng.uniform(lo, hi);
  return t;
}

Tensor random_mask(int h, int w, Rng& rng, double density) {
  Tensor m({1, h, w});
  for (auto& v : m.raw()) v = rng.bernoulli(density) ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST_CASE("tensor layout is row major") {
  Tensor t({2, 3, 4});
  t.at(1, 2, 3) = 7.0;
  CHECK(t[1 * 12 + 2 * 4 + 3] == 7.0);
  Tensor m({3, 4});
  m.at(2, 1) = 5.0;
  CHECK(m[2 * 4 + 1] == 5.0);
  CHECK(Tensor::numel({2, 3, 4}) == 24);
}

TEST_CASE("conv2d forward matches the direct-loop oracle") {
  Rng rng(101);
  struct Cfg {
    int cin, cout, h, w, k, s;
  };
  const std::vector<Cfg> cfgs = {
      {1, 1, 5, 5, 3, 1}, {3, 4, 7, 9, 3, 1}, {2, 3, 8, 10, 5, 1},
      {3, 4, 8, 10, 3, 2}, {2, 2, 9, 11, 5, 2}, {4, 1, 6, 6, 1, 1},
      {1, 3, 7, 7, 1, 2},
  };
  for (const auto& c : cfgs) {
    Tensor x = random_tensor({c.cin, c.h, c.w}, rng);
    Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
    Tensor b = random_tensor({c.cout}, rng);

    Tape t;
    Var y = conv2d(t, t.constant(x), t.constant(w), t.constant(b), c.s);
    Tensor ref = oracle::conv2d(x, w, &b, c.s);
    REQUIRE(t.value(y).shape() == ref.shape());
    CHECK(oracle::max_abs_diff(t.value(y), ref) < 1e-12);

    Var y2 = conv2d(t, t.constant(x), t.constant(w), c.s);
    Tensor ref2 = oracle::conv2d(x, w, nullptr, c.s);
    CHECK(oracle::max_abs_diff(t.value(y2), ref2) < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad shapes") {
  Tape t;
  Var x = t.constant(Tensor({2, 5, 5}));
  CHECK_THROWS_AS(conv2d(t, x, t.constant(Tensor({3, 1, 3, 3})), 1), ConfigError);
  CHECK_THROWS_AS(conv2d(t, x, t.constant(Tensor({3, 2, 4, 4})), 1), ConfigError);
  CHECK_THROWS_AS(conv2d(t, x, t.constant(Tensor({3, 2, 3, 3})), 3), ConfigError);
}

TEST_CASE("conv2d gradients pass central differences") {
  Rng rng(202);
  ParamSet ps;
  ps.add("x", random_tensor({2, 6, 7}, rng));
  ps.add("w1", random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5));
  ps.add("b1", random_tensor({3}, rng, -0.2, 0.2));
  ps.add("w2", random_tensor({2, 3, 3, 3}, rng, -0.5, 0.5));

  auto fn = [](ParamSet& p, bool want_grad) {
    Tape t;
    Var x = t.param(p, "x");
    Var h = relu(t, conv2d(t, x, t.param(p, "w1"), t.param(p, "b1"), 1));
    Var y = sigmoid(t, conv2d(t, h, t.param(p, "w2"), 2));
    Var loss = sum(t, y);
    if (want_grad) {
      p.zero_grad();
      t.backward(loss);
    }
    return t.value(loss)[0];
  };

  auto rep = grad_check(fn, ps, 1e-6, 0, 7);
  CHECK(rep.coords_checked == static_cast<int>(ps.total_size()));
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("elementwise op gradients pass central differences") {
  Rng rng(303);
  ParamSet ps;
  ps.add("a", random_tensor({2, 4, 5}, rng, 0.2, 1.5));
  ps.add("b", random_tensor({2, 4, 5}, rng, 0.2, 1.5));
  Tensor mask = random_mask(4, 5, rng, 0.6);

  auto fn = [mask](ParamSet& p, bool want_grad) {
    Tape t;
    Var a = t.param(p, "a");
    Var b = t.param(p, "b");
    Var u = mul(t, sigmoid(t, a), clamp(t, b, 0.3, 1.2));
    Var v = sub(t, ad::abs(t, scale(t, a, -1.3)), ad::log(t, add_scalar(t, b, 1.0)));
    Var w = add(t, u, v);
    Var loss = sum(t, mul_mask(t, w, mask));
    if (want_grad) {
      p.zero_grad();
      t.backward(loss);
    }
    return t.value(loss)[0];
  };

  auto rep = grad_check(fn, ps, 1e-6, 0, 7);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("upsample2 interpolates with half-pixel centers and clamped edges") {
  Tape t;
  Tensor x({1, 1, 2});
  x[0] = 1.0;
  x[1] = 3.0;
  Var y = upsample2(t, t.constant(x));
  const Tensor& yv = t.value(y);
  REQUIRE(yv.shape() == std::vector<int>{1, 2, 4});
  // Along width: [a, 0.75a+0.25b, 0.25a+0.75b, b]; rows identical (H==1).
  for (int r = 0; r < 2; ++r) {
    CHECK(yv.at(0, r, 0) == doctest::Approx(1.0));
    CHECK(yv.at(0, r, 1) == doctest::Approx(1.5));
    CHECK(yv.at(0, r, 2) == doctest::Approx(2.5));
    CHECK(yv.at(0, r, 3) == doctest::Approx(3.0));
  }

  // Constants are preserved exactly.
  Rng rng(404);
  Tensor c = Tensor::full({3, 4, 6}, 2.5);
  Var yc = upsample2(t, t.constant(c));
  for (double v : t.value(yc).raw()) CHECK(v == doctest::Approx(2.5).epsilon(1e-14));

  // Gradient check through a weighted sum.
  ParamSet ps;
  ps.add("x", random_tensor({2, 3, 4}, rng));
  Tensor wsum = random_tensor({1, 6, 8}, rng);
  auto fn = [wsum](ParamSet& p, bool want_grad) {
    Tape tt;
    Var loss = sum(tt, mul_mask(tt, upsample2(tt, tt.param(p, "x")), wsum));
    if (want_grad) {
      p.zero_grad();
      tt.backward(loss);
    }
    return tt.value(loss)[0];
  };
  CHECK(grad_check(fn, ps, 1e-6, 0, 7).max_rel_err < 1e-6);
}

TEST_CASE("avg_pool matches the loop oracle and reduces to the global mean") {
  Rng rng(505);
  Tensor x = random_tensor({3, 8, 12}, rng);
  Tape t;
  for (int s : {2, 4}) {
    Var y = avg_pool(t, t.constant(x), s);
    CHECK(oracle::max_abs_diff(t.value(y), oracle::avg_pool(x, s)) < 1e-12);
  }
  Tensor one = random_tensor({1, 6, 6}, rng);
  Var g = avg_pool(t, t.constant(one), 6);
  double mean = 0.0;
  for (double v : one.raw()) mean += v;
  mean /= static_cast<double>(one.size());
  CHECK(t.value(g)[0] == doctest::Approx(mean).epsilon(1e-12));

  CHECK_THROWS_AS(avg_pool(t, t.constant(x), 5), ConfigError);

  ParamSet ps;
  ps.add("x", random_tensor({2, 4, 6}, rng));
  Tensor wsum = random_tensor({2, 2, 3}, rng);
  auto fn = [wsum](ParamSet& p, bool want_grad) {
    Tape tt;
    Var loss = sum(tt, mul_mask(tt, avg_pool(tt, tt.param(p, "x"), 2), wsum));
    if (want_grad) {
      p.zero_grad();
      tt.backward(loss);
    }
    return tt.value(loss)[0];
  };
  CHECK(grad_check(fn, ps, 1e-6, 0, 7).max_rel_err < 1e-6);
}

TEST_CASE("channel_dot, channel_project and broadcast_mul match direct loops") {
  Rng rng(606);
  const int c = 4, h = 3, w = 5, co = 3;
  Tensor f = random_tensor({c, h, w}, rng);
  Tensor pv = random_tensor({c}, rng);
  Tensor qv = random_tensor({c, co}, rng);
  Tensor sv = random_tensor({1, h, w}, rng);

  Tape t;
  const Tensor& dot = t.value(channel_dot(t, t.constant(f), t.constant(pv)));
  const Tensor& proj = t.value(channel_project(t, t.constant(f), t.constant(qv)));
  const Tensor& bm = t.value(broadcast_mul(t, t.constant(f), t.constant(sv)));
  REQUIRE(dot.shape() == std::vector<int>{1, h, w});
  REQUIRE(proj.shape() == std::vector<int>{co, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int cc = 0; cc < c; ++cc) acc += pv[static_cast<std::size_t>(cc)] * f.at(cc, i, j);
      CHECK(dot.at(0, i, j) == doctest::Approx(acc).epsilon(1e-12));
      for (int oc = 0; oc < co; ++oc) {
        double pacc = 0.0;
        for (int cc = 0; cc < c; ++cc) pacc += qv.at(cc, oc) * f.at(cc, i, j);
        CHECK(proj.at(oc, i, j) == doctest::Approx(pacc).epsilon(1e-12));
      }
      for (int cc = 0; cc < c; ++cc)
        CHECK(bm.at(cc, i, j) == doctest::Approx(f.at(cc, i, j) * sv.at(0, i, j)));
    }

  ParamSet ps;
  ps.add("f", f);
  ps.add("p", pv);
  ps.add("q", qv);
  ps.add("s", sv);
  Tensor wsum = random_tensor({co, h, w}, rng);
  auto fn = [wsum](ParamSet& p, bool want_grad) {
    Tape tt;
    Var ff = tt.param(p, "f");
    Var alpha = sigmoid(tt, channel_dot(tt, ff, tt.param(p, "p")));
    Var beta = channel_project(tt, ff, tt.param(p, "q"));
    Var scaled = broadcast_mul(tt, beta, mul(tt, alpha, tt.param(p, "s")));
    Var loss = sum(tt, mul_mask(tt, scaled, wsum));
    if (want_grad) {
      p.zero_grad();
      tt.backward(loss);
    }
    return tt.value(loss)[0];
  };
  CHECK(grad_check(fn, ps, 1e-6, 0, 7).max_rel_err < 1e-6);
}

TEST_CASE("diff_u and diff_v take forward differences and drop one column/row") {
  Tape t;
  Tensor x({1, 2, 3});
  double vals[] = {1, 4, 9, 2, 2, 0};
  for (int i = 0; i < 6; ++i) x[static_cast<std::size_t>(i)] = vals[i];
  const Tensor& du = t.value(diff_u(t, t.constant(x)));
  const Tensor& dv = t.value(diff_v(t, t.constant(x)));
  REQUIRE(du.shape() == std::vector<int>{1, 2, 2});
  REQUIRE(dv.shape() == std::vector<int>{1, 1, 3});
  CHECK(du.at(0, 0, 0) == 3.0);
  CHECK(du.at(0, 0, 1) == 5.0);
  CHECK(du.at(0, 1, 0) == 0.0);
  CHECK(du.at(0, 1, 1) == -2.0);
  CHECK(dv.at(0, 0, 0) == 1.0);
  CHECK(dv.at(0, 0, 1) == -2.0);
  CHECK(dv.at(0, 0, 2) == -9.0);

  Rng rng(707);
  ParamSet ps;
  ps.add("x", random_tensor({2, 5, 6}, rng));
  Tensor wu = random_tensor({2, 5, 5}, rng);
  Tensor wv = random_tensor({2, 4, 6}, rng);
  auto fn = [wu, wv](ParamSet& p, bool want_grad) {
    Tape tt;
    Var xx = tt.param(p, "x");
    Var loss = add(tt, sum(tt, mul_mask(tt, diff_u(tt, xx), wu)),
                   sum(tt, mul_mask(tt, diff_v(tt, xx), wv)));
    if (want_grad) {
      p.zero_grad();
      tt.backward(loss);
    }
    return tt.value(loss)[0];
  };
  CHECK(grad_check(fn, ps, 1e-6, 0, 7).max_rel_err < 1e-6);
}

TEST_CASE("concat_ch stacks channels and routes gradients to each parent") {
  Rng rng(808);
  ParamSet ps;
  ps.add("a", random_tensor({2, 3, 4}, rng));
  ps.add("b", random_tensor({1, 3, 4}, rng));
  ps.add("c", random_tensor({3, 3, 4}, rng));

  {
    Tape t;
    Var cat = concat_ch(t, {t.param(ps, "a"), t.param(ps, "b"), t.param(ps, "c")});
    const Tensor& y = t.value(cat);
    REQUIRE(y.shape() == std::vector<int>{6, 3, 4});
    CHECK(y.at(0, 1, 2) == ps.at("a").value.at(0, 1, 2));
    CHECK(y.at(2, 1, 2) == ps.at("b").value.at(0, 1, 2));
    CHECK(y.at(4, 2, 3) == ps.at("c").value.at(1, 2, 3));
  }

  Tensor wsum = random_tensor({6, 3, 4}, rng);
  auto fn = [wsum](ParamSet& p, bool want_grad) {
    Tape t;
    Var cat = concat_ch(t, {t.param(p, "a"), t.param(p, "b"), t.param(p, "c")});
    Var loss = sum(t, mul_mask(t, cat, wsum));
    if (want_grad) {
      p.zero_grad();
      t.backward(loss);
    }
    return t.value(loss)[0];
  };
  CHECK(grad_check(fn, ps, 1e-6, 0, 7).max_rel_err < 1e-6);
}

TEST_CASE("sparse_conv matches the masked-mean oracle") {
  Rng rng(909);
  for (int trial = 0; trial < 10; ++trial) {
    const int cin = 1 + trial % 3, cout = 1 + (trial + 1) % 4;
    const int h = 6 + trial % 5, w = 7 + trial % 4;
    const int k = (trial % 2) ? 3 : 5;
    Tensor x = random_tensor({cin, h, w}, rng);
    Tensor m = random_mask(h, w, rng, 0.25);
    Tensor kw = random_tensor({cout, cin, k, k}, rng);
    Tensor b = random_tensor({cout}, rng);

    Tape t;
    auto out = sparse_conv(t, t.constant(x), m, t.constant(kw), t.constant(b), 1e-8);
    Tensor ref = oracle::sparse_conv(x, m, kw, b, 1e-8);
    CHECK(oracle::max_abs_diff(t.value(out.y), ref) < 1e-9);
    CHECK(oracle::max_abs_diff(out.mask, oracle::mask_dilate(m, k)) == 0.0);
  }
}

TEST_CASE("sparse_conv output is invariant to values at unobserved pixels") {
  Rng rng(111);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 8, w = 9, cin = 2, cout = 3, k = 3;
    Tensor x = random_tensor({cin, h, w}, rng);
    Tensor m = random_mask(h, w, rng, 0.3);
    Tensor kw = random_tensor({cout, cin, k, k}, rng);
    Tensor b = random_tensor({cout}, rng);

    Tensor x2 = x;
    for (int c = 0; c < cin; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          if (m.at(0, i, j) == 0.0) x2.at(c, i, j) = rng.uniform(-100.0, 100.0);

    Tape t;
    auto y1 = sparse_conv(t, t.constant(x), m, t.constant(kw), t.constant(b), 1e-8);
    auto y2 = sparse_conv(t, t.constant(x2), m, t.constant(kw), t.constant(b), 1e-8);
    CHECK(oracle::max_abs_diff(t.value(y1.y), t.value(y2.y)) == 0.0);
  }
}

TEST_CASE("sparse_conv with an empty mask yields the bias everywhere") {
  Tape t;
  Rng rng(121);
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor m({1, 5, 5});
  Tensor kw = random_tensor({3, 2, 3, 3}, rng);
  Tensor b({3});
  b[0] = 0.5;
  b[1] = -1.0;
  b[2] = 2.0;
  auto out = sparse_conv(t, t.constant(x), m, t.constant(kw), t.constant(b), 1e-8);
  const Tensor& y = t.value(out.y);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) CHECK(y.at(c, i, j) == b[static_cast<std::size_t>(c)]);
  for (double v : out.mask.raw()) CHECK(v == 0.0);
}

TEST_CASE("sparse_conv gradients pass central differences") {
  Rng rng(131);
  ParamSet ps;
  ps.add("x", random_tensor({2, 6, 7}, rng));
  ps.add("k", random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5));
  ps.add("b", random_tensor({3}, rng, -0.2, 0.2));
  Tensor m = random_mask(6, 7, rng, 0.35);
  Tensor wsum = random_tensor({3, 6, 7}, rng);

  auto fn = [m, wsum](ParamSet& p, bool want_grad) {
    Tape t;
    auto out = sparse_conv(t, t.param(p, "x"), m, t.param(p, "k"), t.param(p, "b"), 1e-8);
    Var loss = sum(t, mul_mask(t, out.y, wsum));
    if (want_grad) {
      p.zero_grad();
      t.backward(loss);
    }
    return t.value(loss)[0];
  };
  CHECK(grad_check(fn, ps, 1e-6, 0, 7).max_rel_err < 1e-6);
}

TEST_CASE("window counts and mask dilation match their oracles") {
  Rng rng(141);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 4 + trial % 6, w = 5 + trial % 5;
    const int k = (trial % 2) ? 3 : 5;
    Tensor m = random_mask(h, w, rng, 0.4);
    CHECK(oracle::max_abs_diff(cafnet::ad::correlate_ones(m, k), oracle::window_count(m, k)) ==
          0.0);
    CHECK(oracle::max_abs_diff(cafnet::ad::mask_maxpool(m, k), oracle::mask_dilate(m, k)) == 0.0);
  }
}

TEST_CASE("backward accumulates across calls and binds parameter gradients") {
  ParamSet ps;
  Tensor init({3});
  init[0] = 1.0;
  init[1] = -2.0;
  init[2] = 0.5;
  ps.add("p", init);

  ps.zero_grad();
  {
    Tape t;
    Var p = t.param(ps, "p");
    Var loss = sum(t, mul(t, p, p));  // sum p_i^2, gradient 2 p
    t.backward(loss);
    CHECK_THROWS_AS(t.backward(loss), NumericError);  // one backward per tape
  }
  for (int i = 0; i < 3; ++i)
    CHECK(ps.at("p").grad[static_cast<std::size_t>(i)] ==
          doctest::Approx(2.0 * init[static_cast<std::size_t>(i)]));

  {  // a second tape accumulates, which is how batch gradients are formed
    Tape t;
    Var p = t.param(ps, "p");
    t.backward(sum(t, mul(t, p, p)));
  }
  for (int i = 0; i < 3; ++i)
    CHECK(ps.at("p").grad[static_cast<std::size_t>(i)] ==
          doctest::Approx(4.0 * init[static_cast<std::size_t>(i)]));

  ps.zero_grad();
  for (double g : ps.at("p").grad.raw()) CHECK(g == 0.0);

  {
    Tape t;
    Var p = t.param(ps, "p");
    CHECK_THROWS_AS(t.backward(p), NumericError);  // non-scalar root
  }
  CHECK_THROWS_AS(ps.add("p", Tensor({1})), ConfigError);
  CHECK_THROWS_AS(ps.at("missing"), ConfigError);
}

TEST_CASE("grad_check subsamples coordinates and validates eps") {
  ParamSet ps;
  Rng rng(151);
  ps.add("p", random_tensor({4, 5}, rng));
  auto fn = [](ParamSet& p, bool want_grad) {
    Tape t;
    Var loss = sum(t, mul(t, t.param(p, "p"), t.param(p, "p")));
    if (want_grad) {
      p.zero_grad();
      t.backward(loss);
    }
    return t.value(loss)[0];
  };
  auto rep = grad_check(fn, ps, 1e-6, 5, 7);
  CHECK(rep.coords_checked == 5);
  CHECK(rep.max_rel_err < 1e-7);
  CHECK_THROWS_AS(grad_check(fn, ps, 1e-2, 0, 7), ConfigError);
}
