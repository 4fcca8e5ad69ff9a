// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "odegan/core/adam.hpp"
#include "odegan/core/nn.hpp"
#include "odegan/core/ops.hpp"
#include "odegan/core/rng.hpp"
#include "odegan/core/serialize.hpp"
#include "odegan/core/tensor.hpp"
#include "odegan/verify/gradcheck.hpp"

using namespace odegan;
using core::Tensor;
using D = double;
namespace fs = std::filesystem;

namespace {

// Reduce an arbitrary tensor to a scalar with fixed non-uniform weights so
// gradchecks see a generic upstream gradient.
Tensor<D> weighted_sum(const Tensor<D>& y, std::uint64_t tag = 7) {
  core::Rng rng = core::Rng::derive(0xABCD, "wsum", tag);
  Tensor<D> w;
  {
    core::NoGradGuard ng;
    w = Tensor<D>::uniform(rng, y.shape(), 0.5, 1.5);
  }
  return core::sum_all(core::mul(y, w));
}

void check_grad(verify::GradcheckResult r) {
  CHECK_MESSAGE(r.ok, r.worst, " rel=", r.max_rel_err);
  CHECK(r.max_rel_err < 1e-4);
}

}  // namespace

TEST_CASE("rng: determinism, ranges, derive independence") {
  core::Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    auto x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
    all_equal = all_equal && (x == y);
    any_diff = any_diff || (x != z);
  }
  CHECK(all_equal);
  CHECK(any_diff);

  core::Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    double v = u.uniform01();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }

  auto s1 = core::Rng::derive(1, "stream", 0, 0);
  auto s2 = core::Rng::derive(1, "stream", 1, 0);
  auto s3 = core::Rng::derive(1, "other", 0, 0);
  CHECK(s1.next_u64() != s2.next_u64());
  CHECK(core::Rng::derive(1, "stream", 0, 0).next_u64() !=
        s3.next_u64());
}

TEST_CASE("rng: sample_indices distinct, shuffle deterministic") {
  core::Rng r(5);
  auto idx = r.sample_indices(100, 20);
  CHECK(idx.size() == 20);
  std::set<std::size_t> seen(idx.begin(), idx.end());
  CHECK(seen.size() == 20);
  for (auto i : idx) CHECK(i < 100);

  std::vector<int> v1{1, 2, 3, 4, 5, 6}, v2{1, 2, 3, 4, 5, 6};
  core::Rng r1(9), r2(9);
  r1.shuffle(v1);
  r2.shuffle(v2);
  CHECK(v1 == v2);

  core::Rng g(11);
  double m = 0;
  for (int i = 0; i < 10000; ++i) m += g.normal();
  CHECK(std::abs(m / 10000.0) < 0.05);
}

TEST_CASE("tensor: construction and error paths") {
  CHECK_THROWS_AS(Tensor<float>::from_vector({2, 2}, {1, 2, 3}),
                  core::ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS((void)t.item(), core::UsageError);
  CHECK(Tensor<float>::scalar(4.f).item() == 4.f);

  t.set_requires_grad(true);
  auto y = core::mul_scalar(t, 2.f);
  CHECK_THROWS_AS(y.set_requires_grad(false), core::UsageError);
  CHECK(y.requires_grad());

  auto d = y.detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.value() == y.value());
}

TEST_CASE("tensor: NoGradGuard disables taping") {
  Tensor<D> x({3}, 2.0, true);
  {
    core::NoGradGuard ng;
    auto y = core::square(x);
    CHECK_FALSE(y.requires_grad());
  }
  auto y = core::square(x);
  CHECK(y.requires_grad());
}

TEST_CASE("backward: sum of squares gradient") {
  auto x = Tensor<D>::from_vector({3}, {1, 2, 3}, true);
  auto loss = core::sum_all(core::square(x));
  core::backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(4).epsilon(1e-12));
  CHECK(x.grad()[2] == doctest::Approx(6).epsilon(1e-12));
}

TEST_CASE("backward: unreachable leaf keeps zero grad; non-scalar rejected") {
  auto x = Tensor<D>::from_vector({2}, {1, 2}, true);
  auto z = Tensor<D>::from_vector({2}, {5, 5}, true);
  auto loss = core::sum_all(core::square(x));
  core::backward(loss);
  z.node()->ensure_grad();
  CHECK(z.grad()[0] == 0.0);
  CHECK(z.grad()[1] == 0.0);

  auto vec = core::square(x);
  CHECK_THROWS_AS(core::backward(vec), core::UsageError);
}

TEST_CASE("backward: accumulation across calls, diamond reuse") {
  auto x = Tensor<D>::from_vector({2}, {3, 4}, true);
  auto l1 = core::sum_all(core::square(x));
  core::backward(l1);
  auto g1 = x.grad();
  auto l2 = core::sum_all(core::square(x));
  core::backward(l2);
  CHECK(x.grad()[0] == doctest::Approx(2 * g1[0]));
  x.zero_grad();

  // y = x*x + x*x uses x twice through shared subexpression and twice again.
  auto p = core::mul(x, x);
  auto loss = core::sum_all(core::add(p, p));
  core::backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(4 * 3.0));
  CHECK(x.grad()[1] == doctest::Approx(4 * 4.0));
}

TEST_CASE("backward: tape linearity") {
  core::Rng rng(77);
  auto x = Tensor<D>::uniform(rng, {4, 3}, 0.3, 1.7);
  x.set_requires_grad(true);
  auto f = [&] { return core::sum_all(core::square(x)); };
  auto g = [&] { return core::sum_all(core::exp_t(x)); };

  x.zero_grad();
  core::backward(f());
  auto gf = x.grad();
  x.zero_grad();
  core::backward(g());
  auto gg = x.grad();

  double a = 2.25, b = -0.75;
  x.zero_grad();
  core::backward(core::add(core::mul_scalar(f(), a), core::mul_scalar(g(), b)));
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] ==
          doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-10));
}

TEST_CASE("gradcheck: binary and scalar pointwise ops") {
  core::Rng rng(101);
  auto mk = [&](double lo, double hi) {
    return Tensor<D>::uniform(rng, {3, 4}, lo, hi);
  };
  check_grad(verify::gradcheck<D>(
      [](const std::vector<Tensor<D>>& in) {
        return weighted_sum(core::add(in[0], in[1]), 1);
      },
      {mk(-1, 1), mk(-1, 1)}));
  check_grad(verify::gradcheck<D>(
      [](const std::vector<Tensor<D>>& in) {
        return weighted_sum(core::sub(in[0], in[1]), 2);
      },
      {mk(-1, 1), mk(-1, 1)}));
  check_grad(verify::gradcheck<D>(
      [](const std::vector<Tensor<D>>& in) {
        return weighted_sum(core::mul(in[0], in[1]), 3);
      },
      {mk(-1, 1), mk(-1, 1)}));
  check_grad(verify::gradcheck<D>(
      [](const std::vector<Tensor<D>>& in) {
        return weighted_sum(core::div(in[0], in[1]), 4);
      },
      {mk(-1, 1), mk(0.5, 1.5)}));
  check_grad(verify::gradcheck<D>(
      [](const std::vector<Tensor<D>>& in) {
        return weighted_sum(core::add_scalar(in[0], 2.5), 5);
      },
      {mk(-1, 1)}));
  check_grad(verify::gradcheck<D>(
      [](const std::vector<Tensor<D>>& in) {
        return weighted_sum(core::mul_scalar(in[0], -1.25), 6);
      },
      {mk(-1, 1)}));
  check_grad(verify::gradcheck<D>(
      [](const std::vector<Tensor<D>>& in) {
        return weighted_sum(core::scalar_sub(3.0, in[0]), 7);
      },
      {mk(-1, 1)}));
}

TEST_CASE("gradcheck: unary nonlinearities") {
  core::Rng rng(102);
  auto mk = [&](double lo, double hi) {
    return Tensor<D>::uniform(rng, {4, 5}, lo, hi);
  };
  auto away_from_zero = [&]() {
    auto t = mk(0.2, 1.5);
    core::Rng sign(5);
    for (auto& v : t.value())
      if (sign.uniform01() < 0.5) v = -v;
    return t;
  };
  using V = const std::vector<Tensor<D>>&;
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::exp_t(in[0]), 10); }, {mk(-1, 1)}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::log_t(in[0]), 11); },
      {mk(0.3, 3)}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::abs_t(in[0]), 12); },
      {away_from_zero()}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::square(in[0]), 13); },
      {mk(-2, 2)}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::relu(in[0]), 14); },
      {away_from_zero()}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::leaky_relu(in[0], 0.2), 15); },
      {away_from_zero()}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::tanh_t(in[0]), 16); },
      {mk(-2, 2)}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::sigmoid(in[0]), 17); },
      {mk(-3, 3)}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::softplus(in[0]), 18); },
      {mk(-3, 3)}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::neg(in[0]), 19); }, {mk(-1, 1)}));
}

TEST_CASE("gradcheck: reductions (global and per-axis)") {
  core::Rng rng(103);
  auto x3 = Tensor<D>::uniform(rng, {2, 3, 4}, -1, 1);
  // Perturbations of 1e-5 must not change argmax: space the values out.
  auto spread = Tensor<D>({2, 3, 4});
  {
    auto idx = 0;
    for (auto& v : spread.value()) v = 0.01 * (idx++);
    core::Rng sh(3);
    sh.shuffle(spread.value());
  }
  using V = const std::vector<Tensor<D>>&;
  check_grad(verify::gradcheck<D>(
      [](V in) { return core::sum_all(in[0]); }, {x3}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return core::mean_all(in[0]); }, {x3}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return core::max_all(in[0]); }, {spread}));
  for (std::size_t axis = 0; axis < 3; ++axis) {
    check_grad(verify::gradcheck<D>(
        [axis](V in) { return weighted_sum(core::sum_axis(in[0], axis), axis); },
        {x3}));
    check_grad(verify::gradcheck<D>(
        [axis](V in) {
          return weighted_sum(core::mean_axis(in[0], axis), axis + 3);
        },
        {x3}));
    check_grad(verify::gradcheck<D>(
        [axis](V in) {
          return weighted_sum(core::max_axis(in[0], axis), axis + 6);
        },
        {spread}));
  }
  CHECK_THROWS_AS(core::sum_axis(x3, 3), core::UsageError);
}

TEST_CASE("gradcheck: shape surgery") {
  core::Rng rng(104);
  auto a = Tensor<D>::uniform(rng, {2, 6}, -1, 1);
  auto b = Tensor<D>::uniform(rng, {3, 6}, -1, 1);
  auto c = Tensor<D>::uniform(rng, {2, 4}, -1, 1);
  using V = const std::vector<Tensor<D>>&;
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::reshape(in[0], {3, 4}), 20); },
      {a}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::transpose2d(in[0]), 21); }, {a}));
  check_grad(verify::gradcheck<D>(
      [](V in) {
        return weighted_sum(core::concat<D>({in[0], in[1]}, 0), 22);
      },
      {a, b}));
  check_grad(verify::gradcheck<D>(
      [](V in) {
        return weighted_sum(core::concat<D>({in[0], in[1]}, 1), 23);
      },
      {a, c}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::slice(in[0], 1, 2, 3), 24); },
      {a}));
  // gather with repeated indices exercises scatter-add in backward.
  std::vector<std::size_t> idx{0, 5, 5, 11, 3, 0};
  check_grad(verify::gradcheck<D>(
      [idx](V in) {
        return weighted_sum(core::gather_flat(in[0], idx, {2, 3}), 25);
      },
      {a}));

  CHECK_THROWS_AS(core::reshape(a, {5, 5}), core::ShapeError);
  CHECK_THROWS_AS(core::concat<D>({a, c}, 0), core::ShapeError);
  CHECK_THROWS_AS(core::slice(a, 1, 4, 4), core::ShapeError);
  CHECK_THROWS_AS(core::gather_flat(a, {99}, {1}), core::UsageError);
}

TEST_CASE("gradcheck: matmul, add_rowvec, batched_rowdot") {
  core::Rng rng(105);
  auto A = Tensor<D>::uniform(rng, {3, 4}, -1, 1);
  auto B = Tensor<D>::uniform(rng, {4, 5}, -1, 1);
  auto v = Tensor<D>::uniform(rng, {5}, -1, 1);
  auto q = Tensor<D>::uniform(rng, {3, 6}, -1, 1);
  auto K = Tensor<D>::uniform(rng, {3, 4, 6}, -1, 1);
  using V = const std::vector<Tensor<D>>&;
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::matmul(in[0], in[1]), 30); },
      {A, B}));
  check_grad(verify::gradcheck<D>(
      [](V in) {
        return weighted_sum(
            core::add_rowvec(core::matmul(in[0], in[1]), in[2]), 31);
      },
      {A, B, v}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::batched_rowdot(in[0], in[1]), 32); },
      {q, K}));
  CHECK_THROWS_AS(core::matmul(A, Tensor<D>({3, 2})), core::ShapeError);
}

TEST_CASE("matmul matches naive oracle") {
  core::Rng rng(106);
  auto A = Tensor<D>::uniform(rng, {4, 7}, -2, 2);
  auto B = Tensor<D>::uniform(rng, {7, 3}, -2, 2);
  auto C = core::matmul(A, B);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 7; ++k)
        acc += A.value()[i * 7 + k] * B.value()[k * 3 + j];
      CHECK(C.value()[i * 3 + j] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("gradcheck: pad2d, conv2d, upsample") {
  core::Rng rng(107);
  auto x = Tensor<D>::uniform(rng, {2, 2, 5, 5}, -1, 1);
  auto w = Tensor<D>::uniform(rng, {3, 2, 3, 3}, -0.5, 0.5);
  auto b = Tensor<D>::uniform(rng, {3}, -0.5, 0.5);
  auto w4 = Tensor<D>::uniform(rng, {2, 2, 4, 4}, -0.5, 0.5);
  using V = const std::vector<Tensor<D>>&;
  check_grad(verify::gradcheck<D>(
      [](V in) {
        return weighted_sum(core::pad2d(in[0], 1, core::PadMode::kZero), 40);
      },
      {x}));
  check_grad(verify::gradcheck<D>(
      [](V in) {
        return weighted_sum(core::pad2d(in[0], 2, core::PadMode::kReflect),
                            41);
      },
      {x}));
  check_grad(verify::gradcheck<D>(
      [](V in) {
        return weighted_sum(core::conv2d(in[0], in[1], in[2], 1), 42);
      },
      {x, w, b}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::conv2d(in[0], in[1], 2), 43); },
      {x, w4}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::upsample_nearest(in[0], 2), 44); },
      {x}));
  CHECK_THROWS_AS(core::conv2d(x, Tensor<D>({3, 5, 3, 3}), 1),
                  core::ShapeError);
  CHECK_THROWS_AS(core::pad2d(x, 5, core::PadMode::kReflect),
                  core::ShapeError);
}

TEST_CASE("conv2d matches direct convolution oracle") {
  core::Rng rng(108);
  auto x = Tensor<D>::uniform(rng, {2, 3, 6, 7}, -1, 1);
  auto w = Tensor<D>::uniform(rng, {4, 3, 3, 3}, -1, 1);
  auto b = Tensor<D>::uniform(rng, {4}, -1, 1);
  for (std::size_t stride : {std::size_t(1), std::size_t(2)}) {
    auto y = core::conv2d(x, w, b, stride);
    std::size_t ho = (6 - 3) / stride + 1, wo = (7 - 3) / stride + 1;
    REQUIRE(y.shape() == core::Shape{2, 4, ho, wo});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t co = 0; co < 4; ++co)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            double acc = b.value()[co];
            for (std::size_t ci = 0; ci < 3; ++ci)
              for (std::size_t ki = 0; ki < 3; ++ki)
                for (std::size_t kj = 0; kj < 3; ++kj)
                  acc += x.value()[((n * 3 + ci) * 6 + i * stride + ki) * 7 +
                                   j * stride + kj] *
                         w.value()[((co * 3 + ci) * 3 + ki) * 3 + kj];
            CHECK(y.value()[((n * 4 + co) * ho + i) * wo + j] ==
                  doctest::Approx(acc).epsilon(1e-10));
          }
  }
}

TEST_CASE("pad2d reflect forward pattern") {
  auto x = Tensor<D>::from_vector({1, 1, 3, 3},
                                  {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto y = core::pad2d(x, 1, core::PadMode::kReflect);
  REQUIRE(y.shape() == core::Shape{1, 1, 5, 5});
  // Row 0 mirrors row 2 of the padded interior (source row 1).
  std::vector<D> expect{5, 4, 5, 6, 5, 2, 1, 2, 3, 2, 5, 4, 5,
                        6, 5, 8, 7, 8, 9, 8, 5, 4, 5, 6, 5};
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(y.value()[i] == expect[i]);

  auto z = core::pad2d(x, 1, core::PadMode::kZero);
  CHECK(z.value()[0] == 0);
  CHECK(z.value()[6] == 1);
}

TEST_CASE("upsample_nearest forward") {
  auto x = Tensor<D>::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = core::upsample_nearest(x, 2);
  std::vector<D> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(y.value() == expect);
}

TEST_CASE("gradcheck + stats: instance_norm and batch_norm") {
  core::Rng rng(109);
  auto x = Tensor<D>::uniform(rng, {2, 3, 4, 4}, -2, 2);
  using V = const std::vector<Tensor<D>>&;
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::instance_norm(in[0]), 50); }, {x}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::batch_norm(in[0]), 51); }, {x}));

  auto y = core::instance_norm(x);
  for (std::size_t g = 0; g < 6; ++g) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 16; ++i) mean += y.value()[g * 16 + i];
    mean /= 16;
    for (std::size_t i = 0; i < 16; ++i) {
      double d = y.value()[g * 16 + i] - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1) < 1e-3);
  }
}

TEST_CASE("gradcheck + properties: softmax family, l2 normalize") {
  core::Rng rng(110);
  auto x = Tensor<D>::uniform(rng, {4, 6}, -2, 2);
  using V = const std::vector<Tensor<D>>&;
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::softmax(in[0], 1), 60); }, {x}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::softmax(in[0], 0), 61); }, {x}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::log_softmax(in[0], 1), 62); },
      {x}));
  check_grad(verify::gradcheck<D>(
      [](V in) { return weighted_sum(core::l2_normalize_rows(in[0]), 63); },
      {x}));

  auto sm = core::softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += sm.value()[r * 6 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto eq = Tensor<D>({2, 5}, 3.7);
  auto sm_eq = core::softmax(eq, 1);
  for (double v : sm_eq.value())
    CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

  auto ls = core::log_softmax(x, 1);
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(ls.value()[i] ==
          doctest::Approx(std::log(sm.value()[i])).epsilon(1e-10));

  auto nm = core::l2_normalize_rows(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c)
      s += nm.value()[r * 6 + c] * nm.value()[r * 6 + c];
    CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("conv parameter-count golden: 3x3 64->128 with bias") {
  core::ParamTree<float> tree;
  tree.emplace("w", Tensor<float>({128, 64, 3, 3}, 0.f, true));
  tree.emplace("b", Tensor<float>({128}, 0.f, true));
  CHECK(core::count_params(tree) == 73856);
  CHECK(core::count_params(core::ParamTree<float>{}) == 0);
}

TEST_CASE("adam: hand-computed first step") {
  core::ParamTree<D> params;
  params.emplace("p", Tensor<D>({1}, 1.0, true));
  auto& p = params.at("p");
  p.node()->ensure_grad();
  p.grad()[0] = 1.0;
  core::AdamState<D> st;
  core::AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.eps = 1e-8;
  core::adam_step(params, st, cfg);
  // m̂ = v̂ = 1 after bias correction, so the step is lr/(1+eps).
  double expect = 1.0 - 0.1 / (1.0 + 1e-8);
  CHECK(p.value()[0] == doctest::Approx(expect).epsilon(1e-10));
  CHECK(st.t == 1);
}

TEST_CASE("adam: zero grad leaves params, moments decay; errors; determinism") {
  core::ParamTree<D> params;
  params.emplace("p", Tensor<D>({2}, 2.0, true));
  auto& p = params.at("p");
  p.node()->ensure_grad();
  p.grad() = {1.0, -1.0};
  core::AdamState<D> st;
  core::AdamConfig cfg;
  core::adam_step(params, st, cfg);
  double m_after_1 = st.m.at("p")[0];
  p.zero_grad();
  auto val_before = p.value();
  core::adam_step(params, st, cfg);
  // m decays by beta1 but v also decays, so the param still moves slightly;
  // moments must shrink toward zero.
  CHECK(std::abs(st.m.at("p")[0]) < std::abs(m_after_1));
  CHECK(st.v.at("p")[0] < 1.0);
  (void)val_before;

  p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(core::adam_step(params, st, cfg),
                       doctest::Contains("'p'"), core::NumericError);

  // Determinism: identical setups give identical trajectories.
  auto run = [] {
    core::ParamTree<D> ps;
    ps.emplace("w", Tensor<D>({3}, 1.0, true));
    core::AdamState<D> s;
    core::AdamConfig c;
    for (int i = 0; i < 5; ++i) {
      auto& w = ps.at("w");
      w.zero_grad();
      auto loss = core::sum_all(core::square(w));
      core::backward(loss);
      core::adam_step(ps, s, c);
    }
    return ps.at("w").value();
  };
  CHECK(run() == run());
}

TEST_CASE("adam: zero gradient exactly preserves params with fresh state") {
  core::ParamTree<D> params;
  params.emplace("p", Tensor<D>({4}, 3.0, true));
  params.at("p").node()->ensure_grad();
  core::AdamState<D> st;
  core::AdamConfig cfg;
  core::adam_step(params, st, cfg);
  for (double v : params.at("p").value()) CHECK(v == 3.0);
}

TEST_CASE("checkpoint: byte-exact round trip") {
  core::Rng rng(111);
  core::ParamTree<float> tree;
  tree.emplace("enc/w", Tensor<float>::randn(rng, {4, 3, 3, 3}, 0.02f));
  tree.emplace("enc/b", Tensor<float>::randn(rng, {4}));
  tree.at("enc/w").set_requires_grad(true);
  tree.at("enc/b").set_requires_grad(true);

  core::Checkpoint ck;
  ck.meta["config_echo"] = "model.base_channels = 4\n";
  ck.meta["step"] = "17";
  ck.put_tree("g", tree);
  std::vector<double> adam_m{0.5, -0.25, 1e-17};
  ck.arrays["adam/m"] = core::ArrayRecord::from(adam_m, {3});

  fs::path path = fs::temp_directory_path() / "odegan_test_ck.bin";
  core::save_checkpoint(path, ck);
  auto lk = core::load_checkpoint(path);
  CHECK(lk.meta.at("config_echo") == ck.meta.at("config_echo"));
  CHECK(lk.meta.at("step") == "17");
  CHECK(lk.arrays.at("g/enc/w").bytes == ck.arrays.at("g/enc/w").bytes);
  CHECK(lk.arrays.at("adam/m").as<double>() == adam_m);

  core::ParamTree<float> fresh;
  fresh.emplace("enc/w", Tensor<float>({4, 3, 3, 3}, 0.f, true));
  fresh.emplace("enc/b", Tensor<float>({4}, 0.f, true));
  lk.load_tree_into("g", fresh);
  CHECK(core::content_hash(fresh) == core::content_hash(tree));
  fs::remove(path);
}

TEST_CASE("checkpoint: error paths") {
  CHECK_THROWS_AS(core::load_checkpoint("/nonexistent/nope.bin"),
                  core::IoError);

  fs::path path = fs::temp_directory_path() / "odegan_test_ck2.bin";
  core::Checkpoint ck;
  std::vector<float> v{1, 2, 3, 4};
  ck.arrays["a"] = core::ArrayRecord::from(v, {2, 2});
  core::save_checkpoint(path, ck);

  // Truncation detection.
  auto size = fs::file_size(path);
  fs::resize_file(path, size - 5);
  CHECK_THROWS_AS(core::load_checkpoint(path), core::IoError);

  core::save_checkpoint(path, ck);
  auto lk = core::load_checkpoint(path);
  core::ParamTree<float> t1;
  t1.emplace("missing", Tensor<float>({2, 2}));
  CHECK_THROWS_AS(lk.load_tree_into("", t1), core::IoError);
  core::ParamTree<float> t2;
  t2.emplace("a", Tensor<float>({4, 1}));
  CHECK_THROWS_AS(lk.load_tree_into("", t2), core::IoError);

  // Bad magic.
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "NOTACKPT_______________";
  }
  CHECK_THROWS_AS(core::load_checkpoint(path), core::IoError);
  fs::remove(path);
}

TEST_CASE("param tree: merge, hash sensitivity, deterministic order") {
  core::ParamTree<float> a, b;
  a.emplace("w", Tensor<float>({2}, 1.f, true));
  b.emplace("k", Tensor<float>({3}, 2.f, true));
  core::ParamTree<float> all;
  core::merge_tree(all, "g/", a);
  core::merge_tree(all, "d/", b);
  CHECK(all.count("g/w") == 1);
  CHECK(all.count("d/k") == 1);
  CHECK(core::count_params(all) == 5);

  auto h1 = core::content_hash(all);
  all.at("g/w").value()[0] = 1.5f;
  CHECK(core::content_hash(all) != h1);

  // Aliasing: merged handles share storage with the source tree.
  CHECK(a.at("w").value()[0] == 1.5f);
}
