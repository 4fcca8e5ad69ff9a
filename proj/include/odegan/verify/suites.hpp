// SPDX-License-Identifier: Apache-2.0
//
// Named verification suites: gradient checks over the whole op surface plus
// a full encoder/ode/decoder pass, solver convergence orders, loss oracles,
// and the parameter-budget goldens. Each suite returns per-check rows so the
// command line can print them and fold the outcome into an exit code.
#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "odegan/core/nn.hpp"
#include "odegan/core/ops.hpp"
#include "odegan/models/generator.hpp"
#include "odegan/verify/gradcheck.hpp"
#include "odegan/verify/odeorder.hpp"
#include "odegan/verify/oracles.hpp"

namespace odegan::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

// Generic upstream gradient: reduce through fixed non-uniform weights so a
// check cannot pass by accident of a symmetric cotangent.
inline core::Tensor<double> wsum(const core::Tensor<double>& y,
                                 std::uint64_t tag) {
  core::Rng rng = core::Rng::derive(0xABCD, "wsum", tag);
  core::Tensor<double> w;
  {
    core::NoGradGuard ng;
    w = core::Tensor<double>::uniform(rng, y.shape(), 0.5, 1.5);
  }
  return core::sum_all(core::mul(y, w));
}

inline CheckResult from_gradcheck(const std::string& name,
                                  const GradcheckResult& r) {
  CheckResult c;
  c.name = name;
  c.pass = r.ok && r.max_rel_err < 1e-4;
  std::ostringstream os;
  os << "max rel err " << r.max_rel_err << " over " << r.coords_checked
     << " coords";
  if (!c.pass && !r.worst.empty()) os << "; worst: " << r.worst;
  c.detail = os.str();
  return c;
}

}  // namespace detail

// Central finite differences at 64-bit against every differentiable op, then
// a full 8x8 generator pass with parameters and input perturbed together.
inline std::vector<CheckResult> run_gradient_checks() {
  using T = core::Tensor<double>;
  using V = const std::vector<T>&;
  namespace c = odegan::core;
  std::vector<CheckResult> out;
  core::Rng rng(7171);
  auto mk = [&](core::Shape s, double lo, double hi) {
    return T::uniform(rng, s, lo, hi);
  };
  // Values spaced apart and clear of the origin so 1e-5 perturbations cannot
  // cross a kink or flip an argmax.
  auto spread = [&](core::Shape s) {
    T t(s);
    std::size_t i = 0;
    for (auto& v : t.value()) v = 0.05 * double(i++) - 0.225;
    core::Rng sh(3);
    sh.shuffle(t.value());
    return t;
  };
  std::uint64_t tag = 0;
  auto push = [&](const std::string& name, auto f, std::vector<T> in) {
    ++tag;
    out.push_back(detail::from_gradcheck(
        name, gradcheck<double>(f, std::move(in))));
  };
  auto w1 = [&](auto op) {
    return [op, t = tag](V in) { return detail::wsum(op(in[0]), t); };
  };
  auto w2 = [&](auto op) {
    return [op, t = tag](V in) { return detail::wsum(op(in[0], in[1]), t); };
  };

  push("add", w2([](const T& a, const T& b) { return c::add(a, b); }),
       {mk({3, 4}, -1, 1), mk({3, 4}, -1, 1)});
  push("sub", w2([](const T& a, const T& b) { return c::sub(a, b); }),
       {mk({3, 4}, -1, 1), mk({3, 4}, -1, 1)});
  push("mul", w2([](const T& a, const T& b) { return c::mul(a, b); }),
       {mk({3, 4}, -1, 1), mk({3, 4}, -1, 1)});
  push("div", w2([](const T& a, const T& b) { return c::div(a, b); }),
       {mk({3, 4}, -1, 1), mk({3, 4}, 0.5, 1.5)});
  push("add_scalar", w1([](const T& a) { return c::add_scalar(a, 2.5); }),
       {mk({3, 4}, -1, 1)});
  push("mul_scalar", w1([](const T& a) { return c::mul_scalar(a, -1.25); }),
       {mk({3, 4}, -1, 1)});
  push("scalar_sub", w1([](const T& a) { return c::scalar_sub(3.0, a); }),
       {mk({3, 4}, -1, 1)});
  push("neg", w1([](const T& a) { return c::neg(a); }), {mk({3, 4}, -1, 1)});
  push("exp", w1([](const T& a) { return c::exp_t(a); }),
       {mk({3, 4}, -1, 1)});
  push("log", w1([](const T& a) { return c::log_t(a); }),
       {mk({3, 4}, 0.3, 3)});
  push("abs", w1([](const T& a) { return c::abs_t(a); }),
       {spread({3, 4})});
  push("square", w1([](const T& a) { return c::square(a); }),
       {mk({3, 4}, -2, 2)});
  push("relu", w1([](const T& a) { return c::relu(a); }), {spread({3, 4})});
  push("leaky_relu", w1([](const T& a) { return c::leaky_relu(a, 0.2); }),
       {spread({3, 4})});
  push("tanh", w1([](const T& a) { return c::tanh_t(a); }),
       {mk({3, 4}, -2, 2)});
  push("sigmoid", w1([](const T& a) { return c::sigmoid(a); }),
       {mk({3, 4}, -3, 3)});
  push("softplus", w1([](const T& a) { return c::softplus(a); }),
       {mk({3, 4}, -3, 3)});
  push("sum_all", [](V in) { return c::sum_all(in[0]); },
       {mk({2, 3, 4}, -1, 1)});
  push("mean_all", [](V in) { return c::mean_all(in[0]); },
       {mk({2, 3, 4}, -1, 1)});
  push("max_all", [](V in) { return c::max_all(in[0]); }, {spread({2, 3, 4})});
  push("sum_axis", w1([](const T& a) { return c::sum_axis(a, 1); }),
       {mk({2, 3, 4}, -1, 1)});
  push("mean_axis", w1([](const T& a) { return c::mean_axis(a, 1); }),
       {mk({2, 3, 4}, -1, 1)});
  push("max_axis", w1([](const T& a) { return c::max_axis(a, 1); }),
       {spread({2, 3, 4})});
  push("reshape", w1([](const T& a) { return c::reshape(a, {3, 4}); }),
       {mk({2, 6}, -1, 1)});
  push("transpose2d", w1([](const T& a) { return c::transpose2d(a); }),
       {mk({3, 5}, -1, 1)});
  push("concat",
       w2([](const T& a, const T& b) { return c::concat<double>({a, b}, 0); }),
       {mk({2, 4}, -1, 1), mk({3, 4}, -1, 1)});
  push("slice", w1([](const T& a) { return c::slice(a, 1, 1, 3); }),
       {mk({2, 6}, -1, 1)});
  push("gather_flat",
       w1([](const T& a) {
         return c::gather_flat(a, {5, 0, 3, 3, 7}, {5});
       }),
       {mk({2, 4}, -1, 1)});
  push("matmul", w2([](const T& a, const T& b) { return c::matmul(a, b); }),
       {mk({3, 4}, -1, 1), mk({4, 2}, -1, 1)});
  push("add_rowvec",
       w2([](const T& a, const T& b) { return c::add_rowvec(a, b); }),
       {mk({3, 4}, -1, 1), mk({4}, -1, 1)});
  push("batched_rowdot",
       w2([](const T& a, const T& b) { return c::batched_rowdot(a, b); }),
       {mk({3, 4}, -1, 1), mk({3, 2, 4}, -1, 1)});
  push("pad2d_zero",
       w1([](const T& a) { return c::pad2d(a, 1, c::PadMode::kZero); }),
       {mk({1, 2, 3, 3}, -1, 1)});
  push("pad2d_reflect",
       w1([](const T& a) { return c::pad2d(a, 1, c::PadMode::kReflect); }),
       {mk({1, 2, 3, 3}, -1, 1)});
  push("conv2d_bias",
       [](V in) {
         return detail::wsum(c::conv2d(in[0], in[1], in[2], 1), 41);
       },
       {mk({1, 2, 5, 5}, -1, 1), mk({3, 2, 3, 3}, -1, 1), mk({3}, -1, 1)});
  push("conv2d_stride2",
       w2([](const T& a, const T& b) { return c::conv2d(a, b, 2); }),
       {mk({1, 2, 6, 6}, -1, 1), mk({3, 2, 3, 3}, -1, 1)});
  push("upsample_nearest",
       w1([](const T& a) { return c::upsample_nearest(a, 2); }),
       {mk({1, 2, 3, 3}, -1, 1)});
  push("instance_norm", w1([](const T& a) { return c::instance_norm(a); }),
       {mk({2, 3, 4, 4}, -1, 1)});
  push("batch_norm", w1([](const T& a) { return c::batch_norm(a); }),
       {mk({2, 3, 4, 4}, -1, 1)});
  push("softmax", w1([](const T& a) { return c::softmax(a, 1); }),
       {mk({3, 5}, -2, 2)});
  push("log_softmax", w1([](const T& a) { return c::log_softmax(a, 1); }),
       {mk({3, 5}, -2, 2)});
  push("l2_normalize_rows",
       w1([](const T& a) { return c::l2_normalize_rows(a); }),
       {mk({3, 5}, 0.2, 1.5)});

  // The whole model at 8x8: gradients flow through the unrolled solver into
  // every parameter tensor and the input. A fixed-seed coordinate subset per
  // tensor keeps the finite-difference sweep quick.
  {
    models::GeneratorConfig gc;
    gc.base_channels = 4;
    gc.n_downsample = 1;
    gc.ode_blocks = 2;
    gc.solver.method = ode::Method::kRk4;
    gc.solver.fixed_step = 0.5;
    models::Generator<double> gen(gc, 909);
    std::vector<T> inputs;
    for (auto& [path, t] : gen.params()) inputs.push_back(t);
    inputs.push_back(mk({1, 3, 8, 8}, -0.9, 0.9));
    GradcheckSpec spec;
    spec.max_coords_per_input = 10;
    out.push_back(detail::from_gradcheck(
        "generator_8x8_end_to_end",
        gradcheck<double>(
            [&gen](V in) { return detail::wsum(gen.forward(in.back()), 99); },
            inputs, spec)));
  }
  return out;
}

// Empirical orders on dy/dt = -y plus the adaptive solver's accuracy.
inline std::vector<CheckResult> run_solver_order_checks() {
  std::vector<CheckResult> out;
  auto push = [&](const std::string& name, double measured, double want,
                  double tol) {
    CheckResult c;
    c.name = name;
    c.pass = std::abs(measured - want) <= tol;
    std::ostringstream os;
    os << "measured " << measured << ", want " << want << " +- " << tol;
    c.detail = os.str();
    out.push_back(c);
  };
  push("euler_order", measure_order(ode::Method::kEuler).order, 1.0, 0.2);
  push("rk4_order", measure_order(ode::Method::kRk4).order, 4.0, 0.3);

  {
    core::NoGradGuard ng;
    ode::OdeProblem<double> problem;
    problem.dynamics = [](double, const core::Tensor<double>& h) {
      return core::mul_scalar(h, -1.0);
    };
    problem.t0 = 0.0;
    problem.t1 = 1.0;
    problem.h0 = core::Tensor<double>::from_vector({1}, {1.0});
    ode::SolverConfig cfg;
    cfg.method = ode::Method::kDopri5;
    cfg.rtol = 1e-6;
    cfg.atol = 1e-8;
    auto sol = ode::integrate(problem, cfg);
    double err = std::abs(sol.h1.value()[0] - std::exp(-1.0));
    CheckResult c;
    c.name = "dopri5_accuracy";
    c.pass = err < 1e-5;
    std::ostringstream os;
    os << "abs err " << err << " at rtol 1e-6, want < 1e-5";
    c.detail = os.str();
    out.push_back(c);
  }
  return out;
}

inline std::vector<CheckResult> run_loss_oracle_checks(
    std::uint64_t seed = 2026) {
  std::vector<CheckResult> out;
  for (const auto& o : run_loss_oracles(seed)) {
    CheckResult c;
    c.name = o.name;
    c.pass = o.ok;
    std::ostringstream os;
    os << "impl " << o.impl << " vs oracle " << o.oracle << ", err " << o.err
       << " (tol 1e-8)";
    c.detail = os.str();
    out.push_back(c);
  }
  return out;
}

// The canonical 256x256 budgets and their ratio.
inline std::vector<CheckResult> run_param_checks() {
  std::vector<CheckResult> out;
  models::GeneratorConfig ode_cfg;  // base 64, 2 downsamples, 4 ODE blocks
  models::Generator<float> g(ode_cfg, 1);
  const std::size_t n_ode = core::count_params(g.params());

  models::GeneratorConfig res_cfg;
  res_cfg.bottleneck = models::BottleneckKind::kResnet;  // 9 blocks
  models::Generator<float> r(res_cfg, 1);
  const std::size_t n_res = core::count_params(r.params());

  auto push = [&](const std::string& name, bool pass, std::string detail) {
    out.push_back({name, pass, std::move(detail)});
  };
  push("ode_generator_params", n_ode == 5477379u,
       std::to_string(n_ode) + " (want 5477379)");
  push("resnet_generator_params", n_res == 11378179u,
       std::to_string(n_res) + " (want 11378179)");
  const double ratio = double(n_ode) / double(n_res);
  std::ostringstream os;
  os << ratio << " (want 0.4814 +- 0.0001)";
  push("param_ratio", std::abs(ratio - 0.4814) < 1e-4, os.str());
  return out;
}

}  // namespace odegan::verify
