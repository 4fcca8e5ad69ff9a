// SPDX-License-Identifier: Apache-2.0
//
// Empirical convergence-order measurement for the fixed-step integrators,
// using the analytic oracle dy/dt = -y, y(0)=1 over [0,1].
#pragma once

#include <cmath>

#include "odegan/core/tensor.hpp"
#include "odegan/ode/solvers.hpp"

namespace odegan::verify {

struct OrderMeasurement {
  double error_coarse = 0.0;
  double error_fine = 0.0;
  double order = 0.0;  // log2(error_coarse / error_fine)
};

inline OrderMeasurement measure_order(ode::Method method, double dt = 0.05) {
  core::NoGradGuard ng;
  auto run = [&](double step) {
    ode::OdeProblem<double> problem;
    problem.dynamics = [](double, const core::Tensor<double>& h) {
      return core::mul_scalar(h, -1.0);
    };
    problem.t0 = 0.0;
    problem.t1 = 1.0;
    problem.h0 = core::Tensor<double>::from_vector({1}, {1.0});
    ode::SolverConfig cfg;
    cfg.method = method;
    cfg.fixed_step = step;
    cfg.max_steps = 100000;
    auto sol = ode::integrate_fixed(problem, cfg);
    return std::abs(sol.h1.value()[0] - std::exp(-1.0));
  };
  OrderMeasurement m;
  m.error_coarse = run(dt);
  m.error_fine = run(dt / 2);
  m.order = std::log2(m.error_coarse / m.error_fine);
  return m;
}

}  // namespace odegan::verify
