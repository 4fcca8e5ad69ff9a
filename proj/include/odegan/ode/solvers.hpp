// SPDX-License-Identifier: Apache-2.0
//
// Explicit ODE integrators over tensor states. Every accepted stage
// evaluation lands on the gradient tape, so d(h1)/d(h0, params) comes out of
// an ordinary backward pass (discretize-then-optimize). Step-size control is
// plain control flow and is deliberately not differentiated.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "odegan/core/errors.hpp"
#include "odegan/core/tensor.hpp"

namespace odegan::ode {

using core::Tensor;

template <class S>
struct OdeProblem {
  std::function<Tensor<S>(S, const Tensor<S>&)> dynamics;
  S t0 = S(0);
  S t1 = S(1);
  Tensor<S> h0;
};

enum class Method { kEuler, kRk4, kDopri5 };

struct SolverConfig {
  Method method = Method::kDopri5;
  double fixed_step = 0.1;
  double rtol = 1e-3;
  double atol = 1e-4;
  std::size_t max_steps = 1000;
  double initial_step = 0.0;  // <= 0 selects (t1 - t0) / 100
};

template <class S>
struct OdeSolution {
  Tensor<S> h1;
  std::size_t steps_taken = 0;
  std::size_t rejected_steps = 0;
  double max_error_estimate = 0.0;
  std::size_t dynamics_evals = 0;
};

class InvalidDynamicsError : public core::ShapeError {
 public:
  using core::ShapeError::ShapeError;
};

class DivergenceError : public core::NumericError {
 public:
  using core::NumericError::NumericError;
};

template <class S>
class NonConvergenceError : public core::NumericError {
 public:
  NonConvergenceError(std::string what, OdeSolution<S> partial)
      : core::NumericError(std::move(what)), partial_(std::move(partial)) {}
  const OdeSolution<S>& partial() const { return partial_; }

 private:
  OdeSolution<S> partial_;
};

namespace detail {

template <class S>
Tensor<S> eval_dynamics(const OdeProblem<S>& problem, S t,
                        const Tensor<S>& h) {
  Tensor<S> k = problem.dynamics(t, h);
  if (!k.defined() || k.shape() != h.shape())
    throw InvalidDynamicsError(
        "dynamics returned shape " +
        (k.defined() ? core::shape_str(k.shape()) : std::string("<none>")) +
        ", state is " + core::shape_str(h.shape()));
  return k;
}

// out = base + dt * sum_i coeffs[i] * ks[i], as a single tape node.
template <class S>
Tensor<S> stage_combine(const Tensor<S>& base, S dt,
                        const std::vector<S>& coeffs,
                        const std::vector<Tensor<S>>& ks) {
  bool track = core::grad_mode() && base.requires_grad();
  for (const auto& k : ks) track = track || (core::grad_mode() && k.requires_grad());
  std::vector<std::shared_ptr<core::Node<S>>> parents;
  if (track) {
    parents.push_back(base.node());
    for (const auto& k : ks) parents.push_back(k.node());
  }
  Tensor<S> out = Tensor<S>::make(base.shape(), track, std::move(parents));
  auto& yv = out.value();
  yv = base.value();
  for (std::size_t s = 0; s < ks.size(); ++s) {
    S w = dt * coeffs[s];
    if (w == S(0)) continue;
    const auto& kv = ks[s].value();
    for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += w * kv[i];
  }
  if (track) {
    out.node()->backward = [dt, coeffs](core::Node<S>& self) {
      core::Node<S>* bn = self.parents[0].get();
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] += self.grad[i];
      }
      for (std::size_t s = 1; s < self.parents.size(); ++s) {
        core::Node<S>* kn = self.parents[s].get();
        if (!kn->requires_grad) continue;
        kn->ensure_grad();
        S w = dt * coeffs[s - 1];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          kn->grad[i] += self.grad[i] * w;
      }
    };
  }
  return out;
}

template <class S>
void check_finite_state(const Tensor<S>& h, S t) {
  if (!core::all_finite(h))
    throw DivergenceError("state became non-finite at t=" + std::to_string(t));
}

}  // namespace detail

template <class S>
Tensor<S> euler_step(const OdeProblem<S>& problem, S t, const Tensor<S>& h,
                     S dt) {
  if (!(dt > S(0))) throw core::UsageError("euler_step: dt must be positive");
  Tensor<S> k = detail::eval_dynamics(problem, t, h);
  return detail::stage_combine(h, dt, {S(1)}, {k});
}

template <class S>
Tensor<S> rk4_step(const OdeProblem<S>& problem, S t, const Tensor<S>& h,
                   S dt) {
  if (!(dt > S(0))) throw core::UsageError("rk4_step: dt must be positive");
  S half = dt / S(2);
  Tensor<S> k1 = detail::eval_dynamics(problem, t, h);
  Tensor<S> k2 = detail::eval_dynamics(
      problem, t + half, detail::stage_combine(h, half, {S(1)}, {k1}));
  Tensor<S> k3 = detail::eval_dynamics(
      problem, t + half, detail::stage_combine(h, half, {S(1)}, {k2}));
  Tensor<S> k4 = detail::eval_dynamics(
      problem, t + dt, detail::stage_combine(h, dt, {S(1)}, {k3}));
  return detail::stage_combine(
      h, dt, {S(1) / S(6), S(2) / S(6), S(2) / S(6), S(1) / S(6)},
      {k1, k2, k3, k4});
}

template <class S>
OdeSolution<S> integrate_fixed(const OdeProblem<S>& problem,
                               const SolverConfig& config) {
  if (config.method != Method::kEuler && config.method != Method::kRk4)
    throw core::UsageError("integrate_fixed: method must be Euler or RK4");
  if (!(config.fixed_step > 0))
    throw core::UsageError("integrate_fixed: fixed_step must be positive");
  if (!(problem.t1 > problem.t0))
    throw core::UsageError("integrate: t1 must exceed t0");
  if (!problem.h0.defined())
    throw core::UsageError("integrate: initial state is undefined");

  S span = problem.t1 - problem.t0;
  S dt = static_cast<S>(config.fixed_step);
  auto n_steps = static_cast<std::size_t>(
      std::ceil(static_cast<double>(span) / config.fixed_step - 1e-9));
  n_steps = std::max<std::size_t>(n_steps, 1);
  if (n_steps > config.max_steps) {
    OdeSolution<S> partial;
    partial.h1 = problem.h0;
    throw NonConvergenceError<S>(
        "integrate_fixed: " + std::to_string(n_steps) +
            " steps required, max_steps=" + std::to_string(config.max_steps),
        std::move(partial));
  }

  OdeSolution<S> sol;
  Tensor<S> h = problem.h0;
  for (std::size_t k = 0; k < n_steps; ++k) {
    S t = problem.t0 + static_cast<S>(k) * dt;
    S step = std::min(dt, problem.t1 - t);
    h = config.method == Method::kEuler ? euler_step(problem, t, h, step)
                                        : rk4_step(problem, t, h, step);
    detail::check_finite_state(h, t + step);
    sol.steps_taken += 1;
    sol.dynamics_evals += config.method == Method::kEuler ? 1 : 4;
  }
  sol.h1 = h;
  return sol;
}

// Dormand–Prince 5(4) with the first-same-as-last optimization. Stage values
// of accepted steps stay on the tape; rejected attempts become dead nodes and
// contribute nothing to gradients.
template <class S>
OdeSolution<S> dopri5_integrate(const OdeProblem<S>& problem,
                                const SolverConfig& config) {
  if (config.method != Method::kDopri5)
    throw core::UsageError("dopri5_integrate: config.method must be Dopri5");
  if (!(config.rtol > 0) || !(config.atol > 0))
    throw core::UsageError("dopri5_integrate: tolerances must be positive");
  if (!(problem.t1 > problem.t0))
    throw core::UsageError("integrate: t1 must exceed t0");
  if (!problem.h0.defined())
    throw core::UsageError("integrate: initial state is undefined");

  // Butcher tableau (Dormand & Prince 1980).
  static const S a2[] = {S(1) / S(5)};
  static const S a3[] = {S(3) / S(40), S(9) / S(40)};
  static const S a4[] = {S(44) / S(45), S(-56) / S(15), S(32) / S(9)};
  static const S a5[] = {S(19372) / S(6561), S(-25360) / S(2187),
                         S(64448) / S(6561), S(-212) / S(729)};
  static const S a6[] = {S(9017) / S(3168), S(-355) / S(33),
                         S(46732) / S(5247), S(49) / S(176),
                         S(-5103) / S(18656)};
  static const S b5[] = {S(35) / S(384),     S(0),          S(500) / S(1113),
                         S(125) / S(192),    S(-2187) / S(6784),
                         S(11) / S(84)};
  static const S c[] = {S(0),           S(1) / S(5), S(3) / S(10),
                        S(4) / S(5),    S(8) / S(9), S(1)};
  // b5 - b4 per stage (k7 is the FSAL evaluation at the new point).
  static const double e[] = {71.0 / 57600.0,      0.0,
                             -71.0 / 16695.0,     71.0 / 1920.0,
                             -17253.0 / 339200.0, 22.0 / 525.0,
                             -1.0 / 40.0};

  OdeSolution<S> sol;
  Tensor<S> h = problem.h0;
  S t = problem.t0;
  double span = static_cast<double>(problem.t1 - problem.t0);
  double dt = config.initial_step > 0 ? config.initial_step : span / 100.0;
  dt = std::min(dt, span);
  S t_end_guard = static_cast<S>(
      1e3 * std::numeric_limits<S>::epsilon() *
      std::max<S>(S(1), std::abs(problem.t1)));

  Tensor<S> k1 = detail::eval_dynamics(problem, t, h);
  sol.dynamics_evals += 1;
  std::size_t attempts = 0;

  while (t < problem.t1 - t_end_guard) {
    if (attempts >= config.max_steps) {
      sol.h1 = h;
      throw NonConvergenceError<S>(
          "dopri5_integrate: max_steps=" + std::to_string(config.max_steps) +
              " exhausted at t=" + std::to_string(static_cast<double>(t)),
          sol);
    }
    ++attempts;
    if (static_cast<double>(t) + dt > static_cast<double>(problem.t1))
      dt = static_cast<double>(problem.t1) - static_cast<double>(t);
    S sdt = static_cast<S>(dt);

    Tensor<S> k2 = detail::eval_dynamics(
        problem, t + c[1] * sdt,
        detail::stage_combine(h, sdt, {a2[0]}, {k1}));
    Tensor<S> k3 = detail::eval_dynamics(
        problem, t + c[2] * sdt,
        detail::stage_combine(h, sdt, {a3[0], a3[1]}, {k1, k2}));
    Tensor<S> k4 = detail::eval_dynamics(
        problem, t + c[3] * sdt,
        detail::stage_combine(h, sdt, {a4[0], a4[1], a4[2]}, {k1, k2, k3}));
    Tensor<S> k5 = detail::eval_dynamics(
        problem, t + c[4] * sdt,
        detail::stage_combine(h, sdt, {a5[0], a5[1], a5[2], a5[3]},
                              {k1, k2, k3, k4}));
    Tensor<S> k6 = detail::eval_dynamics(
        problem, t + c[5] * sdt,
        detail::stage_combine(h, sdt, {a6[0], a6[1], a6[2], a6[3], a6[4]},
                              {k1, k2, k3, k4, k5}));
    Tensor<S> h_new = detail::stage_combine(
        h, sdt, {b5[0], b5[1], b5[2], b5[3], b5[4], b5[5]},
        {k1, k2, k3, k4, k5, k6});
    Tensor<S> k7 = detail::eval_dynamics(problem, t + sdt, h_new);
    sol.dynamics_evals += 6;

    // Embedded error estimate in plain arithmetic — control flow only.
    const std::vector<S>* kv[7] = {&k1.value(), &k2.value(), &k3.value(),
                                   &k4.value(), &k5.value(), &k6.value(),
                                   &k7.value()};
    const auto& hv = h.value();
    const auto& hnv = h_new.value();
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < hv.size(); ++i) {
      double err = 0.0;
      for (int s = 0; s < 7; ++s)
        err += e[s] * static_cast<double>((*kv[s])[i]);
      err *= dt;
      double scale =
          config.atol +
          config.rtol * std::max(std::abs(static_cast<double>(hv[i])),
                                 std::abs(static_cast<double>(hnv[i])));
      double q = err / scale;
      sum_sq += q * q;
    }
    double norm = std::sqrt(sum_sq / static_cast<double>(hv.size()));
    if (!std::isfinite(norm))
      throw DivergenceError("dopri5_integrate: non-finite error estimate at t=" +
                            std::to_string(static_cast<double>(t)));

    if (norm <= 1.0) {
      detail::check_finite_state(h_new, t + sdt);
      t = t + sdt;
      h = h_new;
      k1 = k7;  // first-same-as-last
      sol.steps_taken += 1;
      sol.max_error_estimate = std::max(sol.max_error_estimate, norm);
    } else {
      sol.rejected_steps += 1;
    }
    double factor =
        norm > 0.0 ? 0.9 * std::pow(norm, -0.2) : 5.0;
    dt *= std::clamp(factor, 0.2, 5.0);
  }
  sol.h1 = h;
  return sol;
}

template <class S>
OdeSolution<S> integrate(const OdeProblem<S>& problem,
                         const SolverConfig& config) {
  return config.method == Method::kDopri5 ? dopri5_integrate(problem, config)
                                          : integrate_fixed(problem, config);
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kEuler: return "euler";
    case Method::kRk4: return "rk4";
    case Method::kDopri5: return "dopri5";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  if (s == "euler") return Method::kEuler;
  if (s == "rk4") return Method::kRk4;
  if (s == "dopri5") return Method::kDopri5;
  throw core::ConfigError("unknown solver method '" + s +
                          "' (expected euler|rk4|dopri5)");
}

}  // namespace odegan::ode
