// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checking for any scalar-valued function of a
// set of tensors. Run at 64-bit: perturbation 1e-5 keeps both truncation and
// roundoff comfortably below the 1e-4 acceptance threshold.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "odegan/core/rng.hpp"
#include "odegan/core/tensor.hpp"

namespace odegan::verify {

struct GradcheckSpec {
  double eps = 1e-5;
  // Per-coordinate pass condition: |analytic - fd| <= atol + rtol * |fd|.
  double rtol = 1e-4;
  double atol = 1e-7;
  // Cap on checked coordinates per input tensor; a fixed-seed subset is
  // drawn when an input is larger. SIZE_MAX checks everything.
  std::size_t max_coords_per_input = std::numeric_limits<std::size_t>::max();
  std::uint64_t seed = 0x9e3779b97f4a7c15ull;
};

struct GradcheckResult {
  bool ok = true;
  double max_rel_err = 0.0;  // |a-n| / max(|a|, |n|, 1)
  double max_abs_err = 0.0;
  std::size_t coords_checked = 0;
  std::string worst;

  explicit operator bool() const { return ok; }
};

// f receives the same tensor handles passed in `inputs` and must rebuild its
// graph on every call, returning a scalar tensor. All inputs are switched to
// requires_grad here.
template <class S, class F>
GradcheckResult gradcheck(F&& f, std::vector<core::Tensor<S>> inputs,
                          const GradcheckSpec& spec = {}) {
  static_assert(std::is_same_v<S, double>,
                "gradcheck is meaningful only at 64-bit precision");
  for (auto& in : inputs) in.set_requires_grad(true);

  core::Tensor<S> loss = f(inputs);
  if (loss.numel() != 1)
    throw core::UsageError("gradcheck: function must return a scalar");
  for (auto& in : inputs) in.zero_grad();
  core::backward(loss);

  std::vector<std::vector<S>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    in.node()->ensure_grad();
    analytic.push_back(in.grad());
  }

  GradcheckResult res;
  auto eval = [&]() -> double {
    core::NoGradGuard ng;
    return static_cast<double>(f(inputs).item());
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& val = inputs[i].value();
    std::vector<std::size_t> coords;
    if (val.size() <= spec.max_coords_per_input) {
      coords.resize(val.size());
      for (std::size_t j = 0; j < val.size(); ++j) coords[j] = j;
    } else {
      core::Rng rng = core::Rng::derive(spec.seed, "gradcheck", i);
      coords = rng.sample_indices(val.size(), spec.max_coords_per_input);
    }
    for (std::size_t j : coords) {
      S saved = val[j];
      val[j] = saved + static_cast<S>(spec.eps);
      double f_plus = eval();
      val[j] = saved - static_cast<S>(spec.eps);
      double f_minus = eval();
      val[j] = saved;

      double fd = (f_plus - f_minus) / (2.0 * spec.eps);
      double an = static_cast<double>(analytic[i][j]);
      double abs_err = std::abs(an - fd);
      double rel_err =
          abs_err / std::max({std::abs(an), std::abs(fd), 1.0});
      res.coords_checked += 1;
      if (abs_err > res.max_abs_err) res.max_abs_err = abs_err;
      if (rel_err > res.max_rel_err) {
        res.max_rel_err = rel_err;
        res.worst = "input " + std::to_string(i) + " @ " + std::to_string(j) +
                    ": analytic=" + std::to_string(an) +
                    ", fd=" + std::to_string(fd);
      }
      if (abs_err > spec.atol + spec.rtol * std::abs(fd)) res.ok = false;
    }
  }
  return res;
}

}  // namespace odegan::verify
