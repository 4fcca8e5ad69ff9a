// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "odegan/core/errors.hpp"
#include "odegan/core/tensor.hpp"

namespace odegan::core {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers keyed by parameter path, plus the shared step
// counter used for bias correction.
template <class S>
struct AdamState {
  std::map<std::string, std::vector<S>> m;
  std::map<std::string, std::vector<S>> v;
  std::uint64_t t = 0;
};

// One Adam update over every trainable entry of `params`, consuming the
// accumulated gradients. Throws NumericError (naming the parameter) if a
// gradient is non-finite; caller decides whether to zero grads afterwards.
template <class S>
void adam_step(ParamTree<S>& params, AdamState<S>& state,
               const AdamConfig& cfg) {
  state.t += 1;
  const S b1 = static_cast<S>(cfg.beta1);
  const S b2 = static_cast<S>(cfg.beta2);
  const S eps = static_cast<S>(cfg.eps);
  const S corr1 =
      S(1) - static_cast<S>(std::pow(cfg.beta1, static_cast<double>(state.t)));
  const S corr2 =
      S(1) - static_cast<S>(std::pow(cfg.beta2, static_cast<double>(state.t)));
  const S step = static_cast<S>(cfg.lr);

  for (auto& [path, p] : params) {
    if (!p.requires_grad()) continue;
    p.node()->ensure_grad();
    auto& g = p.grad();
    for (S gv : g)
      if (!std::isfinite(gv))
        throw NumericError("adam_step: non-finite gradient in '" + path + "'");
    auto& m = state.m[path];
    auto& v = state.v[path];
    if (m.size() != g.size()) m.assign(g.size(), S(0));
    if (v.size() != g.size()) v.assign(g.size(), S(0));
    auto& val = p.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (S(1) - b1) * g[i];
      v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
      S mhat = m[i] / corr1;
      S vhat = v[i] / corr2;
      val[i] -= step * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace odegan::core
