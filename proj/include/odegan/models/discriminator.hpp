// SPDX-License-Identifier: Apache-2.0
//
// PatchGAN discriminator: a strided conv stack emitting a spatial map of
// per-patch real/fake logits. The conditional discriminator consumes a
// channel-concatenated (image, condition) pair.
#pragma once

#include <cstddef>
#include <string>

#include "odegan/core/nn.hpp"
#include "odegan/core/ops.hpp"
#include "odegan/core/rng.hpp"
#include "odegan/core/tensor.hpp"
#include "odegan/models/generator.hpp"

namespace odegan::models {

struct DiscriminatorConfig {
  std::size_t in_channels = 3;
  std::size_t base_channels = 64;
  std::size_t n_layers = 3;  // stride-2 stages; 3 gives the 70x70 stack
  NormKind norm = NormKind::kInstance;
};

template <class S>
class PatchDiscriminator {
 public:
  PatchDiscriminator(DiscriminatorConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)) {
    if (cfg_.n_layers < 1)
      throw core::ConfigError("discriminator: n_layers must be >= 1");
    std::size_t cin = cfg_.in_channels;
    std::size_t cout = cfg_.base_channels;
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      add_conv("layer" + std::to_string(i), cin, cout, seed);
      cin = cout;
      cout = std::min<std::size_t>(cout * 2, cfg_.base_channels * 8);
    }
    add_conv("penultimate", cin, cout, seed);
    add_conv("logit", cout, 1, seed);
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  ParamTree<S>& params() { return params_; }
  const ParamTree<S>& params() const { return params_; }

  Tensor<S> forward(const Tensor<S>& x) const {
    if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels)
      throw core::ShapeError(
          "discriminator: expected (N," + std::to_string(cfg_.in_channels) +
          ",H,W), got " + core::shape_str(x.shape()));
    Tensor<S> h = x;
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      h = core::pad2d(h, 1, core::PadMode::kZero);
      h = conv(h, "layer" + std::to_string(i), 2);
      if (i > 0)
        h = cfg_.norm == NormKind::kInstance ? core::instance_norm(h)
                                             : core::batch_norm(h);
      h = core::leaky_relu(h, S(0.2));
    }
    h = core::pad2d(h, 1, core::PadMode::kZero);
    h = conv(h, "penultimate", 1);
    h = cfg_.norm == NormKind::kInstance ? core::instance_norm(h)
                                         : core::batch_norm(h);
    h = core::leaky_relu(h, S(0.2));
    h = core::pad2d(h, 1, core::PadMode::kZero);
    return conv(h, "logit", 1);
  }

 private:
  void add_conv(const std::string& path, std::size_t cin, std::size_t cout,
                std::uint64_t seed) {
    core::Rng rng = core::Rng::derive(seed, path);
    auto w = Tensor<S>::randn(rng, {cout, cin, 4, 4}, S(0.02));
    w.set_requires_grad(true);
    auto b = Tensor<S>({cout}, S(0));
    b.set_requires_grad(true);
    params_.emplace(path + "/w", std::move(w));
    params_.emplace(path + "/b", std::move(b));
  }

  Tensor<S> conv(const Tensor<S>& x, const std::string& path,
                 std::size_t stride) const {
    return core::conv2d(x, params_.at(path + "/w"), params_.at(path + "/b"),
                        stride);
  }

  DiscriminatorConfig cfg_;
  ParamTree<S> params_;
};

}  // namespace odegan::models
