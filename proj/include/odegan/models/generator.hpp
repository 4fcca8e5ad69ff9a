// SPDX-License-Identifier: Apache-2.0
//
// The translation generator: a conv encoder, a bottleneck of either
// sequential Neural-ODE blocks or plain residual blocks, and a mirrored
// decoder. Dynamics parameters sit on the same tape as everything else, so
// training differentiates straight through the unrolled solver.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "odegan/core/nn.hpp"
#include "odegan/core/ops.hpp"
#include "odegan/core/rng.hpp"
#include "odegan/core/tensor.hpp"
#include "odegan/ode/solvers.hpp"

namespace odegan::models {

using core::ParamTree;
using core::Tensor;

enum class BottleneckKind { kNeuralOde, kResnet };
enum class NormKind { kInstance, kBatch };

struct GeneratorConfig {
  std::size_t base_channels = 64;
  std::size_t n_downsample = 2;
  std::size_t ode_blocks = 4;
  std::size_t convs_per_dynamics = 2;
  ode::SolverConfig solver;
  double t0 = 0.0;
  double t1 = 1.0;
  BottleneckKind bottleneck = BottleneckKind::kNeuralOde;
  std::size_t resnet_blocks = 9;
  NormKind norm = NormKind::kInstance;
  // Autonomous dynamics by default; when true, a constant-t channel is
  // appended to the state before the first dynamics conv.
  bool time_input = false;

  std::size_t bottleneck_channels() const {
    return base_channels << n_downsample;
  }
  std::size_t n_blocks() const {
    return bottleneck == BottleneckKind::kNeuralOde ? ode_blocks
                                                    : resnet_blocks;
  }
};

struct ForwardStats {
  std::size_t dynamics_evals = 0;
  std::size_t solver_steps = 0;
  std::size_t rejected_steps = 0;
};

inline const char* bottleneck_name(BottleneckKind k) {
  return k == BottleneckKind::kNeuralOde ? "ode" : "resnet";
}

inline BottleneckKind bottleneck_from_name(const std::string& s) {
  if (s == "ode") return BottleneckKind::kNeuralOde;
  if (s == "resnet") return BottleneckKind::kResnet;
  throw core::ConfigError("unknown bottleneck '" + s +
                          "' (expected ode|resnet)");
}

inline const char* norm_name(NormKind k) {
  return k == NormKind::kInstance ? "instance" : "batch";
}

inline NormKind norm_from_name(const std::string& s) {
  if (s == "instance") return NormKind::kInstance;
  if (s == "batch") return NormKind::kBatch;
  throw core::ConfigError("unknown norm '" + s +
                          "' (expected instance|batch)");
}

template <class S>
class Generator {
 public:
  Generator(GeneratorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.base_channels < 1 || cfg_.n_blocks() < 1)
      throw core::ConfigError("generator: channels and blocks must be >= 1");
    std::size_t c = cfg_.base_channels;
    add_conv("enc/conv0", 3, c, 7, seed);
    for (std::size_t i = 0; i < cfg_.n_downsample; ++i)
      add_conv("enc/down" + std::to_string(i + 1), c << i, c << (i + 1), 3,
               seed);
    std::size_t bc = cfg_.bottleneck_channels();
    const char* kind = bottleneck_name(cfg_.bottleneck);
    for (std::size_t b = 0; b < cfg_.n_blocks(); ++b)
      for (std::size_t j = 0; j < cfg_.convs_per_dynamics; ++j) {
        std::size_t in = bc;
        if (j == 0 && cfg_.time_input &&
            cfg_.bottleneck == BottleneckKind::kNeuralOde)
          in += 1;
        add_conv(std::string(kind) + "/block" + std::to_string(b) + "/conv" +
                     std::to_string(j),
                 in, bc, 3, seed);
      }
    for (std::size_t i = cfg_.n_downsample; i > 0; --i)
      add_conv("dec/up" + std::to_string(cfg_.n_downsample - i + 1), c << i,
               c << (i - 1), 3, seed);
    add_conv("dec/conv_out", c, 3, 7, seed);
  }

  const GeneratorConfig& config() const { return cfg_; }
  ParamTree<S>& params() { return params_; }
  const ParamTree<S>& params() const { return params_; }

  // Encoder activations in layer order: input, 7x7 block, each downsampling
  // block, then the first bottleneck block.
  std::size_t n_feature_layers() const { return cfg_.n_downsample + 3; }

  Tensor<S> forward(const Tensor<S>& x, ForwardStats* stats = nullptr) const {
    return decode(bottleneck(encode(x), stats));
  }

  Tensor<S> encode(const Tensor<S>& x) const {
    check_input(x);
    Tensor<S> h = core::pad2d(x, 3, core::PadMode::kReflect);
    h = core::relu(norm(conv(h, "enc/conv0", 1)));
    for (std::size_t i = 0; i < cfg_.n_downsample; ++i) {
      h = core::pad2d(h, 1, core::PadMode::kZero);
      h = core::relu(norm(conv(h, "enc/down" + std::to_string(i + 1), 2)));
    }
    return h;
  }

  Tensor<S> bottleneck(const Tensor<S>& h, ForwardStats* stats = nullptr) const {
    Tensor<S> z = h;
    for (std::size_t b = 0; b < cfg_.n_blocks(); ++b) z = run_block(b, z, stats);
    return z;
  }

  Tensor<S> decode(const Tensor<S>& h) const {
    Tensor<S> z = h;
    for (std::size_t i = 0; i < cfg_.n_downsample; ++i) {
      z = core::upsample_nearest(z, 2);
      z = core::pad2d(z, 1, core::PadMode::kZero);
      z = core::relu(norm(conv(z, "dec/up" + std::to_string(i + 1), 1)));
    }
    z = core::pad2d(z, 3, core::PadMode::kReflect);
    return core::tanh_t(conv(z, "dec/conv_out", 1));
  }

  // Activations at the requested taps; tap 0 is the raw input.
  std::vector<Tensor<S>> encoder_features(
      const Tensor<S>& x, const std::vector<std::size_t>& taps) const {
    check_input(x);
    std::size_t n_layers = n_feature_layers();
    for (std::size_t t : taps)
      if (t >= n_layers)
        throw core::ConfigError("encoder_features: tap " + std::to_string(t) +
                                " out of range (layers: " +
                                std::to_string(n_layers) + ")");
    std::vector<Tensor<S>> acts;
    acts.push_back(x);
    Tensor<S> h = core::pad2d(x, 3, core::PadMode::kReflect);
    h = core::relu(norm(conv(h, "enc/conv0", 1)));
    acts.push_back(h);
    for (std::size_t i = 0; i < cfg_.n_downsample; ++i) {
      h = core::pad2d(h, 1, core::PadMode::kZero);
      h = core::relu(norm(conv(h, "enc/down" + std::to_string(i + 1), 2)));
      acts.push_back(h);
    }
    acts.push_back(run_block(0, h, nullptr));
    std::vector<Tensor<S>> out;
    out.reserve(taps.size());
    for (std::size_t t : taps) out.push_back(acts[t]);
    return out;
  }

  std::vector<std::size_t> default_taps() const {
    std::vector<std::size_t> taps(n_feature_layers());
    for (std::size_t i = 0; i < taps.size(); ++i) taps[i] = i;
    return taps;
  }

  // Channel count of each feature layer, for sizing projection heads.
  std::vector<std::size_t> feature_channels() const {
    std::vector<std::size_t> ch{3, cfg_.base_channels};
    for (std::size_t i = 1; i <= cfg_.n_downsample; ++i)
      ch.push_back(cfg_.base_channels << i);
    ch.push_back(cfg_.bottleneck_channels());
    return ch;
  }

  // One dynamics evaluation f(h) (or f(t,h) with the time channel); exposed
  // for FLOP accounting and direct tests.
  Tensor<S> dynamics_eval(std::size_t block, const Tensor<S>& h,
                          std::optional<S> t) const {
    const char* kind = bottleneck_name(cfg_.bottleneck);
    Tensor<S> z = h;
    for (std::size_t j = 0; j < cfg_.convs_per_dynamics; ++j) {
      if (j == 0 && t.has_value()) {
        Tensor<S> tc({h.dim(0), 1, h.dim(2), h.dim(3)}, *t);
        z = core::concat<S>({z, tc}, 1);
      }
      z = core::pad2d(z, 1, core::PadMode::kReflect);
      z = norm(conv(z, std::string(kind) + "/block" + std::to_string(block) +
                           "/conv" + std::to_string(j),
                    1));
      if (j + 1 < cfg_.convs_per_dynamics) z = core::relu(z);
    }
    return z;
  }

 private:
  void check_input(const Tensor<S>& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
      throw core::ShapeError("generator: expected (N,3,H,W), got " +
                             core::shape_str(x.shape()));
    std::size_t div = std::size_t(1) << cfg_.n_downsample;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
      throw core::ConfigError(
          "generator: spatial size " + std::to_string(x.dim(2)) + "x" +
          std::to_string(x.dim(3)) + " not divisible by " +
          std::to_string(div));
  }

  void add_conv(const std::string& path, std::size_t cin, std::size_t cout,
                std::size_t k, std::uint64_t seed) {
    core::Rng rng = core::Rng::derive(seed, path);
    auto w = Tensor<S>::randn(rng, {cout, cin, k, k}, S(0.02));
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

  Tensor<S> norm(const Tensor<S>& x) const {
    return cfg_.norm == NormKind::kInstance ? core::instance_norm(x)
                                            : core::batch_norm(x);
  }

  Tensor<S> run_block(std::size_t block, const Tensor<S>& h,
                      ForwardStats* stats) const {
    if (cfg_.bottleneck == BottleneckKind::kResnet) {
      if (stats) stats->dynamics_evals += 1;
      return core::add(h, dynamics_eval(block, h, std::nullopt));
    }
    ode::OdeProblem<S> problem;
    problem.t0 = static_cast<S>(cfg_.t0);
    problem.t1 = static_cast<S>(cfg_.t1);
    problem.h0 = h;
    problem.dynamics = [this, block](S t, const Tensor<S>& state) {
      return dynamics_eval(block, state,
                           cfg_.time_input ? std::optional<S>(t)
                                           : std::nullopt);
    };
    auto sol = ode::integrate(problem, cfg_.solver);
    if (stats) {
      stats->dynamics_evals += sol.dynamics_evals;
      stats->solver_steps += sol.steps_taken;
      stats->rejected_steps += sol.rejected_steps;
    }
    return sol.h1;
  }

  GeneratorConfig cfg_;
  ParamTree<S> params_;
};

}  // namespace odegan::models
