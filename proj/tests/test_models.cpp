// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "odegan/models/discriminator.hpp"
#include "odegan/models/generator.hpp"
#include "odegan/models/projection.hpp"

using namespace odegan;
using core::Tensor;

namespace {

models::GeneratorConfig small_config(models::BottleneckKind kind =
                                         models::BottleneckKind::kNeuralOde) {
  models::GeneratorConfig cfg;
  cfg.base_channels = 8;
  cfg.ode_blocks = 2;
  cfg.resnet_blocks = 2;
  cfg.bottleneck = kind;
  cfg.solver.method = ode::Method::kRk4;
  cfg.solver.fixed_step = 0.5;
  return cfg;
}

}  // namespace

TEST_CASE("parameter goldens: canonical configs") {
  models::GeneratorConfig ode_cfg;  // defaults: base 64, 4 ODE blocks
  models::Generator<float> g(ode_cfg, 1);
  CHECK(core::count_params(g.params()) == 5477379u);

  models::GeneratorConfig res_cfg;
  res_cfg.bottleneck = models::BottleneckKind::kResnet;  // 9 blocks
  models::Generator<float> r(res_cfg, 1);
  CHECK(core::count_params(r.params()) == 11378179u);

  double ratio = 5477379.0 / 11378179.0;
  CHECK(std::abs(ratio - 0.4814) < 1e-4);

  // Component-level goldens.
  auto numel_of = [&](const models::Generator<float>& gen,
                      const std::string& base) {
    return gen.params().at(base + "/w").numel() +
           gen.params().at(base + "/b").numel();
  };
  CHECK(numel_of(g, "enc/conv0") == 9472u);
  CHECK(numel_of(g, "enc/down1") == 73856u);
  CHECK(numel_of(g, "enc/down2") == 295168u);
  CHECK(numel_of(g, "dec/up1") == 295040u);
  CHECK(numel_of(g, "dec/up2") == 73792u);
  CHECK(numel_of(g, "dec/conv_out") == 9411u);
  CHECK(numel_of(g, "ode/block0/conv0") == 590080u);
  CHECK(numel_of(r, "resnet/block4/conv1") == 590080u);
}

TEST_CASE("generator: determinism of initialization") {
  auto cfg = small_config();
  models::Generator<float> a(cfg, 99), b(cfg, 99), c(cfg, 100);
  CHECK(core::content_hash(a.params()) == core::content_hash(b.params()));
  CHECK(core::content_hash(a.params()) != core::content_hash(c.params()));
}

TEST_CASE("generator: forward shape, range, input validation") {
  auto cfg = small_config();
  models::Generator<float> g(cfg, 7);
  core::Rng rng(3);
  auto x = Tensor<float>::uniform(rng, {2, 3, 16, 16}, -1.f, 1.f);
  models::ForwardStats stats;
  auto y = g.forward(x, &stats);
  CHECK(y.shape() == x.shape());
  for (float v : y.value()) {
    CHECK(v >= -1.f);
    CHECK(v <= 1.f);
  }
  CHECK(stats.dynamics_evals == 2u * 2u * 4u);  // 2 blocks x 2 steps x rk4

  CHECK_THROWS_AS(g.forward(Tensor<float>({1, 3, 10, 10}, 0.f)),
                  core::ConfigError);
  CHECK_THROWS_AS(g.forward(Tensor<float>({1, 1, 16, 16}, 0.f)),
                  core::ShapeError);
}

TEST_CASE("generator: zero dynamics is the identity bottleneck") {
  for (auto method : {ode::Method::kEuler, ode::Method::kRk4,
                      ode::Method::kDopri5}) {
    auto cfg = small_config();
    cfg.solver.method = method;
    models::Generator<float> g(cfg, 11);
    for (auto& [path, t] : g.params())
      if (path.rfind("ode/", 0) == 0)
        std::fill(t.value().begin(), t.value().end(), 0.f);
    core::Rng rng(5);
    auto x = Tensor<float>::uniform(rng, {1, 3, 16, 16}, -1.f, 1.f);
    auto full = g.forward(x);
    auto bypass = g.decode(g.encode(x));
    REQUIRE(full.shape() == bypass.shape());
    for (std::size_t i = 0; i < full.numel(); ++i)
      CHECK(full.value()[i] == bypass.value()[i]);
  }
}

TEST_CASE("generator: every parameter receives gradient") {
  auto cfg = small_config();
  models::Generator<float> g(cfg, 13);
  core::Rng rng(17);
  auto x = Tensor<float>::uniform(rng, {2, 3, 16, 16}, -1.f, 1.f);
  auto y = g.forward(x);
  auto loss = core::mean_all(core::square(core::sub(y, x)));
  core::backward(loss);
  for (auto& [path, t] : g.params()) {
    t.node()->ensure_grad();
    bool any = false;
    for (float v : t.grad()) any = any || v != 0.f;
    CHECK_MESSAGE(any, "zero gradient at ", path);
  }
}

TEST_CASE("generator: encoder features and taps") {
  auto cfg = small_config();
  models::Generator<float> g(cfg, 19);
  CHECK(g.n_feature_layers() == 5u);
  CHECK(g.default_taps() == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(g.feature_channels() == std::vector<std::size_t>{3, 8, 16, 32, 32});

  core::Rng rng(23);
  auto x = Tensor<float>::uniform(rng, {1, 3, 16, 16}, -1.f, 1.f);
  auto feats = g.encoder_features(x, g.default_taps());
  REQUIRE(feats.size() == 5u);
  CHECK(feats[0].value() == x.value());  // identity tap
  CHECK(feats[1].shape() == core::Shape{1, 8, 16, 16});
  CHECK(feats[2].shape() == core::Shape{1, 16, 8, 8});
  CHECK(feats[3].shape() == core::Shape{1, 32, 4, 4});
  CHECK(feats[4].shape() == core::Shape{1, 32, 4, 4});
  CHECK_THROWS_AS(g.encoder_features(x, {5}), core::ConfigError);
}

TEST_CASE("generator: solver consistency rk4 vs dopri5") {
  auto cfg = small_config();
  cfg.solver.method = ode::Method::kRk4;
  cfg.solver.fixed_step = 0.1;
  models::Generator<float> g(cfg, 29);
  core::Rng rng(31);
  auto x = Tensor<float>::uniform(rng, {1, 3, 16, 16}, -1.f, 1.f);
  core::NoGradGuard ng;
  auto y_rk4 = g.forward(x);

  models::Generator<float> g2(cfg, 29);
  g2.params() = g.params();
  // Same weights, adaptive solver.
  auto cfg2 = cfg;
  cfg2.solver.method = ode::Method::kDopri5;
  cfg2.solver.rtol = 1e-5;
  cfg2.solver.atol = 1e-7;
  models::Generator<float> g3(cfg2, 29);
  for (auto& [path, t] : g3.params()) t.value() = g.params().at(path).value();
  auto y_dp = g3.forward(x);

  double diff = 0;
  for (std::size_t i = 0; i < y_rk4.numel(); ++i)
    diff += std::abs(double(y_rk4.value()[i]) - double(y_dp.value()[i]));
  diff /= double(y_rk4.numel());
  CHECK(diff < 1e-2);
}

TEST_CASE("generator: optional time input variant") {
  auto cfg = small_config();
  cfg.time_input = true;
  models::Generator<float> g(cfg, 37);
  // First dynamics conv takes one extra channel.
  CHECK(g.params().at("ode/block0/conv0/w").shape() ==
        core::Shape{32, 33, 3, 3});
  core::Rng rng(41);
  auto x = Tensor<float>::uniform(rng, {1, 3, 16, 16}, -1.f, 1.f);
  auto y = g.forward(x);
  CHECK(y.shape() == x.shape());
}

TEST_CASE("discriminator: channel contract and patch-map geometry") {
  models::DiscriminatorConfig dc;
  dc.in_channels = 6;
  models::PatchDiscriminator<float> dp(dc, 43);
  core::Rng rng(47);
  auto pair = Tensor<float>::uniform(rng, {1, 6, 64, 64}, -1.f, 1.f);
  auto logits = dp.forward(pair);
  CHECK(logits.dim(1) == 1u);
  CHECK_THROWS_AS(dp.forward(Tensor<float>({1, 3, 64, 64}, 0.f)),
                  core::ShapeError);

  models::DiscriminatorConfig du;  // defaults: 3-channel, 3 strided layers
  models::PatchDiscriminator<float> d(du, 53);
  auto img = Tensor<float>::uniform(rng, {1, 3, 256, 256}, -1.f, 1.f);
  auto map256 = d.forward(img);
  CHECK(map256.shape() == core::Shape{1, 1, 30, 30});

  // Fully convolutional: doubling the input roughly doubles the map
  // (exact H/8 - 2 geometry, so edges cost two rows).
  auto img512 = Tensor<float>::uniform(rng, {1, 3, 512, 512}, -1.f, 1.f);
  auto map512 = d.forward(img512);
  CHECK(map512.dim(2) == 62u);
  CHECK(std::abs(double(map512.dim(2)) / double(map256.dim(2)) - 2.0) < 0.1);
}

TEST_CASE("projection head: unit norm, alignment, index reuse") {
  models::GeneratorConfig cfg = small_config();
  models::Generator<float> g(cfg, 59);
  models::ProjectionHead<float> head(g.feature_channels(), 64, 61);

  core::Rng rng(67);
  auto x = Tensor<float>::uniform(rng, {2, 3, 16, 16}, -1.f, 1.f);
  auto feats = g.encoder_features(x, g.default_taps());

  core::Rng sample_rng = core::Rng::derive(71, "patches");
  auto emb = models::sample_patches(head, feats, 8, sample_rng);
  REQUIRE(emb.per_tap.size() == 5u);
  CHECK(emb.n_images == 2u);
  for (const auto& e : emb.per_tap) {
    REQUIRE(e.shape() == core::Shape{16, 64});
    for (std::size_t r = 0; r < e.dim(0); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < e.dim(1); ++c)
        s += double(e.value()[r * 64 + c]) * double(e.value()[r * 64 + c]);
      CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-5);
    }
  }

  // Reusing the index set on the same features reproduces embeddings.
  core::Rng other_rng(999);
  auto emb2 = models::sample_patches(head, feats, 8, other_rng, &emb.indices);
  for (std::size_t l = 0; l < 5; ++l)
    CHECK(emb.per_tap[l].value() == emb2.per_tap[l].value());

  // Distinct seeds give distinct index sets (high probability).
  core::Rng ra = core::Rng::derive(1, "a"), rb = core::Rng::derive(1, "b");
  auto ea = models::sample_patches(head, feats, 8, ra);
  auto eb = models::sample_patches(head, feats, 8, rb);
  bool any_diff = false;
  for (std::size_t l = 0; l < 5; ++l)
    any_diff = any_diff || ea.indices[l] != eb.indices[l];
  CHECK(any_diff);

  // Too many patches for the coarsest tap (4x4 = 16 positions).
  core::Rng rc(5);
  CHECK_THROWS_AS(models::sample_patches(head, feats, 17, rc),
                  core::UsageError);

  CHECK_THROWS_AS(head.embed(9, Tensor<float>({4, 3}, 0.f)),
                  core::ConfigError);
  CHECK_THROWS_AS(head.embed(0, Tensor<float>({4, 7}, 0.f)),
                  core::ShapeError);
}
