// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "odegan/bench/bench.hpp"
#include "odegan/data/dataset.hpp"

using namespace odegan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("odegan-bench-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Same desk-sized recipe the trainer tests use.
train::TrainConfig tiny_config(std::uint64_t seed = 5) {
  train::TrainConfig c;
  c.epochs = 2;
  c.steps_per_epoch = 2;
  c.batch_size = 2;
  c.seed = seed;
  c.prefetch_batches = 0;
  c.embed_dim = 16;
  c.gen.base_channels = 8;
  c.gen.ode_blocks = 2;
  c.gen.solver.method = ode::Method::kRk4;
  c.gen.solver.fixed_step = 0.5;
  c.disc.base_channels = 8;
  c.disc.n_layers = 2;
  c.weights.n_patches = 8;
  return c;
}

std::vector<core::Tensor<float>> random_images(std::size_t n, std::size_t size,
                                               std::uint64_t seed) {
  std::vector<core::Tensor<float>> imgs;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = core::Rng::derive(seed, "img", i);
    imgs.push_back(
        core::Tensor<float>::uniform(rng, {3, size, size}, -1.0f, 1.0f));
  }
  return imgs;
}

std::vector<core::Tensor<float>> load_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  for (auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<core::Tensor<float>> imgs;
  for (auto& f : files) imgs.push_back(data::load_image<float>(f));
  return imgs;
}

}  // namespace

TEST_CASE("conv flops: the multiply-accumulate count, by hand") {
  // 16x16 output, 8 filters over 3 channels at 7x7:
  // 16*16*8 positions, each 2*3*49 ops plus the bias add.
  CHECK(bench::conv_flops(3, 8, 7, 16, 16) == 256.0 * 8.0 * (2.0 * 3 * 49 + 1));
  CHECK(bench::conv_flops(3, 8, 7, 16, 16) == 604160.0);
  CHECK(bench::conv_flops(16, 32, 3, 4, 4) == 147968.0);
}

TEST_CASE("generator flops: shell and per-evaluation terms match a layer-"
          "by-layer tally, and the solver identity is exact") {
  auto cfg = tiny_config().gen;  // base 8, 2 downsamples, 2 ode blocks
  auto est = bench::generator_flops(cfg, 16, 16);

  // Encoder 604160 + 148480 + 147968, decoder 590848 + 591872 + 602880.
  CHECK(est.shell == 2686208.0);
  // Two 32->32 3x3 convs on the 4x4 bottleneck grid.
  CHECK(est.per_dynamics_eval == 590848.0);

  // rk4 at dt=0.5 over [0,1]: 2 steps x 4 evals x 2 blocks.
  models::Generator<float> gen(cfg, 81);
  core::NoGradGuard ng;
  auto rng = core::Rng::derive(4, "in");
  auto x = core::Tensor<float>::uniform(rng, {1, 3, 16, 16}, -1.0f, 1.0f);
  models::ForwardStats stats;
  gen.forward(x, &stats);
  CHECK(stats.dynamics_evals == 16);
  CHECK(est.at(stats.dynamics_evals) == 12139776.0);

  // The time channel widens only the first dynamics conv.
  auto timed = cfg;
  timed.time_input = true;
  auto est_t = bench::generator_flops(timed, 16, 16);
  CHECK(est_t.shell == est.shell);
  CHECK(est_t.per_dynamics_eval ==
        bench::conv_flops(33, 32, 3, 4, 4) + bench::conv_flops(32, 32, 3, 4, 4));

  // Residual bottleneck: one "evaluation" per block, same identity.
  auto res = cfg;
  res.bottleneck = models::BottleneckKind::kResnet;
  res.resnet_blocks = 3;
  models::Generator<float> rgen(res, 81);
  models::ForwardStats rstats;
  rgen.forward(x, &rstats);
  CHECK(rstats.dynamics_evals == 3);
  auto rest = bench::generator_flops(res, 16, 16);
  CHECK(rest.per_dynamics_eval == est.per_dynamics_eval);
  CHECK(rest.at(rstats.dynamics_evals) == est.shell + 3 * 590848.0);
}

TEST_CASE("proxy features: fixed width, determinism, duplication invariance") {
  auto imgs32 = random_images(4, 32, 9);
  auto st = bench::extract_features(imgs32);
  CHECK(st.dim == 192);
  CHECK(st.mu.size() == 192);
  CHECK(st.sigma.size() == 192 * 192);

  // Pooling makes the width independent of resolution.
  auto st64 = bench::extract_features(random_images(3, 64, 10));
  CHECK(st64.dim == 192);

  // Same images, same statistics, bit for bit.
  auto st2 = bench::extract_features(imgs32);
  CHECK(st2.mu == st.mu);
  CHECK(st2.sigma == st.sigma);

  // Duplicating every sample changes nothing: the fit divides by N, not N-1.
  auto doubled = imgs32;
  doubled.insert(doubled.end(), imgs32.begin(), imgs32.end());
  auto std2 = bench::extract_features(doubled);
  REQUIRE(std2.dim == st.dim);
  double max_dev = 0;
  for (std::size_t i = 0; i < st.mu.size(); ++i)
    max_dev = std::max(max_dev, std::abs(std2.mu[i] - st.mu[i]));
  for (std::size_t i = 0; i < st.sigma.size(); ++i)
    max_dev = std::max(max_dev, std::abs(std2.sigma[i] - st.sigma[i]));
  CHECK(max_dev < 1e-12);

  CHECK_THROWS_AS(bench::extract_features(random_images(1, 32, 9)),
                  core::UsageError);
  std::vector<core::Tensor<float>> flat{
      core::Tensor<float>({3, 32 * 32}, 0.0f),
      core::Tensor<float>({3, 32 * 32}, 0.0f)};
  CHECK_THROWS_AS(bench::extract_features(flat), core::ShapeError);
}

TEST_CASE("frechet distance: coincidence, symmetry, the closed form") {
  // Equal means, identity covariances a unit apart in every coordinate:
  // d = ||mu_a - mu_b||^2 = 2 in two dimensions.
  bench::FeatureStats a, b;
  a.dim = b.dim = 2;
  a.mu = {0.0, 0.0};
  b.mu = {1.0, 1.0};
  a.sigma = {1.0, 0.0, 0.0, 1.0};
  b.sigma = a.sigma;
  CHECK(std::abs(bench::frechet_distance(a, b) - 2.0) < 1e-6);
  CHECK(bench::frechet_distance(a, a) < 1e-6);

  // Non-trivial covariances from actual feature fits.
  auto sa = bench::extract_features(random_images(5, 32, 31));
  auto sb = bench::extract_features(random_images(5, 32, 32));
  double dab = bench::frechet_distance(sa, sb);
  double dba = bench::frechet_distance(sb, sa);
  CHECK(dab >= 0.0);
  CHECK(std::abs(dab - dba) < 1e-8);
  CHECK(bench::frechet_distance(sa, sa) < 1e-6);
  CHECK(bench::frechet_distance(sb, sb) < 1e-6);

  bench::FeatureStats c;
  c.dim = 3;
  c.mu = {0, 0, 0};
  c.sigma.assign(9, 0.0);
  CHECK_THROWS_AS(bench::frechet_distance(a, c), core::ShapeError);
}

TEST_CASE("frechet distance: photo and stylized fixture sets sit apart") {
  auto root = fresh_dir("sep");
  auto layout = data::make_fixtures(root, 4, 51, 32);
  auto photos = load_dir(layout.unpaired_src_dir);
  auto styled = load_dir(layout.unpaired_tgt_dir);
  REQUIRE(photos.size() >= 2);
  REQUIRE(styled.size() >= 2);
  auto sp = bench::extract_features(photos);
  auto ss = bench::extract_features(styled);
  CHECK(bench::frechet_distance(sp, ss) > 1e-3);
  CHECK(bench::frechet_distance(sp, sp) < 1e-6);
}

TEST_CASE("bench: timing, accounting, and analytic flops on a checkpoint") {
  auto root = fresh_dir("gen");
  auto layout = data::make_fixtures(root / "data", 8, 52, 16);
  auto cfg = tiny_config(19);
  train::Trainer<float> t(cfg, layout, root / "run");
  auto ckpt = t.snapshot("final.ck");

  bench::BenchOptions opt;
  opt.image_size = 16;
  opt.n_warm = 1;
  opt.runs_short = 2;
  opt.runs_long = 3;
  auto r = bench::bench_generator<float>(ckpt, opt);

  CHECK(r.params == core::count_params(t.models().gen.params()));
  CHECK(r.avg_time_5 > 0.0);
  CHECK(r.avg_time_50 > 0.0);
  CHECK_FALSE(r.hardware.empty());
  CHECK(r.peak_memory < (std::size_t(8) << 30));
  // Fixed-step solver: every run costs the same 16 evaluations.
  CHECK(r.flops_per_image == 12139776.0);

  CHECK(bench::report_csv_header() ==
        "avg_time_5_s,avg_time_50_s,peak_memory_bytes,params,"
        "flops_per_image,hardware");
  auto row = bench::report_csv_row(r);
  CHECK(row.find("\"" + r.hardware + "\"") != std::string::npos);
  CHECK(row.find(std::to_string(r.params)) != std::string::npos);
  auto table = bench::report_table(r);
  CHECK(table.find("parameters") != std::string::npos);
  CHECK(table.find(r.hardware) != std::string::npos);

  // Not-a-checkpoint and wrong-kind files are refused up front.
  fs::path junk = root / "junk.ck";
  std::ofstream(junk) << "not a checkpoint";
  CHECK_THROWS_AS(bench::bench_generator<float>(junk, opt), core::IoError);
  core::Checkpoint other;
  other.meta["kind"] = "eval";
  core::save_checkpoint(root / "other.ck", other);
  CHECK_THROWS_AS(bench::bench_generator<float>(root / "other.ck", opt),
                  core::IoError);
}
