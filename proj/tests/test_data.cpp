// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "odegan/core/ops.hpp"
#include "odegan/data/dataset.hpp"

using namespace odegan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("odegan-data-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

data::Image solid(std::size_t size, std::uint8_t r, std::uint8_t g,
                  std::uint8_t b) {
  data::Image img;
  img.width = img.height = size;
  img.pixels.resize(size * size * 3);
  for (std::size_t i = 0; i < size * size; ++i) {
    img.pixels[i * 3 + 0] = r;
    img.pixels[i * 3 + 1] = g;
    img.pixels[i * 3 + 2] = b;
  }
  return img;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("load_image: affine map endpoints and round trip") {
  auto dir = fresh_dir("img");
  data::Image img = solid(1, 255, 0, 128);
  data::save_png(dir / "px.png", img);
  auto t = data::load_image<float>(dir / "px.png");
  REQUIRE(t.shape() == core::Shape{3, 1, 1});
  CHECK(t.value()[0] == doctest::Approx(1.0));
  CHECK(t.value()[1] == doctest::Approx(-1.0));
  CHECK(t.value()[2] == doctest::Approx(128.0 / 127.5 - 1.0));  // 0.00392...

  data::save_png(dir / "white.png", solid(1, 255, 255, 255));
  auto wt = data::load_image<float>(dir / "white.png");
  for (float v : wt.value()) CHECK(v == 1.0f);

  // Random image survives save -> load -> tensor -> image byte-exactly.
  core::Rng rng(4);
  data::Image noisy = solid(9, 0, 0, 0);
  for (auto& v : noisy.pixels) v = std::uint8_t(rng.below(256));
  data::save_png(dir / "noisy.png", noisy);
  auto nt = data::load_image<float>(dir / "noisy.png");
  auto back = data::tensor_to_image(nt);
  CHECK(back.pixels == noisy.pixels);
}

TEST_CASE("scan_and_pair: matching, orphans, formats") {
  auto root = fresh_dir("scan");
  data::DatasetLayout lay{root / "ps", root / "pt", root / "us", root / "ut",
                          16};
  for (const auto& d : {lay.pseudo_src_dir, lay.pseudo_tgt_dir,
                        lay.unpaired_src_dir, lay.unpaired_tgt_dir})
    fs::create_directories(d);
  auto img = solid(4, 10, 20, 30);
  for (const char* n : {"a.png", "b.png"}) {
    data::save_png(lay.pseudo_src_dir / n, img);
    data::save_png(lay.pseudo_tgt_dir / n, img);
  }
  data::save_png(lay.unpaired_src_dir / "u.png", img);
  data::save_png(lay.unpaired_tgt_dir / "v.png", img);

  auto m = data::scan_and_pair(lay);
  REQUIRE(m.pairs.size() == 2);
  CHECK(m.pairs[0].id == "a");
  CHECK(m.pairs[1].id == "b");
  CHECK(m.unpaired_src.size() == 1);
  CHECK(m.unpaired_tgt.size() == 1);

  // Manifest cache round-trips exactly.
  data::save_manifest(m, root / "manifest.tsv");
  CHECK(data::load_manifest(root / "manifest.tsv") == m);

  fs::remove(lay.pseudo_tgt_dir / "b.png");
  try {
    data::scan_and_pair(lay);
    FAIL("expected pairing error");
  } catch (const core::ConfigError& e) {
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  data::save_png(lay.pseudo_tgt_dir / "b.png", img);

  std::ofstream(lay.unpaired_src_dir / "bad.jpg") << "nope";
  CHECK_THROWS_AS(data::scan_and_pair(lay), core::IoError);
  fs::remove(lay.unpaired_src_dir / "bad.jpg");

  fs::remove(lay.unpaired_tgt_dir / "v.png");
  CHECK_THROWS_AS(data::scan_and_pair(lay), core::ConfigError);
}

TEST_CASE("resize_bilinear: identity, constancy, antialias sanity") {
  core::Rng rng(7);
  auto img = core::Tensor<float>::uniform(rng, {3, 12, 20}, -1.f, 1.f);
  auto same = data::resize_bilinear(img, 12, 20);
  CHECK(same.value() == img.value());

  auto up = data::resize_bilinear(img, 24, 40);
  CHECK(up.shape() == core::Shape{3, 24, 40});
  auto down = data::resize_bilinear(img, 6, 10);
  CHECK(down.shape() == core::Shape{3, 6, 10});

  core::Tensor<float> flat({3, 16, 16}, 0.25f);
  auto shrunk = data::resize_bilinear(flat, 7, 5);
  for (float v : shrunk.value())
    CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

  // A +-1 checkerboard must average toward zero when halved with
  // antialiasing instead of collapsing onto one phase.
  core::Tensor<float> check({3, 16, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        check.value()[(c * 16 + y) * 16 + x] = ((x + y) % 2 == 0) ? 1.f : -1.f;
  double mean_abs = 0;
  auto half = data::resize_bilinear(check, 8, 8);
  for (float v : half.value()) mean_abs += std::abs(v);
  mean_abs /= double(half.numel());
  CHECK(mean_abs < 0.5);
}

TEST_CASE("preprocess_pair: shared transform, determinism, shapes") {
  core::Rng seed_rng(11);
  auto x = core::Tensor<float>::uniform(seed_rng, {3, 40, 64}, -1.f, 1.f);

  core::Rng r1(3);
  auto p1 = data::preprocess_pair(x, x, 32, r1);
  CHECK(p1.x.shape() == core::Shape{3, 32, 32});
  CHECK(p1.y.shape() == core::Shape{3, 32, 32});
  CHECK(p1.x.value() == p1.y.value());  // identical inputs, shared transform

  core::Rng r2(3);
  auto p2 = data::preprocess_pair(x, x, 32, r2);
  CHECK(p2.oy == p1.oy);
  CHECK(p2.ox == p1.ox);
  CHECK(p2.flipped == p1.flipped);
  CHECK(p2.x.value() == p1.x.value());

  for (float v : p1.x.value()) {
    CHECK(v >= -1.f);
    CHECK(v <= 1.f);
  }

  auto y_bad = core::Tensor<float>({3, 40, 32}, 0.f);
  core::Rng r3(5);
  CHECK_THROWS_AS(data::preprocess_pair(x, y_bad, 32, r3), core::ShapeError);

  // Disabled augmentation pins the center crop and no flip.
  core::Rng r4(9);
  auto fixed = data::preprocess_pair(x, x, 32, r4, {false, false});
  CHECK(fixed.oy == (32 - 32) / 2);
  CHECK(fixed.flipped == false);
}

TEST_CASE("fixtures: counts, determinism, stylizer endpoints") {
  auto d1 = fresh_dir("fix1");
  auto d2 = fresh_dir("fix2");
  auto lay1 = data::make_fixtures(d1, 16, 99, 32);
  auto lay2 = data::make_fixtures(d2, 16, 99, 32);

  auto count = [](const fs::path& d) {
    std::size_t n = 0;
    for (auto& e : fs::directory_iterator(d)) (void)e, ++n;
    return n;
  };
  CHECK(count(lay1.pseudo_src_dir) == 16);
  CHECK(count(lay1.pseudo_tgt_dir) == 16);
  CHECK(count(lay1.unpaired_src_dir) == 8);
  CHECK(count(lay1.unpaired_tgt_dir) == 8);

  // Bit-identical across runs.
  CHECK(file_bytes(lay1.pseudo_src_dir / "fix_000.png") ==
        file_bytes(lay2.pseudo_src_dir / "fix_000.png"));
  CHECK(file_bytes(lay1.pseudo_tgt_dir / "fix_007.png") ==
        file_bytes(lay2.pseudo_tgt_dir / "fix_007.png"));
  CHECK(file_bytes(lay1.unpaired_tgt_dir / "v_003.png") ==
        file_bytes(lay2.unpaired_tgt_dir / "v_003.png"));

  auto m = data::scan_and_pair(lay1);
  CHECK(m.pairs.size() == 16);

  // Constant image: palette-mapped constant, no edges to darken.
  auto styl = data::stylize_fixture(solid(8, 200, 100, 50));
  for (std::size_t i = 0; i < styl.pixels.size(); i += 3) {
    CHECK(styl.pixels[i + 0] == (200 / 64) * 85);
    CHECK(styl.pixels[i + 1] == (100 / 64) * 85);
    CHECK(styl.pixels[i + 2] == (50 / 64) * 85);
  }

  CHECK_THROWS_AS(data::make_fixtures(d1, 1, 0, 32), core::UsageError);
}

TEST_CASE("batcher: schedule, determinism, alignment oracle") {
  auto root = fresh_dir("batch");
  // Fixtures at the training size: resize and crop become identities, so the
  // stylization oracle applies exactly.
  auto lay = data::make_fixtures(root, 16, 5, 32);
  auto m = data::scan_and_pair(lay);

  data::BatcherConfig cfg;
  cfg.batch_size = 4;
  cfg.image_size = 32;
  cfg.seed = 123;
  data::Batcher<float> batcher(m, cfg);
  CHECK(batcher.steps_per_epoch() == 4);

  auto b = batcher.next(0, 0);
  CHECK(b.x_p.shape() == core::Shape{4, 3, 32, 32});
  CHECK(b.y_p.shape() == b.x_p.shape());
  CHECK(b.x_u.shape() == b.x_p.shape());
  CHECK(b.y_u.shape() == b.x_p.shape());
  for (float v : b.x_p.value()) {
    CHECK(v >= -1.f);
    CHECK(v <= 1.f);
  }

  // Same (seed, epoch, step) reproduces the stream bitwise.
  auto b2 = batcher.next(0, 0);
  CHECK(b2.pair_ids == b.pair_ids);
  CHECK(b2.x_p.value() == b.x_p.value());
  CHECK(b2.y_u.value() == b.y_u.value());

  // Pseudo pairs are exhausted exactly once per epoch.
  std::vector<std::string> seen;
  for (std::size_t s = 0; s < 4; ++s) {
    auto bs = batcher.next(1, s);
    seen.insert(seen.end(), bs.pair_ids.begin(), bs.pair_ids.end());
  }
  auto sorted = seen;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted.size() == 16);
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());

  // Different epochs permute differently (16! makes collisions negligible).
  CHECK(batcher.epoch_order(0) != batcher.epoch_order(1));

  // Exact pair alignment: stylizing the transformed source reproduces the
  // transformed target, pixel for pixel, flips included.
  bool saw_flip = false;
  for (std::size_t s = 0; s < 2; ++s) {
    auto bs = batcher.next(0, s);
    for (std::size_t i = 0; i < 4; ++i) {
      auto xi = core::reshape(core::slice(bs.x_p, 0, i, 1), {3, 32, 32});
      auto yi = core::reshape(core::slice(bs.y_p, 0, i, 1), {3, 32, 32});
      auto restyled = data::stylize_fixture(data::tensor_to_image(xi));
      CHECK(restyled.pixels == data::tensor_to_image(yi).pixels);
      saw_flip = saw_flip || bs.flipped[i] != 0;
    }
  }
  CHECK(saw_flip);  // the oracle covered at least one mirrored pair

  data::Manifest empty;
  CHECK_THROWS_AS(data::Batcher<float>(empty, cfg), core::ConfigError);
  data::BatcherConfig big = cfg;
  big.batch_size = 32;
  CHECK_THROWS_AS(data::Batcher<float>(m, big), core::ConfigError);
}
