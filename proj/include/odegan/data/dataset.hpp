// SPDX-License-Identifier: Apache-2.0
#pragma once
// Dataset ingestion: folder scanning and filename-stem pairing, manifest
// caching, deterministic preprocessing (antialiased resize, shared crop and
// flip for pseudo pairs), epoch-seeded batching, and a procedural fixture
// generator so tests and smoke runs need no external data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "odegan/core/rng.hpp"
#include "odegan/core/tensor.hpp"
#include "odegan/data/image.hpp"

namespace odegan::data {

struct DatasetLayout {
  std::filesystem::path pseudo_src_dir;    // X^p
  std::filesystem::path pseudo_tgt_dir;    // Y^p, filename-matched
  std::filesystem::path unpaired_src_dir;  // X
  std::filesystem::path unpaired_tgt_dir;  // Y
  std::size_t image_size = 256;
  std::size_t channels = 3;
};

struct PairEntry {
  std::string id;
  std::filesystem::path src_path, tgt_path;
  bool operator==(const PairEntry&) const = default;
};

struct UnpairedEntry {
  std::string id;
  std::filesystem::path path;
  bool operator==(const UnpairedEntry&) const = default;
};

struct Manifest {
  std::vector<PairEntry> pairs;
  std::vector<UnpairedEntry> unpaired_src, unpaired_tgt;
  bool operator==(const Manifest&) const = default;
};

// Sorted, deterministic manifest. Pseudo pairs are matched by filename stem;
// a stem present on only one side raises a pairing error listing the orphans.
Manifest scan_and_pair(const DatasetLayout& layout);

// Plain-text cache: tab-separated (id, src_path, tgt_path) rows under
// section comments.
void save_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

// The fixture "style": 4-level palette quantization followed by darkening of
// strong Sobel edges. Integer-exact and flip-equivariant, so pair-alignment
// tests have an exact oracle.
Image stylize_fixture(const Image& img);

// Generates n pseudo pairs plus n/2 + n/2 disjoint unpaired images
// (procedural gradients and shapes; targets are their stylized versions).
// Bit-identical across runs for a fixed seed.
DatasetLayout make_fixtures(const std::filesystem::path& out_dir, std::size_t n,
                            std::uint64_t seed, std::size_t size = 64);

namespace detail {

struct FilterTaps {
  std::size_t first = 0;
  std::vector<double> w;
};

// Triangle-filter taps with support widened by the scale factor, so
// downscaling averages instead of aliasing.
inline std::vector<FilterTaps> triangle_taps(std::size_t in, std::size_t out) {
  const double scale = double(in) / double(out);
  const double fscale = std::max(scale, 1.0);
  std::vector<FilterTaps> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double center = (double(i) + 0.5) * scale;
    long lo = long(std::floor(center - fscale));
    long hi = long(std::ceil(center + fscale));
    lo = std::max(lo, 0L);
    hi = std::min(hi, long(in));
    FilterTaps t;
    t.first = std::size_t(lo);
    double sum = 0;
    for (long j = lo; j < hi; ++j) {
      double u = (double(j) + 0.5 - center) / fscale;
      double w = std::max(0.0, 1.0 - std::abs(u));
      t.w.push_back(w);
      sum += w;
    }
    if (sum <= 0) {
      t.first = std::min(std::size_t(center), in - 1);
      t.w.assign(1, 1.0);
      sum = 1.0;
    }
    for (double& w : t.w) w /= sum;
    taps[i] = std::move(t);
  }
  return taps;
}

}  // namespace detail

// Antialiased bilinear resize of a (3,H,W) image tensor. Returns the input
// unchanged when the size already matches.
template <class S>
core::Tensor<S> resize_bilinear(const core::Tensor<S>& img, std::size_t out_h,
                                std::size_t out_w) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw core::ShapeError("resize_bilinear: expected (3,H,W)");
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (h == 0 || w == 0 || out_h == 0 || out_w == 0)
    throw core::UsageError("resize_bilinear: zero-sized image");
  if (out_h == h && out_w == w) return img;

  const auto& src = img.value();
  auto col_taps = detail::triangle_taps(w, out_w);
  std::vector<double> mid(3 * h * out_w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& t = col_taps[x];
        double acc = 0;
        for (std::size_t k = 0; k < t.w.size(); ++k)
          acc += t.w[k] * double(src[(c * h + y) * w + t.first + k]);
        mid[(c * h + y) * out_w + x] = acc;
      }

  auto row_taps = detail::triangle_taps(h, out_h);
  core::Tensor<S> out({3, out_h, out_w});
  auto& dst = out.value();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& t = row_taps[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0;
        for (std::size_t k = 0; k < t.w.size(); ++k)
          acc += t.w[k] * mid[(c * h + t.first + k) * out_w + x];
        dst[(c * out_h + y) * out_w + x] = S(acc);
      }
    }
  return out;
}

// Crop a size x size window at (oy, ox), optionally mirroring it.
template <class S>
core::Tensor<S> crop_flip(const core::Tensor<S>& img, std::size_t oy,
                          std::size_t ox, std::size_t size, bool flip) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw core::ShapeError("crop_flip: expected (3,H,W)");
  if (oy + size > img.dim(1) || ox + size > img.dim(2))
    throw core::ShapeError("crop_flip: window out of bounds");
  core::Tensor<S> out({3, size, size});
  const auto& src = img.value();
  auto& dst = out.value();
  const std::size_t h = img.dim(1), w = img.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        std::size_t sx = ox + (flip ? size - 1 - x : x);
        dst[(c * size + y) * size + x] = src[(c * h + oy + y) * w + sx];
      }
  return out;
}

struct PreprocessOptions {
  bool random_crop = true;  // center crop when off
  bool random_flip = true;
};

template <class S>
struct PreprocessedPair {
  core::Tensor<S> x, y;
  std::size_t oy = 0, ox = 0;
  bool flipped = false;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> short_side_dims(
    std::size_t h, std::size_t w, std::size_t image_size) {
  const double s = double(image_size) / double(std::min(h, w));
  auto nh = std::max(image_size, std::size_t(std::lround(double(h) * s)));
  auto nw = std::max(image_size, std::size_t(std::lround(double(w) * s)));
  return {nh, nw};
}

}  // namespace detail

// Short-side resize to image_size, then a crop and horizontal flip drawn
// once from rng and applied to BOTH images.
template <class S>
PreprocessedPair<S> preprocess_pair(const core::Tensor<S>& x_p,
                                    const core::Tensor<S>& y_p,
                                    std::size_t image_size, core::Rng& rng,
                                    const PreprocessOptions& opt = {}) {
  if (x_p.ndim() != 3 || x_p.dim(0) != 3 || x_p.shape() != y_p.shape())
    throw core::ShapeError("preprocess_pair: need matching (3,H,W) images");
  auto [nh, nw] = detail::short_side_dims(x_p.dim(1), x_p.dim(2), image_size);
  if (nh < image_size || nw < image_size)
    throw core::ShapeError("preprocess_pair: image smaller than crop");
  auto rx = resize_bilinear(x_p, nh, nw);
  auto ry = resize_bilinear(y_p, nh, nw);

  PreprocessedPair<S> out;
  if (opt.random_crop) {
    out.oy = rng.below(nh - image_size + 1);
    out.ox = rng.below(nw - image_size + 1);
  } else {
    out.oy = (nh - image_size) / 2;
    out.ox = (nw - image_size) / 2;
  }
  out.flipped = opt.random_flip && rng.below(2) == 1;
  out.x = crop_flip(rx, out.oy, out.ox, image_size, out.flipped);
  out.y = crop_flip(ry, out.oy, out.ox, image_size, out.flipped);
  return out;
}

// Same pipeline for a single (unpaired) image.
template <class S>
core::Tensor<S> preprocess_one(const core::Tensor<S>& img,
                               std::size_t image_size, core::Rng& rng,
                               const PreprocessOptions& opt = {}) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw core::ShapeError("preprocess_one: expected (3,H,W)");
  auto [nh, nw] = detail::short_side_dims(img.dim(1), img.dim(2), image_size);
  auto r = resize_bilinear(img, nh, nw);
  std::size_t oy, ox;
  if (opt.random_crop) {
    oy = rng.below(nh - image_size + 1);
    ox = rng.below(nw - image_size + 1);
  } else {
    oy = (nh - image_size) / 2;
    ox = (nw - image_size) / 2;
  }
  bool flip = opt.random_flip && rng.below(2) == 1;
  return crop_flip(r, oy, ox, image_size, flip);
}

template <class S>
struct Batch {
  core::Tensor<S> x_p, y_p;  // pseudo pair, identically transformed
  core::Tensor<S> x_u, y_u;  // independently drawn unpaired images
  std::vector<std::string> pair_ids, unpaired_src_ids, unpaired_tgt_ids;
  std::vector<std::size_t> crop_y, crop_x;
  std::vector<char> flipped;
};

template <class S>
core::Tensor<S> stack_images(const std::vector<core::Tensor<S>>& imgs) {
  if (imgs.empty()) throw core::UsageError("stack_images: empty list");
  const auto& s0 = imgs[0].shape();
  core::Tensor<S> out({imgs.size(), s0[0], s0[1], s0[2]});
  std::size_t per = imgs[0].numel();
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    if (imgs[i].shape() != s0)
      throw core::ShapeError("stack_images: mismatched shapes");
    std::copy(imgs[i].value().begin(), imgs[i].value().end(),
              out.value().begin() + i * per);
  }
  return out;
}

struct BatcherConfig {
  std::size_t batch_size = 4;
  std::size_t image_size = 256;
  bool random_crop = true;
  bool random_flip = true;
  std::uint64_t seed = 0;
};

// Deterministic batch stream: pseudo pairs are shuffled per epoch and
// exhausted once; unpaired images are drawn independently with replacement.
// Everything is a pure function of (manifest, seed, epoch, step).
template <class S>
class Batcher {
 public:
  Batcher(Manifest manifest, BatcherConfig cfg)
      : manifest_(std::move(manifest)), cfg_(cfg) {
    if (manifest_.pairs.empty() || manifest_.unpaired_src.empty() ||
        manifest_.unpaired_tgt.empty())
      throw core::ConfigError("batcher: manifest has an empty split");
    if (cfg_.batch_size == 0)
      throw core::UsageError("batcher: batch size must be positive");
    if (steps_per_epoch() == 0)
      throw core::ConfigError("batcher: batch size exceeds pair count");
  }

  std::size_t steps_per_epoch() const {
    return manifest_.pairs.size() / cfg_.batch_size;
  }
  const Manifest& manifest() const { return manifest_; }
  const BatcherConfig& config() const { return cfg_; }

  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> idx(manifest_.pairs.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    auto rng = core::Rng::derive(cfg_.seed, "epoch-order", epoch);
    rng.shuffle(idx);
    return idx;
  }

  Batch<S> next(std::size_t epoch, std::size_t step) const {
    if (step >= steps_per_epoch())
      throw core::UsageError("batcher: step index out of range");
    const auto order = epoch_order(epoch);
    const std::size_t b = cfg_.batch_size, sz = cfg_.image_size;
    const PreprocessOptions opt{cfg_.random_crop, cfg_.random_flip};

    Batch<S> out;
    std::vector<core::Tensor<S>> xs, ys, us, vs;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& p = manifest_.pairs[order[step * b + i]];
      auto rng = core::Rng::derive(cfg_.seed, "aug-pair", epoch, step * b + i);
      auto pp = preprocess_pair(load_image<S>(p.src_path),
                                load_image<S>(p.tgt_path), sz, rng, opt);
      xs.push_back(pp.x);
      ys.push_back(pp.y);
      out.pair_ids.push_back(p.id);
      out.crop_y.push_back(pp.oy);
      out.crop_x.push_back(pp.ox);
      out.flipped.push_back(pp.flipped ? 1 : 0);
    }

    auto draw = [&](const std::vector<UnpairedEntry>& list, const char* tag,
                    std::vector<core::Tensor<S>>& dst,
                    std::vector<std::string>& ids) {
      auto rng_pick = core::Rng::derive(cfg_.seed, tag, epoch, step);
      std::string aug_tag = std::string(tag) + "-aug";
      for (std::size_t i = 0; i < b; ++i) {
        const auto& e = list[rng_pick.below(list.size())];
        auto rng_aug =
            core::Rng::derive(cfg_.seed, aug_tag, epoch, step * b + i);
        dst.push_back(preprocess_one(load_image<S>(e.path), sz, rng_aug, opt));
        ids.push_back(e.id);
      }
    };
    draw(manifest_.unpaired_src, "unpaired-x", us, out.unpaired_src_ids);
    draw(manifest_.unpaired_tgt, "unpaired-y", vs, out.unpaired_tgt_ids);

    out.x_p = stack_images(xs);
    out.y_p = stack_images(ys);
    out.x_u = stack_images(us);
    out.y_u = stack_images(vs);
    return out;
  }

 private:
  Manifest manifest_;
  BatcherConfig cfg_;
};

}  // namespace odegan::data
