// SPDX-License-Identifier: Apache-2.0
//
// Patch sampling and the two-layer projection MLP that maps sampled encoder
// features to unit-norm contrastive embeddings, one head per tapped layer.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "odegan/core/nn.hpp"
#include "odegan/core/ops.hpp"
#include "odegan/core/rng.hpp"
#include "odegan/core/tensor.hpp"

namespace odegan::models {

template <class S>
class ProjectionHead {
 public:
  ProjectionHead(std::vector<std::size_t> tap_channels, std::size_t embed_dim,
                 std::uint64_t seed)
      : tap_channels_(std::move(tap_channels)), embed_dim_(embed_dim) {
    for (std::size_t l = 0; l < tap_channels_.size(); ++l) {
      std::string base = "tap" + std::to_string(l);
      add_linear(base + "/fc0", tap_channels_[l], embed_dim_, seed);
      add_linear(base + "/fc1", embed_dim_, embed_dim_, seed);
    }
  }

  std::size_t n_taps() const { return tap_channels_.size(); }
  std::size_t embed_dim() const { return embed_dim_; }
  core::ParamTree<S>& params() { return params_; }
  const core::ParamTree<S>& params() const { return params_; }

  // patches: (P, C_l) raw feature rows -> (P, embed_dim), unit L2 rows.
  Tensor<S> embed(std::size_t tap, const Tensor<S>& patches) const {
    if (tap >= tap_channels_.size())
      throw core::ConfigError("projection: tap " + std::to_string(tap) +
                              " out of range");
    if (patches.ndim() != 2 || patches.dim(1) != tap_channels_[tap])
      throw core::ShapeError(
          "projection: expected (P," + std::to_string(tap_channels_[tap]) +
          ") for tap " + std::to_string(tap) + ", got " +
          core::shape_str(patches.shape()));
    std::string base = "tap" + std::to_string(tap);
    Tensor<S> h = core::add_rowvec(
        core::matmul(patches, params_.at(base + "/fc0/w")),
        params_.at(base + "/fc0/b"));
    h = core::relu(h);
    h = core::add_rowvec(core::matmul(h, params_.at(base + "/fc1/w")),
                         params_.at(base + "/fc1/b"));
    return core::l2_normalize_rows(h);
  }

 private:
  void add_linear(const std::string& path, std::size_t in, std::size_t out,
                  std::uint64_t seed) {
    core::Rng rng = core::Rng::derive(seed, path);
    auto w = Tensor<S>::randn(rng, {in, out}, S(0.02));
    w.set_requires_grad(true);
    auto b = Tensor<S>({out}, S(0));
    b.set_requires_grad(true);
    params_.emplace(path + "/w", std::move(w));
    params_.emplace(path + "/b", std::move(b));
  }

  std::vector<std::size_t> tap_channels_;
  std::size_t embed_dim_;
  core::ParamTree<S> params_;
};

// Spatial locations sampled per tap, shared across the batch dimension so
// corresponding feature maps stay index-aligned.
using PatchIndices = std::vector<std::vector<std::size_t>>;

template <class S>
struct PatchEmbeddings {
  std::vector<Tensor<S>> per_tap;  // each (N*P, embed_dim)
  PatchIndices indices;
  std::size_t n_images = 0;
  std::size_t n_patches = 0;
};

// Draws n_patches locations per tap (or reuses `reuse` for positive-pair
// alignment) and projects the gathered feature rows. Feature tensors are
// (N, C, H, W); rows of each result group by image then patch.
template <class S>
PatchEmbeddings<S> sample_patches(const ProjectionHead<S>& head,
                                  const std::vector<Tensor<S>>& features,
                                  std::size_t n_patches, core::Rng& rng,
                                  const PatchIndices* reuse = nullptr) {
  if (features.size() != head.n_taps())
    throw core::ConfigError("sample_patches: feature count " +
                            std::to_string(features.size()) +
                            " != projection taps " +
                            std::to_string(head.n_taps()));
  if (reuse && reuse->size() != features.size())
    throw core::UsageError("sample_patches: reused index set has wrong arity");
  PatchEmbeddings<S> out;
  out.n_patches = n_patches;
  for (std::size_t l = 0; l < features.size(); ++l) {
    const Tensor<S>& f = features[l];
    if (f.ndim() != 4)
      throw core::ShapeError("sample_patches: features must be NCHW");
    std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    out.n_images = n;
    std::vector<std::size_t> ids;
    if (reuse) {
      ids = (*reuse)[l];
      for (std::size_t id : ids)
        if (id >= hw)
          throw core::UsageError("sample_patches: reused index out of range");
      if (ids.size() != n_patches)
        throw core::UsageError(
            "sample_patches: reused index count mismatch");
    } else {
      if (n_patches > hw)
        throw core::UsageError(
            "sample_patches: n_patches " + std::to_string(n_patches) +
            " exceeds " + std::to_string(hw) + " spatial positions at tap " +
            std::to_string(l));
      ids = rng.sample_indices(hw, n_patches);
    }
    // Gather rows (image, patch) -> C contiguous channels.
    std::vector<std::size_t> flat;
    flat.reserve(n * n_patches * c);
    for (std::size_t img = 0; img < n; ++img)
      for (std::size_t p = 0; p < n_patches; ++p)
        for (std::size_t ch = 0; ch < c; ++ch)
          flat.push_back((img * c + ch) * hw + ids[p]);
    Tensor<S> rows =
        core::gather_flat(f, std::move(flat), {n * n_patches, c});
    out.per_tap.push_back(head.embed(l, rows));
    out.indices.push_back(std::move(ids));
  }
  return out;
}

}  // namespace odegan::models
