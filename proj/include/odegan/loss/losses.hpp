// SPDX-License-Identifier: Apache-2.0
#pragma once
// Training objectives for both branches: conditional/unconditional adversarial
// terms, the patch-contrastive family (StylePatchNCE, SRC, hDCE), a
// fixed-extractor perceptual distance, and the epoch-level supervision weight.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "odegan/core/nn.hpp"
#include "odegan/core/ops.hpp"
#include "odegan/models/discriminator.hpp"
#include "odegan/models/generator.hpp"
#include "odegan/models/projection.hpp"

namespace odegan::loss {

enum class GanMode { kLsgan, kVanilla };

inline const char* gan_mode_name(GanMode m) {
  return m == GanMode::kLsgan ? "lsgan" : "vanilla";
}

inline GanMode gan_mode_from_name(const std::string& name) {
  if (name == "lsgan") return GanMode::kLsgan;
  if (name == "vanilla") return GanMode::kVanilla;
  throw core::ConfigError("unknown gan mode: " + name);
}

// Supervision-weight schedule. kCosine follows the printed formula (decay
// from 1, clamped at 0). kWarmupThenCosine holds the weight at zero through
// the warm-up epochs, then runs the same cosine.
enum class SupSchedule { kCosine, kWarmupThenCosine };

inline const char* sup_schedule_name(SupSchedule s) {
  return s == SupSchedule::kCosine ? "cosine" : "warmup_cosine";
}

inline SupSchedule sup_schedule_from_name(const std::string& name) {
  if (name == "cosine") return SupSchedule::kCosine;
  if (name == "warmup_cosine") return SupSchedule::kWarmupThenCosine;
  throw core::ConfigError("unknown supervision schedule: " + name);
}

struct LossWeights {
  double lambda_style = 1.0;
  double lambda_src = 0.05;
  double lambda_hdce = 1.0;
  double lambda_perc = 0.1;  // 0 disables the perceptual term entirely
  double tau = 0.07;
  double hardness = 1.0;  // hard-negative weighting strength
  std::size_t n_patches = 256;
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 25;
  double sup_period = 40.0;  // cosine period of the supervision weight, epochs
  SupSchedule schedule = SupSchedule::kCosine;
  GanMode gan_mode = GanMode::kLsgan;

  void validate() const {
    if (lambda_style < 0 || lambda_src < 0 || lambda_hdce < 0 ||
        lambda_perc < 0)
      throw core::ConfigError("loss weights must be non-negative");
    if (tau <= 0) throw core::ConfigError("tau must be positive");
    if (n_patches == 0) throw core::ConfigError("n_patches must be positive");
    if (total_epochs == 0)
      throw core::ConfigError("total_epochs must be positive");
    if (sup_period <= 0) throw core::ConfigError("sup_period must be positive");
  }
};

struct LossReport {
  double cgan_g = 0, cgan_d = 0, style_patchnce = 0, gan_u_g = 0, gan_u_d = 0,
         src = 0, hdce = 0, perc = 0, sup_total = 0, unsup_total = 0,
         total = 0;

  static const std::array<const char*, 11>& columns() {
    static const std::array<const char*, 11> cols = {
        "cgan_g",  "cgan_d", "style_patchnce", "gan_u_g",
        "gan_u_d", "src",    "hdce",           "perc",
        "sup_total", "unsup_total", "total"};
    return cols;
  }
  std::array<double, 11> values() const {
    return {cgan_g, cgan_d, style_patchnce, gan_u_g,     gan_u_d, src,
            hdce,   perc,   sup_total,      unsup_total, total};
  }
};

namespace detail {

// cos(pi*x) with exact values at quarter periods, so schedule milestones land
// on 0/±1 instead of 6e-17 leftovers.
inline double cos_pi(double x) {
  double r = std::fmod(x, 2.0);
  if (r < 0) r += 2.0;
  if (r == 0.0) return 1.0;
  if (r == 0.5 || r == 1.5) return 0.0;
  if (r == 1.0) return -1.0;
  return std::cos(r * std::numbers::pi);
}

}  // namespace detail

// Epoch-level supervision weight, t is 1-based.
inline double lambda_sup(std::size_t t, const LossWeights& w) {
  if (t < 1 || t > w.total_epochs)
    throw core::UsageError("lambda_sup: epoch index out of range");
  double phase;
  if (w.schedule == SupSchedule::kWarmupThenCosine) {
    if (t <= w.warmup_epochs) return 0.0;
    phase = double(t - 1 - w.warmup_epochs) / w.sup_period;
  } else {
    phase = double(t - 1) / w.sup_period;
  }
  return std::max(0.0, detail::cos_pi(phase));
}

// Mean adversarial criterion over a patch logit map.
template <class S>
core::Tensor<S> gan_criterion(const core::Tensor<S>& logits, bool target_real,
                              GanMode mode) {
  if (mode == GanMode::kLsgan) {
    S target = target_real ? S(1) : S(0);
    return core::mean_all(core::square(core::add_scalar(logits, -target)));
  }
  // -log sigmoid(l) = softplus(-l), -log(1 - sigmoid(l)) = softplus(l)
  auto z = target_real ? core::neg(logits) : logits;
  return core::mean_all(core::softplus(z));
}

template <class S>
struct GanTerms {
  core::Tensor<S> g, d;
};

// Conditional adversarial pair: the discriminator scores (target‖source) as
// real and (output‖source) as fake; the generator term uses the tracked
// output, the discriminator term a detached copy.
template <class S>
GanTerms<S> cgan_loss(models::PatchDiscriminator<S>& d_p,
                      const core::Tensor<S>& x_p, const core::Tensor<S>& y_p,
                      const core::Tensor<S>& g_out,
                      GanMode mode = GanMode::kLsgan) {
  for (const auto* img : {&x_p, &y_p, &g_out})
    if (img->ndim() != 4)
      throw core::ShapeError("cgan_loss: expected NCHW images");
  for (const auto* img : {&y_p, &g_out})
    if (img->dim(0) != x_p.dim(0) || img->dim(2) != x_p.dim(2) ||
        img->dim(3) != x_p.dim(3))
      throw core::ShapeError("cgan_loss: image sizes disagree");
  if (y_p.dim(1) != g_out.dim(1))
    throw core::ShapeError("cgan_loss: target/output channels disagree");

  auto g_term =
      gan_criterion(d_p.forward(core::concat<S>({g_out, x_p}, 1)), true, mode);
  auto d_real =
      gan_criterion(d_p.forward(core::concat<S>({y_p, x_p}, 1)), true, mode);
  auto d_fake = gan_criterion(
      d_p.forward(core::concat<S>({g_out.detach(), x_p}, 1)), false, mode);
  return {g_term, core::add(d_real, d_fake)};
}

// Unconditional analogue on single images.
template <class S>
GanTerms<S> gan_loss_unsup(models::PatchDiscriminator<S>& d_u,
                           const core::Tensor<S>& y,
                           const core::Tensor<S>& g_out,
                           GanMode mode = GanMode::kLsgan) {
  if (y.ndim() != 4 || g_out.ndim() != 4)
    throw core::ShapeError("gan_loss_unsup: expected NCHW images");
  if (y.dim(1) != g_out.dim(1))
    throw core::ShapeError("gan_loss_unsup: channel counts disagree");
  auto g_term = gan_criterion(d_u.forward(g_out), true, mode);
  auto d_real = gan_criterion(d_u.forward(y), true, mode);
  auto d_fake = gan_criterion(d_u.forward(g_out.detach()), false, mode);
  return {g_term, core::add(d_real, d_fake)};
}

namespace detail {

template <class S>
void check_aligned(const models::PatchEmbeddings<S>& a,
                   const models::PatchEmbeddings<S>& b, const char* who) {
  if (a.per_tap.size() != b.per_tap.size())
    throw core::UsageError(std::string(who) + ": tap count mismatch");
  if (a.indices != b.indices)
    throw core::UsageError(std::string(who) + ": patch index sets differ");
  if (a.n_images != b.n_images || a.n_patches != b.n_patches)
    throw core::UsageError(std::string(who) + ": batch/patch counts differ");
}

}  // namespace detail

// Patch-contrastive loss between generator-output embeddings and
// pseudo-target embeddings at identical spatial indices. Per tap and
// location: cross-entropy with the co-located patch as positive and the
// remaining same-image patches as negatives; summed over taps and locations,
// averaged over the batch. tau divides all similarities.
template <class S>
core::Tensor<S> style_patchnce(const models::PatchEmbeddings<S>& emb_fake,
                               const models::PatchEmbeddings<S>& emb_pseudo,
                               double tau) {
  detail::check_aligned(emb_fake, emb_pseudo, "style_patchnce");
  if (tau <= 0) throw core::ConfigError("style_patchnce: tau must be positive");
  const std::size_t n = emb_fake.n_images, p = emb_fake.n_patches;
  std::vector<std::size_t> diag(p);
  for (std::size_t i = 0; i < p; ++i) diag[i] = i * p + i;

  auto acc = core::Tensor<S>::scalar(S(0));
  for (std::size_t l = 0; l < emb_fake.per_tap.size(); ++l) {
    for (std::size_t img = 0; img < n; ++img) {
      auto q = core::slice(emb_fake.per_tap[l], 0, img * p, p);
      auto k = core::slice(emb_pseudo.per_tap[l], 0, img * p, p);
      auto logits =
          core::mul_scalar(core::matmul(q, core::transpose2d(k)), S(1.0 / tau));
      auto lsm = core::log_softmax(logits, 1);
      auto pos = core::gather_flat(lsm, diag, {p});
      acc = core::add(acc, core::neg(core::sum_all(pos)));
    }
  }
  return core::mul_scalar(acc, S(1.0 / double(n)));
}

// Similarity-relation consistency: per tap and image, form the within-set
// patch similarity rows (diagonal dropped, row-softmax at temperature tau)
// for both sides and return the mean Jensen-Shannon divergence between
// corresponding rows. Base-e logs, so the value lives in [0, ln 2].
template <class S>
core::Tensor<S> src_loss(const models::PatchEmbeddings<S>& emb_x,
                         const models::PatchEmbeddings<S>& emb_gx, double tau) {
  detail::check_aligned(emb_x, emb_gx, "src_loss");
  if (tau <= 0) throw core::ConfigError("src_loss: tau must be positive");
  const std::size_t n = emb_x.n_images, p = emb_x.n_patches;
  if (p < 2)
    throw core::UsageError(
        "src_loss: needs at least 2 patches to form a distribution");
  std::vector<std::size_t> off;
  off.reserve(p * (p - 1));
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j)
      if (j != i) off.push_back(i * p + j);

  auto row_dists = [&](const core::Tensor<S>& rows) {
    auto sims =
        core::mul_scalar(core::matmul(rows, core::transpose2d(rows)),
                         S(1.0 / tau));
    auto lsm = core::log_softmax(core::gather_flat(sims, off, {p, p - 1}), 1);
    return std::make_pair(core::exp_t(lsm), lsm);
  };

  auto acc = core::Tensor<S>::scalar(S(0));
  const std::size_t taps = emb_x.per_tap.size();
  for (std::size_t l = 0; l < taps; ++l) {
    for (std::size_t img = 0; img < n; ++img) {
      auto [pp, lp] = row_dists(core::slice(emb_x.per_tap[l], 0, img * p, p));
      auto [qq, lq] = row_dists(core::slice(emb_gx.per_tap[l], 0, img * p, p));
      auto m = core::mul_scalar(core::add(pp, qq), S(0.5));
      auto lm = core::log_t(m);
      auto kl_p = core::sum_all(core::mul(pp, core::sub(lp, lm)));
      auto kl_q = core::sum_all(core::mul(qq, core::sub(lq, lm)));
      acc = core::add(acc, core::mul_scalar(core::add(kl_p, kl_q), S(0.5)));
    }
  }
  return core::mul_scalar(acc, S(1.0 / double(taps * n * p)));
}

namespace detail {

// Shared tail of the hard-negative contrastive loss given the positive
// similarity column (P,1) and negative similarity rows (P,N). Importance
// weights w_i = N * softmax(hardness * sim_i) realize the expectation over
// the hard-negative sampling distribution; the denominator keeps the
// positive term. Computed in the pos-shifted form log(1 + sum w e^((s-p)/tau))
// so unit-norm inputs can never overflow.
template <class S>
core::Tensor<S> hdce_from_sims(const core::Tensor<S>& pos_sim,
                               const core::Tensor<S>& neg_sim, double tau,
                               double hardness) {
  const std::size_t n = neg_sim.dim(1);
  auto w = core::mul_scalar(
      core::softmax(core::mul_scalar(neg_sim, S(hardness)), 1), S(double(n)));
  core::Tensor<S> ones({1, n}, S(1));
  auto shifted = core::mul_scalar(
      core::sub(neg_sim, core::matmul(pos_sim, ones)), S(1.0 / tau));
  auto s = core::sum_axis(core::mul(w, core::exp_t(shifted)), 1);
  return core::mean_all(core::log_t(core::add_scalar(s, S(1))));
}

}  // namespace detail

// Hard-negative contrastive loss with explicit per-query negatives:
// query (P,E), pos (P,E), negs (P,N,E). Mean over the P queries.
template <class S>
core::Tensor<S> hdce_loss(const core::Tensor<S>& query,
                          const core::Tensor<S>& pos,
                          const core::Tensor<S>& negs, double tau,
                          double hardness) {
  if (query.ndim() != 2 || pos.ndim() != 2 || negs.ndim() != 3)
    throw core::ShapeError("hdce_loss: expected (P,E), (P,E), (P,N,E)");
  if (pos.shape() != query.shape() || negs.dim(0) != query.dim(0) ||
      negs.dim(2) != query.dim(1))
    throw core::ShapeError("hdce_loss: shape mismatch");
  if (negs.dim(1) == 0)
    throw core::ConfigError("hdce_loss: need at least one negative");
  if (tau <= 0) throw core::ConfigError("hdce_loss: tau must be positive");
  auto pos_sim = core::batched_rowdot(
      query, core::reshape(pos, {query.dim(0), 1, query.dim(1)}));
  auto neg_sim = core::batched_rowdot(query, negs);
  return detail::hdce_from_sims(pos_sim, neg_sim, tau, hardness);
}

// Internal-negative form used during training: positives are the co-located
// counterpart patches, negatives the counterpart patches everywhere else.
// Equivalent to hdce_loss with negs[i] = counterpart rows j != i, but built
// from one similarity matrix instead of a (P,N,E) tensor.
template <class S>
core::Tensor<S> hdce_loss_grid(const core::Tensor<S>& query,
                               const core::Tensor<S>& counterpart, double tau,
                               double hardness) {
  if (query.ndim() != 2 || counterpart.shape() != query.shape())
    throw core::ShapeError(
        "hdce_loss_grid: need matching (patches, dim) embeddings");
  const std::size_t p = query.dim(0);
  if (p < 2)
    throw core::ConfigError("hdce_loss_grid: need at least one negative patch");
  if (tau <= 0) throw core::ConfigError("hdce_loss_grid: tau must be positive");
  auto sims = core::matmul(query, core::transpose2d(counterpart));
  std::vector<std::size_t> diag(p), off;
  off.reserve(p * (p - 1));
  for (std::size_t i = 0; i < p; ++i) {
    diag[i] = i * p + i;
    for (std::size_t j = 0; j < p; ++j)
      if (j != i) off.push_back(i * p + j);
  }
  auto pos_sim = core::gather_flat(sims, diag, {p, 1});
  auto neg_sim = core::gather_flat(sims, off, {p, p - 1});
  return detail::hdce_from_sims(pos_sim, neg_sim, tau, hardness);
}

// Fixed (never trained) multi-layer conv feature extractor for the
// perceptual distance. Weights are seed-derived so results are reproducible
// without external assets; swap the seed to swap the extractor.
template <class S>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed = 77) {
    constexpr std::size_t chans[4] = {3, 16, 32, 64};
    for (std::size_t l = 0; l < 3; ++l) {
      auto rng = core::Rng::derive(seed, "perc", l);
      double scale = std::sqrt(2.0 / double(chans[l] * 9));
      ws_.push_back(core::Tensor<S>::randn(
          rng, {chans[l + 1], chans[l], 3, 3}, S(scale)));
    }
  }

  std::vector<core::Tensor<S>> features(const core::Tensor<S>& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
      throw core::ShapeError("FeatureExtractor: expected (N,3,H,W) input");
    std::vector<core::Tensor<S>> out;
    auto h = x;
    for (std::size_t l = 0; l < ws_.size(); ++l) {
      h = core::conv2d(core::pad2d(h, 1, core::PadMode::kZero), ws_[l],
                       l == 0 ? 1 : 2);
      h = core::relu(h);
      out.push_back(h);
    }
    return out;
  }

 private:
  std::vector<core::Tensor<S>> ws_;
};

// Mean absolute feature difference, averaged across extractor stages.
template <class S>
core::Tensor<S> perceptual_loss(const core::Tensor<S>& a,
                                const core::Tensor<S>& b,
                                const FeatureExtractor<S>& extractor) {
  if (a.shape() != b.shape())
    throw core::ShapeError("perceptual_loss: shape mismatch");
  auto fa = extractor.features(a);
  auto fb = extractor.features(b);
  auto acc = core::Tensor<S>::scalar(S(0));
  for (std::size_t l = 0; l < fa.size(); ++l)
    acc = core::add(acc, core::mean_all(core::abs_t(core::sub(fa[l], fb[l]))));
  return core::mul_scalar(acc, S(1.0 / double(fa.size())));
}

template <class S>
struct TrainingBatch {
  core::Tensor<S> x_p, y_p;  // pseudo-paired branch
  core::Tensor<S> x_u, y_u;  // unpaired branch
};

template <class S>
struct LossModels {
  models::Generator<S>* gen = nullptr;
  models::PatchDiscriminator<S>* d_p = nullptr;
  models::PatchDiscriminator<S>* d_u = nullptr;
  models::ProjectionHead<S>* head = nullptr;
  const FeatureExtractor<S>* perc = nullptr;  // optional
};

template <class S>
struct LossOutputs {
  LossReport report;
  core::Tensor<S> g_total;   // generator objective, both branches combined
  core::Tensor<S> g_sup;     // supervised branch alone (pre-weighting)
  core::Tensor<S> g_unsup;   // unsupervised branch alone
  core::Tensor<S> d_p_loss;  // conditional discriminator objective
  core::Tensor<S> d_u_loss;  // unconditional discriminator objective
  models::ForwardStats stats{};
};

// One full loss evaluation for a step of epoch t (1-based). Builds three
// independent objectives: the generator total (discriminator weights are on
// its tape but belong to other optimizers), and the two discriminator terms
// over detached generator outputs. Report totals are recomputed in double so
// the identity total = unsup + lambda_sup*sup holds to reporting precision.
template <class S>
LossOutputs<S> total_losses(const TrainingBatch<S>& batch,
                            const LossModels<S>& m, const LossWeights& w,
                            std::size_t t, core::Rng& rng) {
  w.validate();
  if (!m.gen || !m.d_p || !m.d_u || !m.head)
    throw core::UsageError("total_losses: missing model");
  const double ls = lambda_sup(t, w);
  LossOutputs<S> out;
  auto& gen = *m.gen;

  auto fake_p = gen.forward(batch.x_p, &out.stats);
  auto fake_u = gen.forward(batch.x_u, &out.stats);

  auto cgan = cgan_loss(*m.d_p, batch.x_p, batch.y_p, fake_p, w.gan_mode);
  auto ugan = gan_loss_unsup(*m.d_u, batch.y_u, fake_u, w.gan_mode);

  const auto taps = gen.default_taps();
  core::Rng reuse_rng(0);  // unused when an index set is supplied

  // Supervised contrastive branch: output vs pseudo target, shared indices.
  auto feats_fake = gen.encoder_features(fake_p, taps);
  auto feats_pseudo = gen.encoder_features(batch.y_p, taps);
  auto emb_fake = models::sample_patches(*m.head, feats_fake, w.n_patches, rng);
  auto emb_pseudo = models::sample_patches(*m.head, feats_pseudo, w.n_patches,
                                           reuse_rng, &emb_fake.indices);
  auto style = style_patchnce(emb_fake, emb_pseudo, w.tau);

  // Unsupervised branch: source vs translated source, shared indices.
  auto feats_x = gen.encoder_features(batch.x_u, taps);
  auto feats_gx = gen.encoder_features(fake_u, taps);
  auto emb_x = models::sample_patches(*m.head, feats_x, w.n_patches, rng);
  auto emb_gx = models::sample_patches(*m.head, feats_gx, w.n_patches,
                                       reuse_rng, &emb_x.indices);
  auto src = src_loss(emb_x, emb_gx, w.tau);

  auto hacc = core::Tensor<S>::scalar(S(0));
  const std::size_t p = w.n_patches;
  for (std::size_t l = 0; l < emb_x.per_tap.size(); ++l)
    for (std::size_t img = 0; img < emb_x.n_images; ++img) {
      auto q = core::slice(emb_gx.per_tap[l], 0, img * p, p);
      auto k = core::slice(emb_x.per_tap[l], 0, img * p, p);
      hacc = core::add(hacc, hdce_loss_grid(q, k, w.tau, w.hardness));
    }
  auto hdce = core::mul_scalar(hacc, S(1.0 / double(emb_x.n_images)));

  const bool have_perc = w.lambda_perc > 0 && m.perc != nullptr;
  auto perc = have_perc ? perceptual_loss(fake_p, batch.y_p, *m.perc)
                        : core::Tensor<S>::scalar(S(0));

  auto sup = core::add(cgan.g, core::mul_scalar(style, S(w.lambda_style)));
  if (have_perc)
    sup = core::add(sup, core::mul_scalar(perc, S(w.lambda_perc)));
  auto unsup = core::add(
      ugan.g, core::add(core::mul_scalar(src, S(w.lambda_src)),
                        core::mul_scalar(hdce, S(w.lambda_hdce))));
  out.g_total = core::add(unsup, core::mul_scalar(sup, S(ls)));
  out.g_sup = sup;
  out.g_unsup = unsup;
  out.d_p_loss = cgan.d;
  out.d_u_loss = ugan.d;

  auto& r = out.report;
  r.cgan_g = double(cgan.g.item());
  r.cgan_d = double(cgan.d.item());
  r.style_patchnce = double(style.item());
  r.gan_u_g = double(ugan.g.item());
  r.gan_u_d = double(ugan.d.item());
  r.src = double(src.item());
  r.hdce = double(hdce.item());
  r.perc = have_perc ? double(perc.item()) : 0.0;
  r.sup_total =
      r.cgan_g + w.lambda_style * r.style_patchnce + w.lambda_perc * r.perc;
  r.unsup_total = r.gan_u_g + w.lambda_src * r.src + w.lambda_hdce * r.hdce;
  r.total = r.unsup_total + ls * r.sup_total;
  return out;
}

}  // namespace odegan::loss
