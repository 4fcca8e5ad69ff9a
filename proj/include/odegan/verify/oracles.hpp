// SPDX-License-Identifier: Apache-2.0
#pragma once
// Brute-force double-precision references for the contrastive objectives,
// written as direct summations over explicit vectors so the tensor versions
// can be checked against an independent code path.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "odegan/core/rng.hpp"
#include "odegan/loss/losses.hpp"

namespace odegan::verify {

using Mat = std::vector<std::vector<double>>;  // rows = patches

inline double vdot(const std::vector<double>& a,
                   const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// One image: sum over taps and locations of the cross-entropy with the
// co-located pseudo patch as positive and the rest of the image as negatives.
inline double oracle_style_patchnce(const std::vector<Mat>& fake,
                                    const std::vector<Mat>& pseudo,
                                    double tau) {
  double total = 0;
  for (std::size_t l = 0; l < fake.size(); ++l) {
    const Mat& q = fake[l];
    const Mat& k = pseudo[l];
    for (std::size_t i = 0; i < q.size(); ++i) {
      double denom = 0;
      for (std::size_t j = 0; j < k.size(); ++j)
        denom += std::exp(vdot(q[i], k[j]) / tau);
      total += -(vdot(q[i], k[i]) / tau - std::log(denom));
    }
  }
  return total;
}

// One tap, one image: mean Jensen-Shannon divergence between the
// diagonal-dropped row-softmax similarity distributions of the two sides.
inline double oracle_src(const Mat& a, const Mat& b, double tau) {
  const std::size_t p = a.size();
  auto row_dist = [&](const Mat& m, std::size_t i) {
    std::vector<double> d;
    double z = 0;
    for (std::size_t j = 0; j < p; ++j) {
      if (j == i) continue;
      d.push_back(std::exp(vdot(m[i], m[j]) / tau));
      z += d.back();
    }
    for (double& v : d) v /= z;
    return d;
  };
  double total = 0;
  for (std::size_t i = 0; i < p; ++i) {
    auto pd = row_dist(a, i);
    auto qd = row_dist(b, i);
    double jsd = 0;
    for (std::size_t j = 0; j < pd.size(); ++j) {
      double m = 0.5 * (pd[j] + qd[j]);
      jsd += 0.5 * pd[j] * std::log(pd[j] / m);
      jsd += 0.5 * qd[j] * std::log(qd[j] / m);
    }
    total += jsd;
  }
  return total / double(p);
}

// Hard-negative contrastive loss with explicit per-query negatives
// (negs[i] holds the N negative vectors for query i). Mean over queries.
inline double oracle_hdce(const Mat& query, const Mat& pos,
                          const std::vector<Mat>& negs, double tau,
                          double hardness) {
  double total = 0;
  for (std::size_t i = 0; i < query.size(); ++i) {
    const Mat& nn = negs[i];
    const double n = double(nn.size());
    std::vector<double> e(nn.size());
    double zsum = 0;
    for (std::size_t k = 0; k < nn.size(); ++k) {
      e[k] = std::exp(hardness * vdot(query[i], nn[k]));
      zsum += e[k];
    }
    double ps = vdot(query[i], pos[i]);
    double denom = std::exp(ps / tau);
    for (std::size_t k = 0; k < nn.size(); ++k)
      denom += (n * e[k] / zsum) * std::exp(vdot(query[i], nn[k]) / tau);
    total += std::log(denom) - ps / tau;
  }
  return total / double(query.size());
}

namespace detail {

// Single-image (C,H,W) volume for the plain-loop discriminator rerun below:
// no gemm, no tape, just the arithmetic.
struct Vol {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t ci, std::size_t i, std::size_t j) const {
    return v[(ci * h + i) * w + j];
  }
};

inline Vol pad_zero(const Vol& in, std::size_t p) {
  Vol out{in.c, in.h + 2 * p, in.w + 2 * p, {}};
  out.v.assign(out.c * out.h * out.w, 0.0);
  for (std::size_t c = 0; c < in.c; ++c)
    for (std::size_t i = 0; i < in.h; ++i)
      for (std::size_t j = 0; j < in.w; ++j)
        out.v[(c * out.h + i + p) * out.w + j + p] = in.at(c, i, j);
  return out;
}

inline Vol conv_naive(const Vol& in, const std::vector<double>& w,
                      const std::vector<double>& b, std::size_t cout,
                      std::size_t k, std::size_t stride) {
  Vol out{cout, (in.h - k) / stride + 1, (in.w - k) / stride + 1, {}};
  out.v.assign(cout * out.h * out.w, 0.0);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t i = 0; i < out.h; ++i)
      for (std::size_t j = 0; j < out.w; ++j) {
        double acc = b[co];
        for (std::size_t ci = 0; ci < in.c; ++ci)
          for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj)
              acc += w[((co * in.c + ci) * k + ki) * k + kj] *
                     in.at(ci, i * stride + ki, j * stride + kj);
        out.v[(co * out.h + i) * out.w + j] = acc;
      }
  return out;
}

inline void inorm_naive(Vol& x) {
  const std::size_t m = x.h * x.w;
  for (std::size_t c = 0; c < x.c; ++c) {
    double* p = x.v.data() + c * m;
    double mean = 0;
    for (std::size_t i = 0; i < m; ++i) mean += p[i];
    mean /= double(m);
    double var = 0;
    for (std::size_t i = 0; i < m; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= double(m);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t i = 0; i < m; ++i) p[i] = (p[i] - mean) * inv;
  }
}

inline void leaky_naive(Vol& x, double slope) {
  for (double& v : x.v) v = v > 0 ? v : slope * v;
}

}  // namespace detail

// Every patch logit of the discriminator, recomputed with nested loops from
// the raw weight vectors.
inline std::vector<double> oracle_disc_logits(
    const models::PatchDiscriminator<double>& d,
    const core::Tensor<double>& x) {
  const auto& cfg = d.config();
  if (cfg.norm != models::NormKind::kInstance)
    throw core::UsageError("oracle_disc_logits: instance norm only");
  auto wv = [&](const std::string& p) -> const std::vector<double>& {
    return d.params().at(p + "/w").value();
  };
  auto bv = [&](const std::string& p) -> const std::vector<double>& {
    return d.params().at(p + "/b").value();
  };
  std::vector<double> logits;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto& xv = x.value();
  for (std::size_t img = 0; img < n; ++img) {
    detail::Vol v{c, h, w, {xv.begin() + img * c * h * w,
                            xv.begin() + (img + 1) * c * h * w}};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      std::string p = "layer" + std::to_string(l);
      v = detail::conv_naive(detail::pad_zero(v, 1), wv(p), bv(p),
                             bv(p).size(), 4, 2);
      if (l > 0) detail::inorm_naive(v);
      detail::leaky_naive(v, 0.2);
    }
    v = detail::conv_naive(detail::pad_zero(v, 1), wv("penultimate"),
                           bv("penultimate"), bv("penultimate").size(), 4, 1);
    detail::inorm_naive(v);
    detail::leaky_naive(v, 0.2);
    v = detail::conv_naive(detail::pad_zero(v, 1), wv("logit"), bv("logit"), 1,
                           4, 1);
    logits.insert(logits.end(), v.v.begin(), v.v.end());
  }
  return logits;
}

inline double oracle_gan_criterion(const std::vector<double>& logits,
                                   bool target_real, loss::GanMode mode) {
  double s = 0;
  for (double l : logits) {
    if (mode == loss::GanMode::kLsgan) {
      const double d = l - (target_real ? 1.0 : 0.0);
      s += d * d;
    } else {
      const double z = target_real ? -l : l;
      s += z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    }
  }
  return s / double(logits.size());
}

struct OracleCheck {
  std::string name;
  double impl = 0, oracle = 0, err = 0;
  bool ok = false;
};

namespace detail {

inline Mat unit_rows(core::Rng& rng, std::size_t p, std::size_t e) {
  Mat m(p, std::vector<double>(e));
  for (auto& row : m) {
    double norm2 = 0;
    for (double& v : row) {
      v = rng.normal();
      norm2 += v * v;
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (double& v : row) v *= inv;
  }
  return m;
}

inline core::Tensor<double> to_tensor(const Mat& m) {
  std::vector<double> flat;
  flat.reserve(m.size() * m[0].size());
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  return core::Tensor<double>::from_vector({m.size(), m[0].size()}, flat);
}

inline models::PatchEmbeddings<double> to_embeddings(
    const std::vector<Mat>& taps) {
  models::PatchEmbeddings<double> e;
  e.n_images = 1;
  e.n_patches = taps[0].size();
  for (const Mat& m : taps) {
    e.per_tap.push_back(to_tensor(m));
    std::vector<std::size_t> idx(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) idx[i] = i;
    e.indices.push_back(idx);
  }
  return e;
}

}  // namespace detail

// Fixed random instances of every contrastive loss, evaluated by both the
// tensor implementation and the direct-summation oracle.
inline std::vector<OracleCheck> run_loss_oracles(std::uint64_t seed) {
  std::vector<OracleCheck> out;
  auto push = [&](std::string name, double impl, double oracle) {
    OracleCheck c;
    c.name = std::move(name);
    c.impl = impl;
    c.oracle = oracle;
    c.err = std::abs(impl - oracle);
    c.ok = c.err < 1e-8;
    out.push_back(c);
  };

  {
    core::Rng rng = core::Rng::derive(seed, "oracle-style");
    std::vector<Mat> f = {detail::unit_rows(rng, 6, 5),
                          detail::unit_rows(rng, 6, 5)};
    std::vector<Mat> k = {detail::unit_rows(rng, 6, 5),
                          detail::unit_rows(rng, 6, 5)};
    double impl =
        loss::style_patchnce(detail::to_embeddings(f), detail::to_embeddings(k),
                             0.2)
            .item();
    push("style_patchnce", impl, oracle_style_patchnce(f, k, 0.2));
  }

  {
    core::Rng rng = core::Rng::derive(seed, "oracle-src");
    std::vector<Mat> x = {detail::unit_rows(rng, 7, 4),
                          detail::unit_rows(rng, 7, 4)};
    std::vector<Mat> g = {detail::unit_rows(rng, 7, 4),
                          detail::unit_rows(rng, 7, 4)};
    double impl =
        loss::src_loss(detail::to_embeddings(x), detail::to_embeddings(g), 0.15)
            .item();
    double oracle =
        0.5 * (oracle_src(x[0], g[0], 0.15) + oracle_src(x[1], g[1], 0.15));
    push("src", impl, oracle);
  }

  {
    core::Rng rng = core::Rng::derive(seed, "oracle-hdce");
    Mat q = detail::unit_rows(rng, 5, 6);
    Mat p = detail::unit_rows(rng, 5, 6);
    std::vector<Mat> negs;
    std::vector<double> flat;
    for (std::size_t i = 0; i < 5; ++i) {
      negs.push_back(detail::unit_rows(rng, 4, 6));
      for (const auto& row : negs.back())
        flat.insert(flat.end(), row.begin(), row.end());
    }
    auto nt = core::Tensor<double>::from_vector({5, 4, 6}, flat);
    double impl = loss::hdce_loss(detail::to_tensor(q), detail::to_tensor(p),
                                  nt, 0.3, 1.7)
                      .item();
    push("hdce", impl, oracle_hdce(q, p, negs, 0.3, 1.7));
  }

  {
    // Internal-negative form against the oracle with negs rebuilt explicitly.
    core::Rng rng = core::Rng::derive(seed, "oracle-hdce-grid");
    Mat q = detail::unit_rows(rng, 6, 4);
    Mat c = detail::unit_rows(rng, 6, 4);
    std::vector<Mat> negs(6);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        if (j != i) negs[i].push_back(c[j]);
    double impl = loss::hdce_loss_grid(detail::to_tensor(q),
                                       detail::to_tensor(c), 0.25, 0.8)
                      .item();
    push("hdce_grid", impl, oracle_hdce(q, c, negs, 0.25, 0.8));
  }

  {
    core::Rng rng = core::Rng::derive(seed, "oracle-cgan");
    models::DiscriminatorConfig dc;
    dc.in_channels = 6;
    dc.base_channels = 4;
    dc.n_layers = 1;
    models::PatchDiscriminator<double> d(dc, rng.next_u64());
    auto xs = core::Tensor<double>::uniform(rng, {2, 3, 8, 8}, -1.0, 1.0);
    auto ys = core::Tensor<double>::uniform(rng, {2, 3, 8, 8}, -1.0, 1.0);
    auto gs = core::Tensor<double>::uniform(rng, {2, 3, 8, 8}, -1.0, 1.0);
    auto cat = [&](const core::Tensor<double>& img) {
      core::NoGradGuard ng;
      return core::concat<double>({img, xs}, 1);
    };
    for (auto mode : {loss::GanMode::kLsgan, loss::GanMode::kVanilla}) {
      const char* tag = mode == loss::GanMode::kLsgan ? "" : "_vanilla";
      auto terms = loss::cgan_loss(d, xs, ys, gs, mode);
      push(std::string("cgan_g") + tag, terms.g.item(),
           oracle_gan_criterion(oracle_disc_logits(d, cat(gs)), true, mode));
      push(std::string("cgan_d") + tag, terms.d.item(),
           oracle_gan_criterion(oracle_disc_logits(d, cat(ys)), true, mode) +
               oracle_gan_criterion(oracle_disc_logits(d, cat(gs)), false,
                                    mode));
    }
  }

  return out;
}

}  // namespace odegan::verify
