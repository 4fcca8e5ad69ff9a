// SPDX-License-Identifier: Apache-2.0
//
// Structured ops on NCHW tensors: padding, convolution (im2col + GEMM),
// nearest upsampling, instance normalization, softmax family and row
// normalization. All follow the tape protocol from tensor.hpp.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "odegan/core/gemm.hpp"
#include "odegan/core/ops.hpp"
#include "odegan/core/tensor.hpp"

namespace odegan::core {

enum class PadMode { kZero, kReflect };

namespace detail {

// Reflect without repeating the border sample: valid for pad < extent.
inline std::size_t reflect_index(long j, long n) {
  if (j < 0) j = -j;
  if (j >= n) j = 2 * n - 2 - j;
  return static_cast<std::size_t>(j);
}

template <class S>
inline void check_nchw(const char* op, const Tensor<S>& x) {
  if (x.ndim() != 4)
    throw ShapeError(std::string(op) + ": expected NCHW, got " +
                     shape_str(x.shape()));
}

}  // namespace detail

template <class S>
Tensor<S> pad2d(const Tensor<S>& x, std::size_t pad, PadMode mode) {
  detail::check_nchw("pad2d", x);
  if (pad == 0) return x;
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (mode == PadMode::kReflect && (pad >= h || pad >= w))
    throw ShapeError("pad2d: reflect pad " + std::to_string(pad) +
                     " too large for " + shape_str(x.shape()));
  std::size_t ho = h + 2 * pad, wo = w + 2 * pad;
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      {n, c, ho, wo}, track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  long lp = static_cast<long>(pad);
  for (std::size_t img = 0; img < n * c; ++img) {
    const S* src = xv.data() + img * h * w;
    S* dst = yv.data() + img * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      long si = static_cast<long>(i) - lp;
      for (std::size_t j = 0; j < wo; ++j) {
        long sj = static_cast<long>(j) - lp;
        if (mode == PadMode::kZero) {
          bool inside = si >= 0 && si < static_cast<long>(h) && sj >= 0 &&
                        sj < static_cast<long>(w);
          dst[i * wo + j] = inside ? src[si * w + sj] : S(0);
        } else {
          std::size_t ri = detail::reflect_index(si, static_cast<long>(h));
          std::size_t rj = detail::reflect_index(sj, static_cast<long>(w));
          dst[i * wo + j] = src[ri * w + rj];
        }
      }
    }
  }
  if (track) {
    out.node()->backward = [xn = x.node(), n, c, h, w, ho, wo, lp,
                            mode](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t img = 0; img < n * c; ++img) {
        S* gx = xn->grad.data() + img * h * w;
        const S* gy = self.grad.data() + img * ho * wo;
        for (std::size_t i = 0; i < ho; ++i) {
          long si = static_cast<long>(i) - lp;
          for (std::size_t j = 0; j < wo; ++j) {
            long sj = static_cast<long>(j) - lp;
            if (mode == PadMode::kZero) {
              if (si >= 0 && si < static_cast<long>(h) && sj >= 0 &&
                  sj < static_cast<long>(w))
                gx[si * w + sj] += gy[i * wo + j];
            } else {
              std::size_t ri = detail::reflect_index(si, static_cast<long>(h));
              std::size_t rj = detail::reflect_index(sj, static_cast<long>(w));
              gx[ri * w + rj] += gy[i * wo + j];
            }
          }
        }
      }
    };
  }
  return out;
}

namespace detail {

template <class S>
void im2col(const S* img, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t ho, std::size_t wo, S* col) {
  // col is (c*kh*kw, ho*wo), row-major.
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        const S* plane = img + ch * h * w;
        S* dst = col + row * ho * wo;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const S* srow = plane + (oi * stride + ki) * w + kj;
          for (std::size_t oj = 0; oj < wo; ++oj)
            dst[oi * wo + oj] = srow[oj * stride];
        }
      }
}

template <class S>
void col2im_add(const S* col, std::size_t c, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::size_t stride,
                std::size_t ho, std::size_t wo, S* img) {
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        S* plane = img + ch * h * w;
        const S* src = col + row * ho * wo;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          S* drow = plane + (oi * stride + ki) * w + kj;
          for (std::size_t oj = 0; oj < wo; ++oj)
            drow[oj * stride] += src[oi * wo + oj];
        }
      }
}

}  // namespace detail

// Valid (unpadded) convolution; pair with pad2d for "same" layouts.
// x: (N, Cin, H, W), w: (Cout, Cin, Kh, Kw), b: (Cout) or undefined.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 std::size_t stride = 1) {
  detail::check_nchw("conv2d", x);
  if (w.ndim() != 4)
    throw ShapeError("conv2d: weight must be (Cout,Cin,Kh,Kw), got " +
                     shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " != weight channels " + std::to_string(w.dim(1)));
  if (stride == 0) throw UsageError("conv2d: stride must be positive");
  std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h < kh || wd < kw)
    throw ShapeError("conv2d: kernel larger than input " +
                     shape_str(x.shape()));
  std::size_t ho = (h - kh) / stride + 1, wo = (wd - kw) / stride + 1;
  bool has_bias = b.defined();
  if (has_bias && (b.ndim() != 1 || b.dim(0) != cout))
    throw ShapeError("conv2d: bias must be (Cout)");

  bool track =
      grad_mode() && (x.requires_grad() || w.requires_grad() ||
                      (has_bias && b.requires_grad()));
  std::vector<std::shared_ptr<Node<S>>> parents;
  if (track) {
    parents = {x.node(), w.node()};
    if (has_bias) parents.push_back(b.node());
  }
  Tensor<S> out = Tensor<S>::make({n, cout, ho, wo}, track, std::move(parents));

  std::size_t ckk = cin * kh * kw, hw = ho * wo;
  std::vector<std::vector<S>> cols;
  if (track) cols.reserve(n);
  std::vector<S> col(ckk * hw);
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t img = 0; img < n; ++img) {
    detail::im2col(xv.data() + img * cin * h * wd, cin, h, wd, kh, kw, stride,
                   ho, wo, col.data());
    // y = W_mat (cout, ckk) * col (ckk, hw)
    gemm(false, false, static_cast<int>(cout), static_cast<int>(hw),
         static_cast<int>(ckk), S(1), w.value().data(), static_cast<int>(ckk),
         col.data(), static_cast<int>(hw), S(0),
         yv.data() + img * cout * hw, static_cast<int>(hw));
    if (has_bias) {
      S* ybase = yv.data() + img * cout * hw;
      for (std::size_t co = 0; co < cout; ++co) {
        S bias = b.value()[co];
        for (std::size_t p = 0; p < hw; ++p) ybase[co * hw + p] += bias;
      }
    }
    if (track) cols.push_back(col);
  }

  if (track) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = has_bias ? b.node() : std::shared_ptr<Node<S>>{};
    out.node()->backward = [xn, wn, bn, cols = std::move(cols), n, cin, h, wd,
                            cout, kh, kw, stride, ho, wo, ckk,
                            hw](Node<S>& self) {
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t img = 0; img < n; ++img) {
          const S* g = self.grad.data() + img * cout * hw;
          for (std::size_t co = 0; co < cout; ++co) {
            S acc = S(0);
            for (std::size_t p = 0; p < hw; ++p) acc += g[co * hw + p];
            bn->grad[co] += acc;
          }
        }
      }
      if (wn->requires_grad) wn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      std::vector<S> dcol(xn->requires_grad ? ckk * hw : 0);
      for (std::size_t img = 0; img < n; ++img) {
        const S* g = self.grad.data() + img * cout * hw;
        if (wn->requires_grad) {
          // dW += dY (cout, hw) * col^T (hw, ckk)
          gemm(false, true, static_cast<int>(cout), static_cast<int>(ckk),
               static_cast<int>(hw), S(1), g, static_cast<int>(hw),
               cols[img].data(), static_cast<int>(hw), S(1), wn->grad.data(),
               static_cast<int>(ckk));
        }
        if (xn->requires_grad) {
          // dcol = W^T (ckk, cout) * dY (cout, hw)
          gemm(true, false, static_cast<int>(ckk), static_cast<int>(hw),
               static_cast<int>(cout), S(1), wn->value.data(),
               static_cast<int>(ckk), g, static_cast<int>(hw), S(0),
               dcol.data(), static_cast<int>(hw));
          detail::col2im_add(dcol.data(), cin, h, wd, kh, kw, stride, ho, wo,
                             xn->grad.data() + img * cin * h * wd);
        }
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w,
                 std::size_t stride = 1) {
  return conv2d(x, w, Tensor<S>{}, stride);
}

template <class S>
Tensor<S> upsample_nearest(const Tensor<S>& x, std::size_t factor) {
  detail::check_nchw("upsample_nearest", x);
  if (factor == 0) throw UsageError("upsample_nearest: factor must be >= 1");
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::size_t ho = h * factor, wo = w * factor;
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      {n, c, ho, wo}, track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t img = 0; img < n * c; ++img) {
    const S* src = xv.data() + img * h * w;
    S* dst = yv.data() + img * ho * wo;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        dst[i * wo + j] = src[(i / factor) * w + (j / factor)];
  }
  if (track) {
    out.node()->backward = [xn = x.node(), n, c, h, w, ho, wo,
                            factor](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t img = 0; img < n * c; ++img) {
        S* gx = xn->grad.data() + img * h * w;
        const S* gy = self.grad.data() + img * ho * wo;
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j)
            gx[(i / factor) * w + (j / factor)] += gy[i * wo + j];
      }
    };
  }
  return out;
}

// Per-(sample, channel) normalization over the spatial extent; no affine
// parameters, matching the parameter budget of the published model.
template <class S>
Tensor<S> instance_norm(const Tensor<S>& x, S eps = S(1e-5)) {
  detail::check_nchw("instance_norm", x);
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::size_t m = h * w;
  if (m == 0) throw ShapeError("instance_norm: empty spatial extent");
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      x.shape(), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  std::vector<S> inv_sigma(n * c);
  for (std::size_t g = 0; g < n * c; ++g) {
    const S* src = xv.data() + g * m;
    S* dst = yv.data() + g * m;
    S mean = S(0);
    for (std::size_t i = 0; i < m; ++i) mean += src[i];
    mean /= static_cast<S>(m);
    S var = S(0);
    for (std::size_t i = 0; i < m; ++i) {
      S d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<S>(m);
    S inv = S(1) / std::sqrt(var + eps);
    inv_sigma[g] = inv;
    for (std::size_t i = 0; i < m; ++i) dst[i] = (src[i] - mean) * inv;
  }
  if (track) {
    out.node()->backward = [xn = x.node(), inv_sigma = std::move(inv_sigma),
                            n, c, m](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      // With xhat = self.value: dx = inv_sigma * (dy - mean(dy)
      //                                           - xhat * mean(dy * xhat))
      for (std::size_t g = 0; g < n * c; ++g) {
        const S* gy = self.grad.data() + g * m;
        const S* xh = self.value.data() + g * m;
        S* gx = xn->grad.data() + g * m;
        S mg = S(0), mgx = S(0);
        for (std::size_t i = 0; i < m; ++i) {
          mg += gy[i];
          mgx += gy[i] * xh[i];
        }
        mg /= static_cast<S>(m);
        mgx /= static_cast<S>(m);
        S inv = inv_sigma[g];
        for (std::size_t i = 0; i < m; ++i)
          gx[i] += inv * (gy[i] - mg - xh[i] * mgx);
      }
    };
  }
  return out;
}

// Per-channel normalization over batch and spatial extents together
// (training-mode statistics; no running averages, no affine).
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, S eps = S(1e-5)) {
  detail::check_nchw("batch_norm", x);
  std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::size_t hw = h * w, m = n * hw;
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      x.shape(), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  std::vector<S> inv_sigma(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    S mean = S(0);
    for (std::size_t img = 0; img < n; ++img) {
      const S* src = xv.data() + (img * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) mean += src[i];
    }
    mean /= static_cast<S>(m);
    S var = S(0);
    for (std::size_t img = 0; img < n; ++img) {
      const S* src = xv.data() + (img * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        S d = src[i] - mean;
        var += d * d;
      }
    }
    var /= static_cast<S>(m);
    S inv = S(1) / std::sqrt(var + eps);
    inv_sigma[ch] = inv;
    for (std::size_t img = 0; img < n; ++img) {
      const S* src = xv.data() + (img * c + ch) * hw;
      S* dst = yv.data() + (img * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - mean) * inv;
    }
  }
  if (track) {
    out.node()->backward = [xn = x.node(), inv_sigma = std::move(inv_sigma),
                            n, c, hw, m](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        S mg = S(0), mgx = S(0);
        for (std::size_t img = 0; img < n; ++img) {
          const S* gy = self.grad.data() + (img * c + ch) * hw;
          const S* xh = self.value.data() + (img * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            mg += gy[i];
            mgx += gy[i] * xh[i];
          }
        }
        mg /= static_cast<S>(m);
        mgx /= static_cast<S>(m);
        S inv = inv_sigma[ch];
        for (std::size_t img = 0; img < n; ++img) {
          const S* gy = self.grad.data() + (img * c + ch) * hw;
          const S* xh = self.value.data() + (img * c + ch) * hw;
          S* gx = xn->grad.data() + (img * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i)
            gx[i] += inv * (gy[i] - mg - xh[i] * mgx);
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family (along one axis) and row normalization
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_extents(x, axis, outer, n, inner);
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      x.shape(), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      S hi = xv[(o * n) * inner + i];
      for (std::size_t j = 1; j < n; ++j)
        hi = std::max(hi, xv[(o * n + j) * inner + i]);
      S z = S(0);
      for (std::size_t j = 0; j < n; ++j) {
        S e = std::exp(xv[(o * n + j) * inner + i] - hi);
        yv[(o * n + j) * inner + i] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) yv[(o * n + j) * inner + i] /= z;
    }
  if (track) {
    out.node()->backward = [xn = x.node(), outer, n, inner](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          S dot = S(0);
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t idx = (o * n + j) * inner + i;
            dot += self.grad[idx] * self.value[idx];
          }
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t idx = (o * n + j) * inner + i;
            xn->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
          }
        }
    };
  }
  return out;
}

template <class S>
Tensor<S> log_softmax(const Tensor<S>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_extents(x, axis, outer, n, inner);
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      x.shape(), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      S hi = xv[(o * n) * inner + i];
      for (std::size_t j = 1; j < n; ++j)
        hi = std::max(hi, xv[(o * n + j) * inner + i]);
      S z = S(0);
      for (std::size_t j = 0; j < n; ++j)
        z += std::exp(xv[(o * n + j) * inner + i] - hi);
      S lz = hi + std::log(z);
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t idx = (o * n + j) * inner + i;
        yv[idx] = xv[idx] - lz;
      }
    }
  if (track) {
    out.node()->backward = [xn = x.node(), outer, n, inner](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          S gsum = S(0);
          for (std::size_t j = 0; j < n; ++j)
            gsum += self.grad[(o * n + j) * inner + i];
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t idx = (o * n + j) * inner + i;
            xn->grad[idx] +=
                self.grad[idx] - std::exp(self.value[idx]) * gsum;
          }
        }
    };
  }
  return out;
}

// Rows of a (R, E) matrix scaled to unit L2 norm; eps keeps the gradient
// finite at the origin.
template <class S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x, S eps = S(1e-12)) {
  if (x.ndim() != 2) throw ShapeError("l2_normalize_rows: expected (R,E)");
  std::size_t r = x.dim(0), e = x.dim(1);
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      x.shape(), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  std::vector<S> inv_norm(r);
  for (std::size_t i = 0; i < r; ++i) {
    S ss = S(0);
    for (std::size_t j = 0; j < e; ++j) ss += xv[i * e + j] * xv[i * e + j];
    S inv = S(1) / std::sqrt(ss + eps);
    inv_norm[i] = inv;
    for (std::size_t j = 0; j < e; ++j) yv[i * e + j] = xv[i * e + j] * inv;
  }
  if (track) {
    out.node()->backward = [xn = x.node(), inv_norm = std::move(inv_norm), r,
                            e](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const S* y = self.value.data() + i * e;
        const S* gy = self.grad.data() + i * e;
        S dot = S(0);
        for (std::size_t j = 0; j < e; ++j) dot += y[j] * gy[j];
        S inv = inv_norm[i];
        for (std::size_t j = 0; j < e; ++j)
          xn->grad[i * e + j] += inv * (gy[j] - y[j] * dot);
      }
    };
  }
  return out;
}

}  // namespace odegan::core
