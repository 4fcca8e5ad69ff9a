// SPDX-License-Identifier: Apache-2.0
//
// Differentiable op vocabulary: pointwise math, reductions, shape surgery and
// matrix products. Convolution and normalization live in nn.hpp.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "odegan/core/gemm.hpp"
#include "odegan/core/tensor.hpp"

namespace odegan::core {

namespace detail {

template <class S>
inline void check_same_shape(const char* op, const Tensor<S>& a,
                             const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
inline std::vector<std::shared_ptr<Node<S>>> parents_of(const Tensor<S>& a) {
  return {a.node()};
}

template <class S>
inline std::vector<std::shared_ptr<Node<S>>> parents_of(const Tensor<S>& a,
                                                        const Tensor<S>& b) {
  return {a.node(), b.node()};
}

// Generic unary pointwise op. DFx computes the local derivative from the
// input and output values.
template <class S, class F, class DF>
Tensor<S> unary_op(const Tensor<S>& x, F f, DF df) {
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      x.shape(), track,
      track ? parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = f(xv[i]);
  if (track) {
    out.node()->backward = [xn = x.node(), df](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.value.size(); ++i)
        xn->grad[i] += self.grad[i] * df(xn->value[i], self.value[i]);
    };
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise (same shape) and scalar forms
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  bool track = grad_mode() && (a.requires_grad() || b.requires_grad());
  Tensor<S> out = Tensor<S>::make(
      a.shape(), track,
      track ? detail::parents_of(a, b)
            : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  if (track) {
    out.node()->backward = [an = a.node(), bn = b.node()](Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  bool track = grad_mode() && (a.requires_grad() || b.requires_grad());
  Tensor<S> out = Tensor<S>::make(
      a.shape(), track,
      track ? detail::parents_of(a, b)
            : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] - bv[i];
  if (track) {
    out.node()->backward = [an = a.node(), bn = b.node()](Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] -= self.grad[i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  bool track = grad_mode() && (a.requires_grad() || b.requires_grad());
  Tensor<S> out = Tensor<S>::make(
      a.shape(), track,
      track ? detail::parents_of(a, b)
            : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  if (track) {
    out.node()->backward = [an = a.node(), bn = b.node()](Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("div", a, b);
  bool track = grad_mode() && (a.requires_grad() || b.requires_grad());
  Tensor<S> out = Tensor<S>::make(
      a.shape(), track,
      track ? detail::parents_of(a, b)
            : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] / bv[i];
  if (track) {
    out.node()->backward = [an = a.node(), bn = b.node()](Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] / bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] -=
              self.grad[i] * self.value[i] / bn->value[i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S s) {
  return detail::unary_op(
      a, [s](S v) { return v + s; }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S s) {
  return detail::unary_op(
      a, [s](S v) { return v * s; }, [s](S, S) { return s; });
}

// s - a
template <class S>
Tensor<S> scalar_sub(S s, const Tensor<S>& a) {
  return detail::unary_op(
      a, [s](S v) { return s - v; }, [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, S(-1));
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> exp_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> log_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <class S>
Tensor<S> abs_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::abs(v); },
      [](S v, S) { return v >= S(0) ? S(1) : S(-1); });
}

template <class S>
Tensor<S> square(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope) {
  return detail::unary_op(
      x, [slope](S v) { return v > S(0) ? v : slope * v; },
      [slope](S v, S) { return v > S(0) ? S(1) : slope; });
}

template <class S>
Tensor<S> tanh_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::tanh(v); },
      [](S, S y) { return S(1) - y * y; });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op(
      x,
      [](S v) {
        return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                         : std::exp(v) / (S(1) + std::exp(v));
      },
      [](S, S y) { return y * (S(1) - y); });
}

// log(1 + e^x), overflow-safe.
template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  return detail::unary_op(
      x,
      [](S v) {
        return v > S(0) ? v + std::log1p(std::exp(-v))
                        : std::log1p(std::exp(v));
      },
      [](S v, S) {
        return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                         : std::exp(v) / (S(1) + std::exp(v));
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      {1}, track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  S acc = S(0);
  for (S v : x.value()) acc += v;
  out.value()[0] = acc;
  if (track) {
    out.node()->backward = [xn = x.node()](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += self.grad[0];
    };
  }
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return mul_scalar(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

template <class S>
Tensor<S> max_all(const Tensor<S>& x) {
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      {1}, track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < xv.size(); ++i)
    if (xv[i] > xv[arg]) arg = i;
  out.value()[0] = xv[arg];
  if (track) {
    out.node()->backward = [xn = x.node(), arg](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      xn->grad[arg] += self.grad[0];
    };
  }
  return out;
}

namespace detail {
template <class S>
inline void axis_extents(const Tensor<S>& x, std::size_t axis,
                         std::size_t& outer, std::size_t& n,
                         std::size_t& inner) {
  if (axis >= x.ndim())
    throw UsageError("reduce: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  n = x.dim(axis);
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}
}  // namespace detail

template <class S>
Tensor<S> sum_axis(const Tensor<S>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_extents(x, axis, outer, n, inner);
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      detail::drop_axis(x.shape(), axis), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i)
        yv[o * inner + i] += xv[(o * n + j) * inner + i];
  if (track) {
    out.node()->backward = [xn = x.node(), outer, n, inner](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t i = 0; i < inner; ++i)
            xn->grad[(o * n + j) * inner + i] += self.grad[o * inner + i];
    };
  }
  return out;
}

template <class S>
Tensor<S> mean_axis(const Tensor<S>& x, std::size_t axis) {
  return mul_scalar(sum_axis(x, axis), S(1) / static_cast<S>(x.dim(axis)));
}

template <class S>
Tensor<S> max_axis(const Tensor<S>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_extents(x, axis, outer, n, inner);
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      detail::drop_axis(x.shape(), axis), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  std::vector<std::size_t> argmax(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = (o * n) * inner + i;
      for (std::size_t j = 1; j < n; ++j) {
        std::size_t idx = (o * n + j) * inner + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      yv[o * inner + i] = xv[best];
      argmax[o * inner + i] = best;
    }
  if (track) {
    out.node()->backward = [xn = x.node(),
                            argmax = std::move(argmax)](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[argmax[i]] += self.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      std::move(new_shape), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  out.value() = x.value();
  if (track) {
    out.node()->backward = [xn = x.node()](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[i] += self.grad[i];
    };
  }
  return out;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& x) {
  if (x.ndim() != 2) throw ShapeError("transpose2d: expected a 2-d tensor");
  std::size_t m = x.dim(0), n = x.dim(1);
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      {n, m}, track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) yv[j * m + i] = xv[i * n + j];
  if (track) {
    out.node()->backward = [xn = x.node(), m, n](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          xn->grad[i * n + j] += self.grad[j * m + i];
    };
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, std::size_t axis) {
  if (xs.empty()) throw UsageError("concat: empty input list");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = s0;
  std::size_t total = 0;
  for (const auto& t : xs) {
    if (t.ndim() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && t.dim(d) != s0[d])
        throw ShapeError("concat: shape mismatch on non-concat axis");
    total += t.dim(axis);
  }
  out_shape[axis] = total;

  bool track = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  if (grad_mode()) {
    for (const auto& t : xs) track = track || t.requires_grad();
    if (track)
      for (const auto& t : xs) parents.push_back(t.node());
  }
  Tensor<S> out = Tensor<S>::make(out_shape, track, std::move(parents));

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  auto& yv = out.value();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : xs) {
    offsets.push_back(offset);
    std::size_t na = t.dim(axis);
    const auto& xv = t.value();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < na; ++j)
        for (std::size_t i = 0; i < inner; ++i)
          yv[(o * total + offset + j) * inner + i] =
              xv[(o * na + j) * inner + i];
    offset += na;
  }
  if (track) {
    std::vector<std::size_t> axis_sizes;
    for (const auto& t : xs) axis_sizes.push_back(t.dim(axis));
    out.node()->backward = [outer, inner, total, offsets,
                            axis_sizes](Node<S>& self) {
      for (std::size_t p = 0; p < self.parents.size(); ++p) {
        Node<S>* xn = self.parents[p].get();
        if (!xn->requires_grad) continue;
        xn->ensure_grad();
        std::size_t na = axis_sizes[p], off = offsets[p];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < na; ++j)
            for (std::size_t i = 0; i < inner; ++i)
              xn->grad[(o * na + j) * inner + i] +=
                  self.grad[(o * total + off + j) * inner + i];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, std::size_t axis, std::size_t start,
                std::size_t len) {
  if (axis >= x.ndim()) throw ShapeError("slice: axis out of range");
  if (start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds axis extent " +
                     std::to_string(x.dim(axis)));
  std::size_t outer, n, inner;
  detail::axis_extents(x, axis, outer, n, inner);
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      out_shape, track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t i = 0; i < inner; ++i)
        yv[(o * len + j) * inner + i] = xv[(o * n + start + j) * inner + i];
  if (track) {
    out.node()->backward = [xn = x.node(), outer, n, inner, start,
                            len](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
          for (std::size_t i = 0; i < inner; ++i)
            xn->grad[(o * n + start + j) * inner + i] +=
                self.grad[(o * len + j) * inner + i];
    };
  }
  return out;
}

// out.value[i] = x.value[indices[i]]; backward scatter-adds. The generic
// gather that patch sampling and diagonal removal build on.
template <class S>
Tensor<S> gather_flat(const Tensor<S>& x,
                      std::vector<std::size_t> indices, Shape out_shape) {
  if (shape_numel(out_shape) != indices.size())
    throw ShapeError("gather_flat: index count does not match output shape");
  for (std::size_t idx : indices)
    if (idx >= x.numel())
      throw UsageError("gather_flat: index " + std::to_string(idx) +
                       " out of range");
  bool track = grad_mode() && x.requires_grad();
  Tensor<S> out = Tensor<S>::make(
      std::move(out_shape), track,
      track ? detail::parents_of(x) : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < indices.size(); ++i) yv[i] = xv[indices[i]];
  if (track) {
    out.node()->backward = [xn = x.node(),
                            indices = std::move(indices)](Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i)
        xn->grad[indices[i]] += self.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul: expected 2-d tensors");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  bool track = grad_mode() && (a.requires_grad() || b.requires_grad());
  Tensor<S> out = Tensor<S>::make(
      {m, n}, track,
      track ? detail::parents_of(a, b)
            : std::vector<std::shared_ptr<Node<S>>>{});
  gemm(false, false, static_cast<int>(m), static_cast<int>(n),
       static_cast<int>(k), S(1), a.value().data(), static_cast<int>(k),
       b.value().data(), static_cast<int>(n), S(0), out.value().data(),
       static_cast<int>(n));
  if (track) {
    out.node()->backward = [an = a.node(), bn = b.node(), m, k,
                            n](Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        // dA += dC * B^T
        gemm(false, true, static_cast<int>(m), static_cast<int>(k),
             static_cast<int>(n), S(1), self.grad.data(), static_cast<int>(n),
             bn->value.data(), static_cast<int>(n), S(1), an->grad.data(),
             static_cast<int>(k));
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB += A^T * dC
        gemm(true, false, static_cast<int>(k), static_cast<int>(n),
             static_cast<int>(m), S(1), an->value.data(), static_cast<int>(k),
             self.grad.data(), static_cast<int>(n), S(1), bn->grad.data(),
             static_cast<int>(n));
      }
    };
  }
  return out;
}

// x: (R, K), v: (K) broadcast-added to every row.
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  if (x.ndim() != 2 || v.ndim() != 1 || v.dim(0) != x.dim(1))
    throw ShapeError("add_rowvec: expected (R,K) plus (K), got " +
                     shape_str(x.shape()) + " and " + shape_str(v.shape()));
  std::size_t r = x.dim(0), k = x.dim(1);
  bool track = grad_mode() && (x.requires_grad() || v.requires_grad());
  Tensor<S> out = Tensor<S>::make(
      x.shape(), track,
      track ? detail::parents_of(x, v)
            : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& xv = x.value();
  const auto& vv = v.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) yv[i * k + j] = xv[i * k + j] + vv[j];
  if (track) {
    out.node()->backward = [xn = x.node(), vn = v.node(), r,
                            k](Node<S>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          xn->grad[i] += self.grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < k; ++j)
            vn->grad[j] += self.grad[i * k + j];
      }
    };
  }
  return out;
}

// a: (R, E), b: (R, K, E) -> (R, K); out[r,k] = sum_e a[r,e] * b[r,k,e].
template <class S>
Tensor<S> batched_rowdot(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(1) != b.dim(2))
    throw ShapeError("batched_rowdot: expected (R,E) and (R,K,E), got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::size_t r = a.dim(0), e = a.dim(1), k = b.dim(1);
  bool track = grad_mode() && (a.requires_grad() || b.requires_grad());
  Tensor<S> out = Tensor<S>::make(
      {r, k}, track,
      track ? detail::parents_of(a, b)
            : std::vector<std::shared_ptr<Node<S>>>{});
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = out.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      S acc = S(0);
      for (std::size_t t = 0; t < e; ++t)
        acc += av[i * e + t] * bv[(i * k + j) * e + t];
      yv[i * k + j] = acc;
    }
  if (track) {
    out.node()->backward = [an = a.node(), bn = b.node(), r, e,
                            k](Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            S g = self.grad[i * k + j];
            for (std::size_t t = 0; t < e; ++t)
              an->grad[i * e + t] += g * bn->value[(i * k + j) * e + t];
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            S g = self.grad[i * k + j];
            for (std::size_t t = 0; t < e; ++t)
              bn->grad[(i * k + j) * e + t] += g * an->value[i * e + t];
          }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Operator sugar
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
  return mul(a, b);
}
template <class S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) {
  return div(a, b);
}
template <class S>
Tensor<S> operator+(const Tensor<S>& a, S s) {
  return add_scalar(a, s);
}
template <class S>
Tensor<S> operator-(const Tensor<S>& a, S s) {
  return add_scalar(a, -s);
}
template <class S>
Tensor<S> operator*(const Tensor<S>& a, S s) {
  return mul_scalar(a, s);
}
template <class S>
Tensor<S> operator*(S s, const Tensor<S>& a) {
  return mul_scalar(a, s);
}
template <class S>
Tensor<S> operator-(const Tensor<S>& a) {
  return neg(a);
}

}  // namespace odegan::core
