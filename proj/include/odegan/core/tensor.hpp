// SPDX-License-Identifier: Apache-2.0
//
// Dense N-d tensors with a reverse-mode gradient tape. A Tensor is a shared
// handle onto a tape node; ops build new nodes that remember their parents
// and how to push gradients back to them. backward() walks the graph once in
// reverse topological order. Leaf gradients accumulate across backward calls
// until explicitly zeroed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "odegan/core/errors.hpp"
#include "odegan/core/rng.hpp"

namespace odegan::core {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Thread-local switch: when off, ops compute values only and build no graph.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first needed
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node<S>>> parents;
  // Reads this->grad, accumulates into parents' grad buffers.
  std::function<void(Node<S>&)> backward;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0), bool requires_grad = false) {
    n_ = std::make_shared<Node<S>>();
    n_->shape = std::move(shape);
    n_->value.assign(shape_numel(n_->shape), fill);
    n_->requires_grad = requires_grad;
    n_->leaf = true;
  }

  static Tensor scalar(S v) { return from_vector({1}, {v}); }

  static Tensor from_vector(Shape shape, std::vector<S> data,
                            bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("from_vector: data length " +
                       std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Rng& rng, Shape shape, S stddev = S(1), S mean = S(0)) {
    Tensor t(std::move(shape));
    for (S& v : t.value()) v = mean + stddev * static_cast<S>(rng.normal());
    return t;
  }

  static Tensor uniform(Rng& rng, Shape shape, S lo = S(0), S hi = S(1)) {
    Tensor t(std::move(shape));
    for (S& v : t.value())
      v = static_cast<S>(rng.uniform(static_cast<double>(lo),
                                     static_cast<double>(hi)));
    return t;
  }

  // Node used by op implementations: out value is zero-initialized.
  static Tensor make(Shape shape, bool track,
                     std::vector<std::shared_ptr<Node<S>>> parents = {}) {
    Tensor t(std::move(shape));
    t.n_->requires_grad = track;
    if (track) {
      t.n_->leaf = false;
      t.n_->parents = std::move(parents);
    }
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t numel() const { return n_->value.size(); }

  const std::vector<S>& value() const { return n_->value; }
  std::vector<S>& value() { return n_->value; }

  S item() const {
    if (numel() != 1)
      throw UsageError("item: tensor has " + std::to_string(numel()) +
                       " elements, expected 1");
    return n_->value[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    if (!n_->leaf)
      throw UsageError("set_requires_grad: only leaf tensors may be toggled");
    n_->requires_grad = v;
    return *this;
  }

  std::vector<S>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<S>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // New leaf with a copy of the values, cut off from the tape.
  Tensor detach() const {
    Tensor t;
    t.n_ = std::make_shared<Node<S>>();
    t.n_->shape = n_->shape;
    t.n_->value = n_->value;
    return t;
  }

  Tensor clone() const {
    Tensor t = detach();
    t.n_->requires_grad = n_->requires_grad && n_->leaf;
    return t;
  }

  const std::shared_ptr<Node<S>>& node() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

template <class S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t.value())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// Reverse-mode sweep from a scalar loss. Every requires_grad leaf reachable
// from the loss receives (accumulates) dloss/dleaf.
template <class S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward: loss must be a defined scalar tensor");
  Node<S>* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS over parents; list ends up topologically sorted
  // with every node after its parents.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<S>* n : order) {
    if (n->leaf)
      n->ensure_grad();  // keeps accumulated values
    else
      n->grad.assign(n->value.size(), S(0));
  }
  root->grad[0] += S(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Named parameter trees. std::map keeps iteration order deterministic.
// ---------------------------------------------------------------------------

template <class S>
using ParamTree = std::map<std::string, Tensor<S>>;

// Total element count of trainable entries.
template <class S>
std::size_t count_params(const ParamTree<S>& tree) {
  std::size_t n = 0;
  for (const auto& [path, t] : tree)
    if (t.requires_grad()) n += t.numel();
  return n;
}

template <class S>
void zero_grads(ParamTree<S>& tree) {
  for (auto& [path, t] : tree) t.zero_grad();
}

// Merge with a path prefix; entries alias the same underlying tensors.
template <class S>
void merge_tree(ParamTree<S>& dst, const std::string& prefix,
                const ParamTree<S>& src) {
  for (const auto& [path, t] : src) dst.emplace(prefix + path, t);
}

// FNV-1a over the raw parameter bytes, iteration order included. Used to
// detect unintended mutation.
template <class S>
std::uint64_t content_hash(const ParamTree<S>& tree) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t len) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [path, t] : tree) {
    mix(path.data(), path.size());
    mix(t.value().data(), t.numel() * sizeof(S));
  }
  return h;
}

}  // namespace odegan::core
