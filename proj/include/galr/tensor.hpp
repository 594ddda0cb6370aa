#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "galr/common.hpp"

namespace galr {

enum class Dtype { f32, f64 };

template <typename S>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::f32;
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::f64;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename S>
class Tensor;

/// One recorded operation: the parent tensors it consumed and a closure that
/// routes the output's gradient to them. The graph these records form is
/// acyclic by construction (an op only refers to tensors that already exist)
/// and backward() visits each record exactly once.
template <typename S>
struct Node {
  std::vector<Tensor<S>> parents;
  std::function<void(Tensor<S>&)> backward;
  bool consumed = false;
};

/// Values live in a shared storage block so that all copies of a tensor see
/// the same data, the same requires_grad flag and, once allocated, the same
/// gradient buffer. This is what lets a model hand tensor copies to the
/// graph while the optimizer updates the named parameters in place.
template <typename S>
struct TensorStorage {
  std::vector<S> data;
  std::vector<S> grad;  // empty until first needed
  bool requires_grad = false;
};

/// Dense row-major tensor, optionally a node in a differentiation graph.
/// Tensors are treated as immutable after construction; the only sanctioned
/// in-place mutation is the optimizer's parameter update.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), storage_(std::make_shared<TensorStorage<S>>()) {
    storage_->data.assign(static_cast<std::size_t>(shape_numel(shape_)), S(0));
    storage_->requires_grad = requires_grad;
  }

  static Tensor from(std::vector<S> values, Shape shape, bool requires_grad = false) {
    require(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
            Error::Kind::dimension,
            "tensor data length " + std::to_string(values.size()) +
                " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.storage_ = std::make_shared<TensorStorage<S>>();
    t.storage_->data = std::move(values);
    t.storage_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.storage_->data.begin(), t.storage_->data.end(), value);
    return t;
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(1), requires_grad);
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return from({value}, {1}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(storage_->data.size()); }

  S* data() { return storage_->data.data(); }
  const S* data() const { return storage_->data.data(); }
  std::vector<S>& values() { return storage_->data; }
  const std::vector<S>& values() const { return storage_->data; }

  S item() const {
    require(numel() == 1, Error::Kind::usage, "item() on non-scalar tensor");
    return storage_->data[0];
  }

  bool requires_grad() const { return storage_ && storage_->requires_grad; }
  void set_requires_grad(bool on) { storage_->requires_grad = on; }

  bool has_grad() const { return defined() && !storage_->grad.empty(); }
  void ensure_grad() {
    if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), S(0));
  }
  void zero_grad() {
    if (!storage_->grad.empty()) std::fill(storage_->grad.begin(), storage_->grad.end(), S(0));
  }
  S* grad() { return storage_->grad.data(); }
  const S* grad() const { return storage_->grad.data(); }
  std::vector<S>& grad_vec() { return storage_->grad; }
  const std::vector<S>& grad_vec() const { return storage_->grad; }

  Dtype dtype() const { return dtype_of<S>::value; }

  /// Shares storage; only the shape differs. Used by reshape.
  Tensor with_shape(Shape shape) const {
    require(shape_numel(shape) == numel(), Error::Kind::dimension,
            "reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    t.node.reset();
    return t;
  }

  std::shared_ptr<Node<S>> node;

 private:
  Shape shape_;
  std::shared_ptr<TensorStorage<S>> storage_;
};

template <typename S>
void debug_check(const Tensor<S>& t, const char* op_name) {
  if (!debug_check_finite_enabled()) return;
  for (const S v : t.values()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw Error(Error::Kind::numeric,
                  std::string("non-finite value produced by op '") + op_name + "'");
    }
  }
}

namespace detail {

/// Attaches an autodiff record to `out` when recording is active. Callers
/// report their own counter bumps (reshape materializes nothing, everything
/// else counts its output).
template <typename S, typename F>
Tensor<S> finish_op(const char* name, Tensor<S> out, std::vector<Tensor<S>> parents,
                    F&& backward) {
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        needs_grad = true;
        break;
      }
    }
  }
  if (needs_grad) {
    out.set_requires_grad(true);
    out.node = std::make_shared<Node<S>>();
    out.node->parents = std::move(parents);
    out.node->backward = std::forward<F>(backward);
  }
  debug_check(out, name);
  return out;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// requires_grad tensor reachable through the recorded graph; afterwards the
/// graph is consumed (records cleared) and cannot be replayed.
template <typename S>
void backward(Tensor<S>& loss) {
  require(loss.defined() && loss.numel() == 1, Error::Kind::usage,
          "backward() expects a scalar loss tensor");
  require(loss.node != nullptr, Error::Kind::usage,
          "backward() on a tensor with no recorded graph");
  require(!loss.node->consumed, Error::Kind::usage,
          "backward() on an already-consumed graph");

  // Iterative post-order DFS; `order` ends up topologically sorted so the
  // reverse walk sees every node after all of its consumers.
  std::vector<Tensor<S>> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Tensor<S>, std::size_t>> stack;
  stack.emplace_back(loss, 0);
  visited.insert(loss.node.get());
  while (!stack.empty()) {
    auto& [t, next_child] = stack.back();
    Node<S>* n = t.node.get();
    bool descended = false;
    while (next_child < n->parents.size()) {
      Tensor<S>& p = n->parents[next_child++];
      if (p.node && !visited.count(p.node.get())) {
        visited.insert(p.node.get());
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended && next_child >= n->parents.size()) {
      order.push_back(t);
      stack.pop_back();
    }
  }

  loss.ensure_grad();
  loss.grad_vec()[0] += S(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor<S>& t = *it;
    t.ensure_grad();
    for (auto& p : t.node->parents) {
      if (p.requires_grad()) p.ensure_grad();
    }
    if (t.node->backward) t.node->backward(t);
  }

  // Consume: drop the records so intermediate activations can be freed and a
  // second sweep is rejected.
  for (auto& t : order) {
    t.node->backward = nullptr;
    t.node->parents.clear();
    t.node->consumed = true;
  }
}

/// Longest chain of op records above `t`. This is the structural
/// "sequential path length" of the computation: recurrent layers grow it
/// linearly in their sequence length, attention keeps it constant.
template <typename S>
std::int64_t graph_depth(const Tensor<S>& t) {
  if (!t.node) return 0;
  std::unordered_map<Node<S>*, std::int64_t> depth;
  std::vector<std::pair<Tensor<S>, std::size_t>> stack;
  stack.emplace_back(t, 0);
  while (!stack.empty()) {
    auto& [cur, next_child] = stack.back();
    Node<S>* n = cur.node.get();
    if (depth.count(n)) {
      stack.pop_back();
      continue;
    }
    bool descended = false;
    while (next_child < n->parents.size()) {
      Tensor<S>& p = n->parents[next_child++];
      if (p.node && !depth.count(p.node.get())) {
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (descended) continue;
    if (next_child >= n->parents.size()) {
      std::int64_t best = 0;
      for (auto& p : n->parents) {
        if (p.node) best = std::max(best, depth[p.node.get()]);
      }
      depth[n] = best + 1;
      stack.pop_back();
    }
  }
  return depth[t.node.get()];
}

}  // namespace galr
