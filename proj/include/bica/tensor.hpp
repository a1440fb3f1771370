#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "bica/errors.hpp"

namespace bica {

// Reverse-mode autodiff over dense row-major tensors. The scalar type is a
// template parameter: float is the training arithmetic, double is the shadow
// mode used by the gradient-check harness.
//
// Grad recording is a thread-local mode so per-scene graphs built on worker
// threads stay independent.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  bool saved;
  NoGradGuard() : saved(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = saved; }
};

template <class T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  int param_id = -1;  // >= 0 when this node is a parameter leaf
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;  // reads grad, accumulates into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(t.count_(), T(0));
    t.n_->requires_grad = requires_grad && grad_enabled();
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad && grad_enabled();
    if (t.n_->value.size() != t.count_())
      throw validation_error("tensor: data length does not match shape");
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(size_t i) const { return n_->shape[i]; }
  int rows() const { return n_->shape.empty() ? 1 : n_->shape[0]; }
  int cols() const { return n_->shape.size() < 2 ? 1 : n_->shape[1]; }
  size_t size() const { return n_->value.size(); }

  std::vector<T>& val() { return n_->value; }
  const std::vector<T>& val() const { return n_->value; }
  std::vector<T>& grad() { return n_->grad; }
  const std::vector<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  int param_id() const { return n_->param_id; }

  T item() const {
    if (size() != 1) throw validation_error("tensor: item() on non-scalar");
    return n_->value[0];
  }

  T at(int r, int c) const { return n_->value[static_cast<size_t>(r) * cols() + c]; }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

  // Value copy detached from the graph.
  Tensor detach() const {
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = n_->shape;
    t.n_->value = n_->value;
    return t;
  }

  // Reverse accumulation from this scalar. Throws numeric_error when the loss
  // itself is not finite.
  void backward() const {
    if (size() != 1) throw validation_error("backward: loss must be scalar");
    if (!std::isfinite(static_cast<double>(n_->value[0])))
      throw numeric_error("backward: loss is not finite");
    if (!n_->requires_grad) return;

    // Iterative DFS topological order.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        TensorNode<T>* p = node->parents[idx++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* node = *it;
      if (node->backprop) {
        for (auto& p : node->parents)
          if (p->requires_grad) p->ensure_grad();
        node->backprop(*node);
      }
    }
  }

 private:
  size_t count_() const {
    size_t n = 1;
    for (int d : n_->shape) n *= static_cast<size_t>(d);
    return n;
  }

  std::shared_ptr<TensorNode<T>> n_;
};

template <class T>
inline Tensor<T> make_op(std::vector<int> shape, std::vector<Tensor<T>> parents,
                         std::function<void(TensorNode<T>&)> backprop) {
  bool rg = false;
  if (grad_enabled())
    for (const auto& p : parents) rg = rg || p.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(std::move(shape), rg);
  if (rg) {
    for (const auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backprop = std::move(backprop);
  }
  return out;
}

}  // namespace bica
