#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "bica/rng.hpp"
#include "bica/tensor.hpp"

namespace bica {

template <class T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  bool trainable = true;
};

// Flat registry of named parameters. Registration order fixes the parameter
// ids, which in turn fix checkpoint layout and gradient merge order.
template <class T>
class ParamStore {
 public:
  int add(std::string name, std::vector<int> shape, std::vector<T> value, bool trainable) {
    if (index_.count(name)) throw validation_error("param store: duplicate name " + name);
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    if (value.size() != n) throw validation_error("param store: bad init length for " + name);
    const int id = static_cast<int>(params_.size());
    index_[name] = id;
    params_.push_back(Param<T>{std::move(name), std::move(shape), std::move(value), trainable});
    return id;
  }

  int add_uniform(const std::string& name, std::vector<int> shape, int fan_in, Rng& rng) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(shape), std::move(v), true);
  }

  int add_zeros(const std::string& name, std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return add(name, std::move(shape), std::vector<T>(n, T(0)), true);
  }

  int add_const(const std::string& name, std::vector<int> shape, T fill) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return add(name, std::move(shape), std::vector<T>(n, fill), true);
  }

  int add_gaussian(const std::string& name, std::vector<int> shape, double sigma, Rng& rng,
                   bool trainable) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal() * sigma);
    return add(name, std::move(shape), std::move(v), trainable);
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Param<T>& at(int id) { return params_.at(static_cast<size_t>(id)); }
  const Param<T>& at(int id) const { return params_.at(static_cast<size_t>(id)); }
  int count() const { return static_cast<int>(params_.size()); }

  size_t total_scalars() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
  }

  std::vector<int> ids_with_prefix(const std::string& prefix) const {
    std::vector<int> out;
    for (int i = 0; i < count(); ++i)
      if (params_[static_cast<size_t>(i)].name.rfind(prefix, 0) == 0) out.push_back(i);
    return out;
  }

  const std::vector<Param<T>>& params() const { return params_; }
  std::vector<Param<T>>& params() { return params_; }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, int> index_;
};

// One Workspace per forward graph. Each parameter becomes a leaf tensor the
// first time the graph touches it; after backward the accumulated leaf grads
// are merged into a caller-owned buffer. Merging per scene in fixed scene
// order keeps results independent of how scenes were scheduled on threads.
template <class T>
class Workspace {
 public:
  explicit Workspace(const ParamStore<T>& store) : store_(&store) {
    leaves_.resize(static_cast<size_t>(store.count()));
  }

  Tensor<T> p(int id) {
    auto& slot = leaves_.at(static_cast<size_t>(id));
    if (!slot.defined()) {
      const auto& par = store_->at(id);
      slot = Tensor<T>::from(par.shape, par.value);
      // set directly: a leaf first touched inside a no-grad region (e.g. by a
      // decode loop) must still carry gradients for later grad-mode ops
      slot.node()->requires_grad = par.trainable;
      slot.node()->param_id = id;
    }
    return slot;
  }

  Tensor<T> p(const std::string& name) {
    const int id = store_->find(name);
    if (id < 0) throw validation_error("workspace: unknown parameter " + name);
    return p(id);
  }

  // acc[id] += leaf grad, ascending id order.
  void merge_grads(std::vector<std::vector<T>>& acc) const {
    for (size_t id = 0; id < leaves_.size(); ++id) {
      const auto& leaf = leaves_[id];
      if (!leaf.defined() || !leaf.requires_grad() || leaf.grad().empty()) continue;
      auto& dst = acc[id];
      if (dst.size() != leaf.grad().size()) dst.assign(leaf.grad().size(), T(0));
      for (size_t k = 0; k < dst.size(); ++k) dst[k] += leaf.grad()[k];
    }
  }

 private:
  const ParamStore<T>* store_;
  std::vector<Tensor<T>> leaves_;
};

template <class T>
inline std::vector<std::vector<T>> make_grad_buffers(const ParamStore<T>& store) {
  std::vector<std::vector<T>> acc(static_cast<size_t>(store.count()));
  for (int i = 0; i < store.count(); ++i)
    acc[static_cast<size_t>(i)].assign(store.at(i).value.size(), T(0));
  return acc;
}

}  // namespace bica
