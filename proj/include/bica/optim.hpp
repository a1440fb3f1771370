#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bica/param.hpp"

namespace bica {

// lr(t) for t in [0, total]; cosine anneal from lr_start to lr_end, or
// constant lr_start when total == 0.
struct LrSchedule {
  double lr_start = 0.0;
  double lr_end = 0.0;
  int64_t total = 0;

  double at(int64_t t) const {
    if (total <= 0) return lr_start;
    if (t >= total) return lr_end;
    const double frac = static_cast<double>(t) / static_cast<double>(total);
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(M_PI * frac));
  }
};

inline LrSchedule cosine_schedule(double lr_start, double lr_end, int64_t total) {
  return LrSchedule{lr_start, lr_end, total};
}

inline LrSchedule constant_schedule(double lr) { return LrSchedule{lr, lr, 0}; }

struct OptimGroup {
  std::string name;
  std::vector<int> param_ids;
  LrSchedule schedule;
};

// Per-parameter first/second moment plus the shared step counter; this is the
// exact payload the checkpoint writer serializes.
template <class T>
struct OptimizerState {
  int64_t step = 0;
  std::vector<std::vector<T>> m;  // indexed by param id
  std::vector<std::vector<T>> v;
};

// AdamW with decoupled weight decay and global-norm gradient clipping. The
// clip norm spans every parameter the optimizer owns, matching a single
// clip-then-step over the whole model.
template <class T>
class AdamW {
 public:
  AdamW(const ParamStore<T>& store, std::vector<OptimGroup> groups, double weight_decay,
        double clip_norm, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)),
        weight_decay_(weight_decay),
        clip_norm_(clip_norm),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    state_.m.resize(static_cast<size_t>(store.count()));
    state_.v.resize(static_cast<size_t>(store.count()));
    for (const auto& g : groups_)
      for (int id : g.param_ids) {
        const size_t n = store.at(id).value.size();
        state_.m[static_cast<size_t>(id)].assign(n, T(0));
        state_.v[static_cast<size_t>(id)].assign(n, T(0));
      }
  }

  // Scales grads in place when the global norm exceeds the clip threshold,
  // then applies one AdamW update to every trainable owned parameter.
  void step(ParamStore<T>& store, std::vector<std::vector<T>>& grads) {
    double sq = 0.0;
    for (const auto& g : groups_)
      for (int id : g.param_ids) {
        if (!store.at(id).trainable) continue;
        for (T gv : grads[static_cast<size_t>(id)]) sq += static_cast<double>(gv) * static_cast<double>(gv);
      }
    const double norm = std::sqrt(sq);
    const double scale = (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;

    state_.step += 1;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));

    for (const auto& grp : groups_) {
      const double lr = grp.schedule.at(state_.step - 1);
      for (int id : grp.param_ids) {
        auto& par = store.at(id);
        if (!par.trainable) continue;
        auto& m = state_.m[static_cast<size_t>(id)];
        auto& v = state_.v[static_cast<size_t>(id)];
        auto& g = grads[static_cast<size_t>(id)];
        for (size_t k = 0; k < par.value.size(); ++k) {
          const double gv = static_cast<double>(g[k]) * scale;
          m[k] = static_cast<T>(beta1_ * m[k] + (1.0 - beta1_) * gv);
          v[k] = static_cast<T>(beta2_ * v[k] + (1.0 - beta2_) * gv * gv);
          const double mhat = static_cast<double>(m[k]) / bc1;
          const double vhat = static_cast<double>(v[k]) / bc2;
          const double upd = mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * static_cast<double>(par.value[k]);
          par.value[k] = static_cast<T>(par.value[k] - lr * upd);
        }
      }
    }
  }

  int64_t step_count() const { return state_.step; }
  double group_lr(size_t gi) const { return groups_.at(gi).schedule.at(state_.step); }
  const std::vector<OptimGroup>& groups() const { return groups_; }
  OptimizerState<T>& state() { return state_; }
  const OptimizerState<T>& state() const { return state_; }

 private:
  std::vector<OptimGroup> groups_;
  OptimizerState<T> state_;
  double weight_decay_;
  double clip_norm_;
  double beta1_, beta2_, eps_;
};

}  // namespace bica
