#pragma once

#include "bica/datasynth.hpp"

namespace bica {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int n_checked = 0;
  std::string worst_param;
  size_t worst_coord = 0;
};

// central finite differences against the analytic gradient of the full scene
// loss (detection + MLE caption) on a generated 2-object scene, in doubles.
// Discrete choices (FPS, groupings, matchings) are recorded on the analytic
// pass and replayed on every probe so the two sides differentiate the same
// piecewise branch.
inline GradCheckReport fd_gradcheck(ModelConfig c, uint64_t scene_seed, uint64_t probe_seed,
                                    int n_samples, double h) {
  if (c.vocab_size == 0) c.vocab_size = builtin_vocabulary().size();
  validate_config(c);
  require(n_samples > 0, "gradcheck: n_samples must be positive");
  require(h > 0.0, "gradcheck: step size must be positive");

  ParamStore<double> store;
  Rng rng(c.seed);
  register_model_params(store, c, rng);

  auto sample = make_scene(scene_seed, 2);
  auto xyz = sample.points<double>();
  auto rgb = sample.colors<double>();
  for (const auto& refs : sample.gt.refs)
    for (const auto& ref : refs)
      require(static_cast<int>(ref.size()) < c.t_max, "gradcheck: caption exceeds t_max");

  DiscreteCache cache;
  Workspace<double> ws(store);
  auto out = model_forward(ws, c, xyz, rgb, &cache);
  auto sl = scene_loss(ws, c, out, sample.gt, CaptionMode::mle, nullptr, Vocabulary::eos_id, 0,
                       &cache);
  sl.total.backward();
  auto acc = make_grad_buffers(store);
  ws.merge_grads(acc);

  auto value_only = [&]() {
    NoGradGuard ng;
    cache.start_replay();
    Workspace<double> w2(store);
    auto o2 = model_forward(w2, c, xyz, rgb, &cache);
    auto s2 = scene_loss(w2, c, o2, sample.gt, CaptionMode::mle, nullptr, Vocabulary::eos_id, 0,
                         &cache);
    return static_cast<double>(s2.total.item());
  };

  Rng probe(probe_seed);
  GradCheckReport r;
  while (r.n_checked < n_samples) {
    const int id = static_cast<int>(probe.next_int(store.count()));
    auto& p = store.at(id);
    if (!p.trainable || p.value.empty()) continue;
    const size_t off = probe.next_int(static_cast<int>(p.value.size()));
    const double orig = p.value[off];
    p.value[off] = orig + h;
    const double lp = value_only();
    p.value[off] = orig - h;
    const double lm = value_only();
    p.value[off] = orig;
    const double gf = (lp - lm) / (2.0 * h);
    const double ga = acc[static_cast<size_t>(id)][off];
    const double rel = std::abs(ga - gf) / std::max(1e-4, std::abs(ga) + std::abs(gf));
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_param = p.name;
      r.worst_coord = off;
    }
    ++r.n_checked;
  }
  return r;
}

}  // namespace bica
