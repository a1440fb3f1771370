#pragma once

#include <filesystem>
#include <iomanip>
#include <limits>
#include <optional>
#include <thread>

#include "bica/checkpoint.hpp"
#include "bica/datasynth.hpp"
#include "bica/optim.hpp"

namespace bica {

// deterministic per-epoch scene order; pure in (seed, stage, epoch) so a
// resumed run replays the exact same batches
inline std::vector<int> epoch_order(uint64_t seed, int stage, int64_t epoch, int n) {
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng r = Rng(seed).fork(static_cast<uint64_t>(stage) * 0x10001ULL + static_cast<uint64_t>(epoch));
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(r.next_int(i + 1))]);
  return order;
}

struct StageSpec {
  int stage = 1;
  int epochs = 0;
  int batch = 1;
  CaptionMode mode = CaptionMode::none;
};

inline StageSpec stage_spec(const ModelConfig& c, int stage) {
  switch (stage) {
    case 1: return {1, c.epochs1, c.batch1, CaptionMode::none};
    case 2: return {2, c.epochs2, c.batch2, CaptionMode::mle};
    case 3: return {3, c.epochs3, c.batch3, CaptionMode::scst};
    default: throw validation_error("trainer: stage must be 1, 2 or 3");
  }
}

// run f(0..n-1), on worker threads when threads > 1, results landing in
// index-addressed slots either way. The lowest-index exception is rethrown so
// failures look the same at any thread count.
template <class F>
void run_indexed(int threads, int n, F&& f) {
  const int workers = std::min(threads, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errs(static_cast<size_t>(n));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w]() {
      for (int i = w; i < n; i += workers) {
        try {
          f(i);
        } catch (...) {
          errs[static_cast<size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

inline std::vector<int> ids_for_prefixes(const ParamStore<float>& store,
                                         const std::vector<std::string>& prefixes) {
  std::vector<int> ids;
  for (const auto& p : prefixes)
    for (int id : store.ids_with_prefix(p)) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// optimizer groups per stage: stage 1 anneals the detector, stage 2 adds the
// caption path with a fresh schedule while the detector crawls, stage 3 tunes
// the caption path only (the detector is frozen by the caller)
inline std::vector<OptimGroup> stage_groups(const ParamStore<float>& store, const ModelConfig& c,
                                            int stage, int64_t total_steps) {
  const auto det = ids_for_prefixes(store, detector_prefixes());
  const auto cap = ids_for_prefixes(store, caption_prefixes());
  switch (stage) {
    case 1:
      return {{"detector", det, cosine_schedule(c.lr_start, c.lr_end, total_steps)}};
    case 2:
      return {{"detector", det, constant_schedule(c.stage2_det_lr)},
              {"caption", cap, cosine_schedule(c.stage2_cap_lr_start, c.stage2_cap_lr_end,
                                               total_steps)}};
    case 3:
      return {{"caption", cap, constant_schedule(c.stage3_cap_lr)}};
    default:
      throw validation_error("trainer: stage must be 1, 2 or 3");
  }
}

// batch-mean loss components for one optimizer step
struct StepStats {
  double total = 0, vote = 0, giou = 0, cls = 0, cnt = 0, size = 0, cap = 0;
};

class Trainer {
 public:
  Trainer(ModelConfig cfg, const Dataset& data, std::vector<std::string> vocab_tokens)
      : cfg_(std::move(cfg)), data_(&data), vocab_tokens_(std::move(vocab_tokens)) {
    require(!data.scenes.empty(), "trainer: dataset is empty");
    if (cfg_.vocab_size == 0) cfg_.vocab_size = static_cast<int>(vocab_tokens_.size());
    require(cfg_.vocab_size == static_cast<int>(vocab_tokens_.size()),
            "trainer: config vocab_size disagrees with the vocabulary");
    for (const auto& s : data.scenes)
      for (const auto& refs : s.gt.refs)
        for (const auto& ref : refs) {
          require(static_cast<int>(ref.size()) <= cfg_.t_max,
                  "trainer: reference caption longer than t_max");
          for (int t : ref)
            require(t >= 0 && t < cfg_.vocab_size, "trainer: reference token outside vocabulary");
        }
    validate_config(cfg_);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<float>& store() { return store_; }
  const ParamStore<float>& store() const { return store_; }

  void init_params() {
    Rng rng(cfg_.seed);
    register_model_params(store_, cfg_, rng);
    stage_done_ = 0;
    steps_into_stage_ = 0;
  }

  void resume(const Checkpoint& ck, bool force) {
    ensure_config_match(ck, cfg_, force);
    Rng rng(cfg_.seed);
    register_model_params(store_, cfg_, rng);
    restore_params(ck, store_);
    resume_opt_ = ck.has_opt ? std::optional<OptimizerState<float>>(ck.opt) : std::nullopt;
    const int stage = static_cast<int>(ck.stage);
    if (stage == 0) {  // fresh snapshot
      stage_done_ = 0;
      steps_into_stage_ = 0;
      return;
    }
    const auto spec = stage_spec(cfg_, stage);
    const int64_t spe = steps_per_epoch(spec.batch);
    const int64_t total = spe * spec.epochs;
    const int64_t done = ck.has_opt ? ck.opt.step : total;
    if (done >= total) {
      stage_done_ = stage;
      resume_stage_ = 0;
      steps_into_stage_ = 0;
      resume_opt_.reset();
    } else {
      stage_done_ = stage - 1;
      resume_stage_ = stage;
      steps_into_stage_ = done;
    }
  }

  // runs the requested stages (0 = everything still pending) writing one loss
  // line per optimizer step; returns the last checkpoint path written.
  // max_steps > 0 caps the optimizer steps taken by this call; the cap is
  // checked at epoch boundaries so `last.ckpt` always sits on one.
  std::string run(int stage_filter, const std::string& out_dir, std::ostream& log,
                  const std::string& run_info, int64_t max_steps = 0) {
    std::filesystem::create_directories(out_dir);
    require(store_.count() > 0, "trainer: parameters not initialized");
    log << "# run " << run_info << "\n";
    log << "# config_hash " << std::hex << config_hash(cfg_) << std::dec << "\n";
    std::string last_path;
    int64_t budget = max_steps > 0 ? max_steps : std::numeric_limits<int64_t>::max();
    const int first = stage_filter == 0 ? stage_done_ + 1 : stage_filter;
    const int last = stage_filter == 0 ? 3 : stage_filter;
    require(first >= 1 && first <= 3, "trainer: nothing left to train");
    for (int stage = first; stage <= last; ++stage) {
      auto [path, complete] = run_stage(stage, out_dir, log, budget);
      last_path = path;
      if (!complete) break;
    }
    return last_path;
  }

 private:
  int64_t steps_per_epoch(int batch) const {
    const int64_t n = static_cast<int64_t>(data_->scenes.size());
    return (n + batch - 1) / batch;
  }

  std::pair<std::string, bool> run_stage(int stage, const std::string& out_dir, std::ostream& log,
                                         int64_t& budget) {
    const auto spec = stage_spec(cfg_, stage);
    const int64_t spe = steps_per_epoch(spec.batch);
    const int64_t total_steps = spe * spec.epochs;

    if (stage == 3)
      for (const auto& pre : detector_prefixes()) store_.set_trainable_prefix(pre, false);

    CiderIndex corpus;
    if (spec.mode == CaptionMode::scst)
      for (const auto& s : data_->scenes)
        for (const auto& refs : s.gt.refs) corpus.add_document(refs);

    AdamW<float> opt(store_, stage_groups(store_, cfg_, stage, total_steps), cfg_.weight_decay,
                     cfg_.clip_norm);
    // mid-stage resume state only applies to the stage it was captured in
    const int64_t resumed = stage == resume_stage_ ? steps_into_stage_ : 0;
    if (resumed > 0 && resume_opt_) {
      opt.state() = *resume_opt_;
      resume_opt_.reset();
    }
    const int64_t start_epoch = resumed / spe;
    if (stage == resume_stage_) {
      resume_stage_ = 0;
      steps_into_stage_ = 0;
    }

    const int n = static_cast<int>(data_->scenes.size());
    for (int64_t epoch = start_epoch; epoch < spec.epochs; ++epoch) {
      const auto order = epoch_order(cfg_.seed, stage, epoch, n);
      for (int64_t b0 = 0; b0 < n; b0 += spec.batch) {
        const int bsz = static_cast<int>(std::min<int64_t>(spec.batch, n - b0));
        std::vector<StepStats> stats(static_cast<size_t>(bsz));
        std::vector<std::vector<std::vector<float>>> grads(static_cast<size_t>(bsz));

        auto work = [&](int k) {
          const auto& sample = data_->scenes[static_cast<size_t>(order[static_cast<size_t>(b0 + k)])];
          Workspace<float> ws(store_);
          auto out = model_forward(ws, cfg_, sample.points<float>(), sample.colors<float>(),
                                   nullptr, spec.mode != CaptionMode::none);
          auto sl = scene_loss(ws, cfg_, out, sample.gt, spec.mode,
                               spec.mode == CaptionMode::scst ? &corpus : nullptr,
                               Vocabulary::eos_id, static_cast<uint64_t>(epoch));
          sl.total.backward();
          auto& acc = grads[static_cast<size_t>(k)];
          acc = make_grad_buffers(store_);
          ws.merge_grads(acc);
          auto& st = stats[static_cast<size_t>(k)];
          st.total = static_cast<double>(sl.total.item());
          st.vote = sl.vote;
          st.giou = sl.giou;
          st.cls = sl.cls;
          st.cnt = sl.cnt;
          st.size = sl.size;
          st.cap = sl.cap;
        };
        run_indexed(cfg_.threads, bsz, work);

        // merge in scene order so the reduction is independent of threading
        auto acc = make_grad_buffers(store_);
        for (int k = 0; k < bsz; ++k)
          for (size_t id = 0; id < acc.size(); ++id) {
            auto& src = grads[static_cast<size_t>(k)][id];
            if (src.empty()) continue;
            if (acc[id].size() != src.size()) acc[id].assign(src.size(), 0.0f);
            for (size_t j = 0; j < src.size(); ++j) acc[id][j] += src[j];
          }
        const float inv = 1.0f / static_cast<float>(bsz);
        for (auto& g : acc)
          for (auto& v : g) v *= inv;

        StepStats mean;
        for (const auto& st : stats) {
          mean.total += st.total;
          mean.vote += st.vote;
          mean.giou += st.giou;
          mean.cls += st.cls;
          mean.cnt += st.cnt;
          mean.size += st.size;
          mean.cap += st.cap;
        }
        const double binv = 1.0 / bsz;
        if (!std::isfinite(mean.total))
          throw numeric_error("trainer: non-finite loss at stage " + std::to_string(stage));
        opt.step(store_, acc);

        log << "step=" << opt.step_count() << " stage=" << stage << " lr=" << std::setprecision(10)
            << opt.groups().back().schedule.at(opt.step_count() - 1) << std::setprecision(6)
            << " total=" << mean.total * binv << " vote=" << mean.vote * binv
            << " giou=" << mean.giou * binv << " cls=" << mean.cls * binv
            << " cnt=" << mean.cnt * binv << " size=" << mean.size * binv
            << " cap=" << mean.cap * binv << "\n";
        --budget;
      }
      write_stage_checkpoint(stage, opt.state(), out_dir + "/last.ckpt");
      if (budget <= 0 && epoch + 1 < spec.epochs) return {out_dir + "/last.ckpt", false};
    }
    const std::string path = out_dir + "/stage" + std::to_string(stage) + ".ckpt";
    write_stage_checkpoint(stage, opt.state(), path);
    return {path, budget > 0};
  }

  void write_stage_checkpoint(int stage, const OptimizerState<float>& opt,
                              const std::string& path) {
    auto ck = snapshot_checkpoint(cfg_, store_, static_cast<uint32_t>(stage), vocab_tokens_, &opt,
                                  {Rng(cfg_.seed).state()});
    write_checkpoint(ck, path);
  }

  ModelConfig cfg_;
  const Dataset* data_;
  std::vector<std::string> vocab_tokens_;
  ParamStore<float> store_;
  std::optional<OptimizerState<float>> resume_opt_;
  int stage_done_ = 0;
  int resume_stage_ = 0;
  int64_t steps_into_stage_ = 0;
};

// ---------------------------------------------------------------------------
// inference-side pipeline shared by eval, caption and ablate

struct ScenePrediction {
  Box box;
  double score = 0;       // objectness probability
  int cls = 0;            // argmax class column
  TokenSeq caption;       // terminator stripped
};

inline std::vector<ScenePrediction> predict_scene(const ParamStore<float>& store,
                                                  const ModelConfig& c, const SceneSample& sample) {
  NoGradGuard ng;
  Workspace<float> ws(store);
  auto out = model_forward(ws, c, sample.points<float>(), sample.colors<float>());
  const auto& preds = out.preds.back();
  std::vector<ScenePrediction> result;
  for (int i = 0; i < c.n_instance; ++i) {
    ScenePrediction p;
    for (int a = 0; a < 3; ++a) {
      p.box.center[static_cast<size_t>(a)] = static_cast<double>(preds.center.at(i, a));
      p.box.size[static_cast<size_t>(a)] = static_cast<double>(preds.size.at(i, a));
    }
    p.score = 1.0 / (1.0 + std::exp(-static_cast<double>(preds.obj_logit.at(i, 0))));
    int best = 0;  // argmax over real classes; the trailing no-object column is not a label
    for (int k = 1; k < c.n_class; ++k)
      if (preds.cls_logits.at(i, k) > preds.cls_logits.at(i, best)) best = k;
    p.cls = best;
    auto row = gather_rows(out.prefix, {i});
    auto beams = beam_search(ws, c, row, Vocabulary::eos_id, c.beam);
    if (!beams.empty()) p.caption = strip_eos(beams.front().ids, Vocabulary::eos_id);
    result.push_back(std::move(p));
  }
  return result;
}

inline SceneEval scene_eval_view(const ParamStore<float>& store, const ModelConfig& c,
                                 const SceneSample& sample) {
  SceneEval ev;
  ev.gts = to_eval_objects(sample);
  for (auto& p : predict_scene(store, c, sample)) ev.preds.push_back({p.box, p.score, p.caption});
  return ev;
}

inline MetricsReport evaluate_dataset(const ParamStore<float>& store, const ModelConfig& c,
                                      const Dataset& data, double nms_iou) {
  std::vector<SceneEval> scenes(data.scenes.size());
  run_indexed(c.threads, static_cast<int>(data.scenes.size()), [&](int i) {
    scenes[static_cast<size_t>(i)] = scene_eval_view(store, c, data.scenes[static_cast<size_t>(i)]);
  });
  return evaluate_scenes(scenes, nms_iou);
}

}  // namespace bica
