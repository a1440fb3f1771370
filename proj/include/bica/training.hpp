#pragma once

#include <limits>
#include <utility>

#include "bica/evalmetrics.hpp"
#include "bica/heads.hpp"
#include "bica/model.hpp"

namespace bica {

// per-scene ground truth as the losses consume it
struct SceneTargets {
  std::vector<Box> boxes;
  std::vector<int> cls;
  std::vector<std::vector<TokenSeq>> refs;  // per object, >= 1 reference, no terminator
};

// ---------------------------------------------------------------------------
// Hungarian assignment (potentials formulation). cost is row-major n x m;
// returns the min-cost injective assignment of min(n,m) pairs as (row, col),
// sorted by row.
inline std::vector<std::pair<int, int>> hungarian_assign(const std::vector<double>& cost, int n,
                                                         int m) {
  require(static_cast<size_t>(n) * m == cost.size(), "hungarian: bad cost shape");
  for (double c : cost)
    if (std::isnan(c)) throw numeric_error("hungarian: NaN cost");
  if (n == 0 || m == 0) return {};

  const bool flipped = n > m;
  const int R = flipped ? m : n, C = flipped ? n : m;
  auto at = [&](int r, int c) {
    return flipped ? cost[static_cast<size_t>(c) * m + r] : cost[static_cast<size_t>(r) * m + c];
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(R) + 1, 0.0), v(static_cast<size_t>(C) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(C) + 1, 0), way(static_cast<size_t>(C) + 1, 0);
  for (int i = 1; i <= R; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(C) + 1, inf);
    std::vector<char> used(static_cast<size_t>(C) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= C; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= C; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }

  std::vector<std::pair<int, int>> pairs;
  for (int j = 1; j <= C; ++j)
    if (p[static_cast<size_t>(j)] != 0) {
      const int r = p[static_cast<size_t>(j)] - 1, col = j - 1;
      pairs.emplace_back(flipped ? col : r, flipped ? r : col);
    }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

// ---------------------------------------------------------------------------
// matching cost between box predictions and ground truth (values only):
// alpha1*(1-GIoU) + alpha2*(-P(gt class)) + alpha3*L1(center) + alpha4*L1(size)
template <class T>
std::vector<double> detection_match_cost(const DetPreds<T>& p, const SceneTargets& gt,
                                         const ModelConfig& c) {
  const int n = p.center.dim(0), m = static_cast<int>(gt.boxes.size());
  const int ncol = c.n_class + 1;
  std::vector<double> cost(static_cast<size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i) {
    Box pb;
    for (int a = 0; a < 3; ++a) {
      pb.center[static_cast<size_t>(a)] = static_cast<double>(p.center.at(i, a));
      pb.size[static_cast<size_t>(a)] = static_cast<double>(p.size.at(i, a));
    }
    // stable softmax over the class row
    double mx = -1e30;
    for (int k = 0; k < ncol; ++k) mx = std::max(mx, static_cast<double>(p.cls_logits.at(i, k)));
    double z = 0.0;
    for (int k = 0; k < ncol; ++k) z += std::exp(static_cast<double>(p.cls_logits.at(i, k)) - mx);
    for (int j = 0; j < m; ++j) {
      const auto& gb = gt.boxes[static_cast<size_t>(j)];
      double l1c = 0.0, l1s = 0.0;
      for (int a = 0; a < 3; ++a) {
        l1c += std::abs(pb.center[static_cast<size_t>(a)] - gb.center[static_cast<size_t>(a)]);
        l1s += std::abs(pb.size[static_cast<size_t>(a)] - gb.size[static_cast<size_t>(a)]);
      }
      const double prob =
          std::exp(static_cast<double>(p.cls_logits.at(i, gt.cls[static_cast<size_t>(j)])) - mx) / z;
      cost[static_cast<size_t>(i) * m + j] = c.alpha1 * (1.0 - box_giou(pb, gb)) +
                                             c.alpha2 * (-prob) + c.alpha3 * l1c + c.alpha4 * l1s;
    }
  }
  return cost;
}

template <class T>
std::vector<std::pair<int, int>> match_layer(const DetPreds<T>& p, const SceneTargets& gt,
                                             const ModelConfig& c, DiscreteCache* cache = nullptr) {
  const int n = p.center.dim(0), m = static_cast<int>(gt.boxes.size());
  auto pairs = hungarian_assign(detection_match_cost(p, gt, c), n, m);
  if (cache) {  // pin through the flat encoding for replay stability
    std::vector<int> flat;
    for (auto& pr : pairs) {
      flat.push_back(pr.first);
      flat.push_back(pr.second);
    }
    flat = pin(cache, std::move(flat));
    pairs.clear();
    for (size_t i = 0; i + 1 < flat.size(); i += 2) pairs.emplace_back(flat[i], flat[i + 1]);
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// vote loss: every instance query is traced back to its originating encoder
// point; if that point lies inside a ground-truth box, the query's (voted)
// position is pulled to that box center by L1. Normalized by the query count.
template <class T>
Tensor<T> vote_loss(const Tensor<T>& query_pos, const std::vector<int>& origin_idx,
                    const std::vector<T>& p_enc_vals, const SceneTargets& gt) {
  const int M = query_pos.dim(0);
  require(static_cast<int>(origin_idx.size()) == M, "vote_loss: origin index count mismatch");
  std::vector<int> rows;
  std::vector<T> centers;
  for (int i = 0; i < M; ++i) {
    const size_t o = static_cast<size_t>(origin_idx[static_cast<size_t>(i)]) * 3;
    for (size_t j = 0; j < gt.boxes.size(); ++j) {
      const auto& b = gt.boxes[j];
      bool inside = true;
      for (int a = 0; a < 3; ++a) {
        const double d = std::abs(static_cast<double>(p_enc_vals[o + static_cast<size_t>(a)]) -
                                  b.center[static_cast<size_t>(a)]);
        if (d > 0.5 * b.size[static_cast<size_t>(a)] + 1e-9) {
          inside = false;
          break;
        }
      }
      if (inside) {
        rows.push_back(i);
        for (int a = 0; a < 3; ++a) centers.push_back(static_cast<T>(b.center[static_cast<size_t>(a)]));
        break;  // boxes do not overlap
      }
    }
  }
  if (rows.empty()) return Tensor<T>::scalar(T(0));
  auto picked = gather_rows(query_pos, rows);
  auto target = Tensor<T>::from({static_cast<int>(rows.size()), 3}, centers);
  return scale(sum(abs_ew(sub(picked, target))), T(1) / static_cast<T>(M));
}

// ---------------------------------------------------------------------------
// per-layer detection loss. Matched pairs contribute (1-GIoU), center L1 and
// size L1 (averaged over pairs) plus class cross-entropy; unmatched
// predictions contribute no-object cross-entropy. The class term also carries
// an objectness BCE (matched -> 1, unmatched -> 0) since the objectness logit
// drives NMS scoring downstream.
template <class T>
struct DetLayerLoss {
  Tensor<T> giou, cls, cnt, size;  // unweighted components
  Tensor<T> total;                 // alpha-weighted sum
};

template <class T>
DetLayerLoss<T> detection_layer_loss(const DetPreds<T>& p, const SceneTargets& gt,
                                     const std::vector<std::pair<int, int>>& pairs,
                                     const ModelConfig& c) {
  const int n = p.center.dim(0);
  DetLayerLoss<T> out;

  if (!pairs.empty()) {
    std::vector<int> pi;
    std::vector<T> gc, gs;
    for (const auto& [a, b] : pairs) {
      pi.push_back(a);
      for (int ax = 0; ax < 3; ++ax) {
        gc.push_back(static_cast<T>(gt.boxes[static_cast<size_t>(b)].center[static_cast<size_t>(ax)]));
        gs.push_back(static_cast<T>(gt.boxes[static_cast<size_t>(b)].size[static_cast<size_t>(ax)]));
      }
    }
    const int k = static_cast<int>(pairs.size());
    auto pc = gather_rows(p.center, pi);
    auto ps = gather_rows(p.size, pi);
    auto gtc = Tensor<T>::from({k, 3}, gc);
    auto gts = Tensor<T>::from({k, 3}, gs);
    out.giou = mean(add_const(scale(giou_rows(pc, ps, gtc, gts), T(-1)), T(1)));
    out.cnt = scale(sum(abs_ew(sub(pc, gtc))), T(1) / static_cast<T>(k));
    out.size = scale(sum(abs_ew(sub(ps, gts))), T(1) / static_cast<T>(k));
  } else {
    out.giou = Tensor<T>::scalar(T(0));
    out.cnt = Tensor<T>::scalar(T(0));
    out.size = Tensor<T>::scalar(T(0));
  }

  // class targets: matched gt class, otherwise the no-object column
  std::vector<int> ids(static_cast<size_t>(n), c.n_class);
  std::vector<T> obj_sign(static_cast<size_t>(n), T(1));  // softplus(+x): penalize unmatched
  for (const auto& [a, b] : pairs) {
    ids[static_cast<size_t>(a)] = gt.cls[static_cast<size_t>(b)];
    obj_sign[static_cast<size_t>(a)] = T(-1);  // softplus(-x): reward matched
  }
  auto ce = scale(cross_entropy_sum(p.cls_logits, ids), T(1) / static_cast<T>(n));
  auto bce = mean(softplus(mul(p.obj_logit, Tensor<T>::from({n, 1}, obj_sign))));
  out.cls = add(ce, bce);

  out.total = add(add(scale(out.giou, static_cast<T>(c.alpha1)), scale(out.cls, static_cast<T>(c.alpha2))),
                  add(scale(out.cnt, static_cast<T>(c.alpha3)), scale(out.size, static_cast<T>(c.alpha4))));
  return out;
}

// ---------------------------------------------------------------------------
// caption losses

// teacher-forced negative log-likelihood of one reference per matched object,
// averaged over matched objects; rotation picks among multiple references
template <class T>
Tensor<T> caption_mle_loss(Workspace<T>& ws, const ModelConfig& c, const Tensor<T>& prefix,
                           const std::vector<std::pair<int, int>>& pairs, const SceneTargets& gt,
                           int eos_id, uint64_t rotation) {
  if (pairs.empty()) return Tensor<T>::scalar(T(0));
  std::vector<Tensor<T>> terms;
  for (const auto& [pi, gi] : pairs) {
    const auto& refs = gt.refs[static_cast<size_t>(gi)];
    require(!refs.empty(), "caption_mle_loss: object without references");
    const auto& ref = refs[rotation % refs.size()];
    std::vector<int> targets = ref;
    targets.push_back(eos_id);
    for (int id : targets)
      require(id >= 0 && id < c.vocab_size, "caption_mle_loss: token id outside vocabulary");
    auto row = gather_rows(prefix, {pi});
    auto logits = caption_logits(ws, c, row, ref);
    terms.push_back(cross_entropy_sum(logits, targets));
  }
  return scale(add_n(terms), T(1) / static_cast<T>(terms.size()));
}

// SCST combination: L = -sum_b (R_b - baseline) * logprob_b / len_b.
// Rewards are plain constants; gradients flow through the logprobs only.
template <class T>
Tensor<T> scst_combine(const std::vector<Tensor<T>>& logprobs, const std::vector<double>& rewards,
                       double baseline, const std::vector<int>& lengths) {
  require(!logprobs.empty() && logprobs.size() == rewards.size() &&
              logprobs.size() == lengths.size(),
          "scst_combine: mismatched inputs");
  std::vector<Tensor<T>> terms;
  for (size_t b = 0; b < logprobs.size(); ++b) {
    require(lengths[b] > 0, "scst_combine: empty candidate");
    terms.push_back(scale(logprobs[b], static_cast<T>((rewards[b] - baseline) / lengths[b])));
  }
  return scale(add_n(terms), T(-1));
}

inline TokenSeq strip_eos(const std::vector<int>& ids, int eos_id) {
  TokenSeq out = ids;
  if (!out.empty() && out.back() == eos_id) out.pop_back();
  return out;
}

// full SCST loss for one scene: beams + greedy baseline per matched object,
// CIDEr reward against that object's references, averaged over objects
template <class T>
Tensor<T> scst_caption_loss(Workspace<T>& ws, const ModelConfig& c, const Tensor<T>& prefix,
                            const std::vector<std::pair<int, int>>& pairs, const SceneTargets& gt,
                            const CiderIndex& corpus, int eos_id) {
  if (pairs.empty()) return Tensor<T>::scalar(T(0));
  std::vector<Tensor<T>> per_object;
  for (const auto& [pi, gi] : pairs) {
    const auto& refs = gt.refs[static_cast<size_t>(gi)];
    require(!refs.empty(), "scst_caption_loss: object without references");
    auto row = gather_rows(prefix, {pi});

    auto beams = beam_search(ws, c, row, eos_id, c.beam);  // no-grad inside
    auto greedy = greedy_decode(ws, c, row, eos_id);
    const double baseline =
        greedy.ids.empty() ? 0.0 : cider(strip_eos(greedy.ids, eos_id), refs, corpus);

    std::vector<Tensor<T>> logprobs;
    std::vector<double> rewards;
    std::vector<int> lengths;
    for (const auto& b : beams) {
      if (b.ids.empty()) continue;
      std::vector<int> input(b.ids.begin(), b.ids.end() - 1);
      auto logits = caption_logits(ws, c, row, input);
      logprobs.push_back(scale(cross_entropy_sum(logits, b.ids), T(-1)));
      rewards.push_back(cider(strip_eos(b.ids, eos_id), refs, corpus));
      lengths.push_back(static_cast<int>(b.ids.size()));
    }
    if (logprobs.empty()) continue;
    per_object.push_back(scst_combine(logprobs, rewards, baseline, lengths));
  }
  if (per_object.empty()) return Tensor<T>::scalar(T(0));
  return scale(add_n(per_object), T(1) / static_cast<T>(per_object.size()));
}

// ---------------------------------------------------------------------------
// total per-scene loss

template <class T>
struct SceneLoss {
  Tensor<T> total;
  double vote = 0, giou = 0, cls = 0, cnt = 0, size = 0, cap = 0;  // logged values
  std::vector<std::pair<int, int>> last_match;
};

enum class CaptionMode { none, mle, scst };

template <class T>
SceneLoss<T> scene_loss(Workspace<T>& ws, const ModelConfig& c, const ModelOutputs<T>& out,
                        const SceneTargets& gt, CaptionMode mode, const CiderIndex* corpus,
                        int eos_id, uint64_t rotation, DiscreteCache* cache = nullptr) {
  SceneLoss<T> sl;
  auto lv = vote_loss(out.queries.instance.positions, out.queries.instance.origin_idx,
                      out.scene.p_enc.val(), gt);
  sl.vote = static_cast<double>(lv.item());

  std::vector<Tensor<T>> det_totals;
  for (const auto& preds : out.preds) {
    auto pairs = match_layer(preds, gt, c, cache);
    auto dl = detection_layer_loss(preds, gt, pairs, c);
    det_totals.push_back(dl.total);
    sl.giou += static_cast<double>(dl.giou.item());
    sl.cls += static_cast<double>(dl.cls.item());
    sl.cnt += static_cast<double>(dl.cnt.item());
    sl.size += static_cast<double>(dl.size.item());
    sl.last_match = pairs;
  }
  auto det_sum = add_n(det_totals);

  Tensor<T> cap;
  if (mode == CaptionMode::mle) {
    cap = caption_mle_loss(ws, c, out.prefix, sl.last_match, gt, eos_id, rotation);
  } else if (mode == CaptionMode::scst) {
    require(corpus != nullptr, "scst needs corpus statistics");
    cap = scst_caption_loss(ws, c, out.prefix, sl.last_match, gt, *corpus, eos_id);
  } else {
    cap = Tensor<T>::scalar(T(0));
  }
  sl.cap = static_cast<double>(cap.item());

  sl.total = add(add(scale(lv, static_cast<T>(c.beta1)), scale(det_sum, static_cast<T>(c.beta2))),
                 scale(cap, static_cast<T>(c.beta3)));
  return sl;
}

}  // namespace bica
