#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bica/errors.hpp"
#include "bica/geom.hpp"

namespace bica {

using TokenSeq = std::vector<int>;
using Ngram = std::vector<int>;

inline std::map<Ngram, int> ngram_counts(const TokenSeq& s, int n) {
  std::map<Ngram, int> out;
  if (static_cast<int>(s.size()) < n) return out;
  for (size_t i = 0; i + n <= s.size(); ++i)
    ++out[Ngram(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))];
  return out;
}

// ---------------------------------------------------------------------------
// BLEU-4: geometric mean of clipped 1..4-gram precisions times the brevity
// penalty. Orders the candidate is too short to produce are skipped; a
// non-trivially zero precision is floored at 1e-9.
inline double bleu4(const TokenSeq& cand, const std::vector<TokenSeq>& refs) {
  require(!cand.empty(), "bleu4: empty candidate");
  require(!refs.empty(), "bleu4: no references");
  double log_sum = 0.0;
  int levels = 0;
  for (int n = 1; n <= 4; ++n) {
    auto cc = ngram_counts(cand, n);
    int total = 0, clipped = 0;
    for (const auto& [g, k] : cc) total += k;
    if (total == 0) continue;  // candidate shorter than n tokens
    for (const auto& [g, k] : cc) {
      int best = 0;
      for (const auto& r : refs) {
        auto rc = ngram_counts(r, n);
        auto it = rc.find(g);
        if (it != rc.end()) best = std::max(best, it->second);
      }
      clipped += std::min(k, best);
    }
    double p = static_cast<double>(clipped) / total;
    if (p <= 0.0) p = 1e-9;
    log_sum += std::log(p);
    ++levels;
  }
  if (levels == 0) return 0.0;
  // closest reference length; ties go to the shorter reference
  const int c = static_cast<int>(cand.size());
  int r = static_cast<int>(refs[0].size());
  for (const auto& ref : refs) {
    const int len = static_cast<int>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r))
      r = len;
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  return bp * std::exp(log_sum / levels);
}

// ---------------------------------------------------------------------------
// ROUGE-L: LCS-based F-measure with beta = 1.2, max over references.
inline int lcs_len(const TokenSeq& a, const TokenSeq& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[m];
}

inline double rouge_l(const TokenSeq& cand, const std::vector<TokenSeq>& refs) {
  require(!cand.empty(), "rouge_l: empty candidate");
  require(!refs.empty(), "rouge_l: no references");
  const double beta = 1.2, b2 = beta * beta;
  double best = 0.0;
  for (const auto& r : refs) {
    if (r.empty()) continue;
    const int l = lcs_len(cand, r);
    if (l == 0) continue;
    const double p = static_cast<double>(l) / cand.size();
    const double rec = static_cast<double>(l) / r.size();
    best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
  }
  return best;
}

// ---------------------------------------------------------------------------
// CIDEr, consensus formulation: mean over n=1..4 of 10 x the average TF-IDF
// cosine against each reference. Document frequencies are collected over the
// evaluation corpus (one document per annotated object); idf uses the
// add-one-smoothed log((N+1)/df) so a single-document corpus is well-defined.
struct CiderIndex {
  std::array<std::map<Ngram, int>, 4> df;
  int n_docs = 0;

  void add_document(const std::vector<TokenSeq>& refs) {
    for (int n = 1; n <= 4; ++n) {
      std::map<Ngram, int> seen;
      for (const auto& r : refs)
        for (const auto& [g, k] : ngram_counts(r, n)) seen[g] = 1;
      for (const auto& kv : seen) df[static_cast<size_t>(n - 1)][kv.first] += 1;
    }
    ++n_docs;
  }

  double idf(int n, const Ngram& g) const {
    const auto& m = df[static_cast<size_t>(n - 1)];
    auto it = m.find(g);
    const int d = it == m.end() ? 1 : std::max(1, it->second);
    return std::log((static_cast<double>(n_docs) + 1.0) / d);
  }
};

inline double cider(const TokenSeq& cand, const std::vector<TokenSeq>& refs,
                    const CiderIndex& idx) {
  require(idx.n_docs > 0, "cider: empty corpus");
  require(!refs.empty(), "cider: no references");
  double total = 0.0;
  for (int n = 1; n <= 4; ++n) {
    auto cvec = ngram_counts(cand, n);
    double cnorm2 = 0.0;
    for (const auto& [g, k] : cvec) {
      const double w = k * idx.idf(n, g);
      cnorm2 += w * w;
    }
    double sim = 0.0;
    for (const auto& r : refs) {
      auto rvec = ngram_counts(r, n);
      double rnorm2 = 0.0, dot = 0.0;
      for (const auto& [g, k] : rvec) {
        const double w = k * idx.idf(n, g);
        rnorm2 += w * w;
        auto it = cvec.find(g);
        if (it != cvec.end()) dot += w * (it->second * idx.idf(n, g));
      }
      if (cnorm2 > 0.0 && rnorm2 > 0.0) sim += dot / std::sqrt(cnorm2 * rnorm2);
    }
    total += sim / static_cast<double>(refs.size());
  }
  return 10.0 * total / 4.0;
}

// ---------------------------------------------------------------------------
// m@k protocol

struct EvalObject {
  Box box;
  std::vector<TokenSeq> refs;
};

struct EvalPrediction {
  Box box;
  double score = 0.0;  // objectness, used as the NMS score
  TokenSeq caption;
};

struct SceneEval {
  std::vector<EvalObject> gts;
  std::vector<EvalPrediction> preds;
};

inline std::vector<EvalPrediction> apply_nms(const std::vector<EvalPrediction>& preds,
                                             double iou_threshold) {
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const auto& p : preds) {
    boxes.push_back(p.box);
    scores.push_back(p.score);
  }
  std::vector<EvalPrediction> out;
  for (int i : nms_3d(boxes, scores, iou_threshold)) out.push_back(preds[static_cast<size_t>(i)]);
  return out;
}

// Each annotated object is assigned the surviving prediction with maximal IoU
// and contributes metric(caption, refs) if that IoU >= k, else 0; the result
// is the mean over every annotated object. Predictions must already be
// NMS-filtered.
template <class MetricFn>
double m_at_k(const std::vector<SceneEval>& scenes, MetricFn&& metric, double k) {
  double acc = 0.0;
  int n = 0;
  for (const auto& sc : scenes) {
    for (const auto& gt : sc.gts) {
      ++n;
      double best_iou = 0.0;
      const EvalPrediction* best = nullptr;
      for (const auto& p : sc.preds) {
        const double iou = box_iou(p.box, gt.box);
        if (iou > best_iou) {
          best_iou = iou;
          best = &p;
        }
      }
      if (best && best_iou >= k && !best->caption.empty()) acc += metric(best->caption, gt.refs);
    }
  }
  return n == 0 ? 0.0 : acc / n;
}

// fraction of annotated objects covered by a surviving prediction at IoU >= thr
inline double average_recall(const std::vector<SceneEval>& scenes, double thr, int* matched = nullptr,
                             int* total = nullptr) {
  int hit = 0, n = 0;
  for (const auto& sc : scenes)
    for (const auto& gt : sc.gts) {
      ++n;
      for (const auto& p : sc.preds)
        if (box_iou(p.box, gt.box) >= thr) {
          ++hit;
          break;
        }
    }
  if (matched) *matched = hit;
  if (total) *total = n;
  return n == 0 ? 0.0 : static_cast<double>(hit) / n;
}

// single-class average precision at a fixed IoU threshold; predictions ranked
// by score with deterministic tie-breaking, greedy one-to-one matching
inline double average_precision(const std::vector<SceneEval>& scenes, double thr) {
  struct Ranked {
    double score;
    int scene, idx;
  };
  std::vector<Ranked> order;
  int n_gt = 0;
  for (size_t s = 0; s < scenes.size(); ++s) {
    n_gt += static_cast<int>(scenes[s].gts.size());
    for (size_t i = 0; i < scenes[s].preds.size(); ++i)
      order.push_back({scenes[s].preds[i].score, static_cast<int>(s), static_cast<int>(i)});
  }
  if (n_gt == 0) return 0.0;
  std::sort(order.begin(), order.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.idx < b.idx;
  });
  std::vector<std::vector<char>> used(scenes.size());
  for (size_t s = 0; s < scenes.size(); ++s) used[s].assign(scenes[s].gts.size(), 0);
  double ap = 0.0;
  int tp = 0, seen = 0;
  for (const auto& r : order) {
    ++seen;
    const auto& sc = scenes[static_cast<size_t>(r.scene)];
    const auto& p = sc.preds[static_cast<size_t>(r.idx)];
    int best_j = -1;
    double best_iou = thr;
    for (size_t j = 0; j < sc.gts.size(); ++j) {
      if (used[static_cast<size_t>(r.scene)][j]) continue;
      const double iou = box_iou(p.box, sc.gts[j].box);
      if (iou >= best_iou) {
        best_iou = iou;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      used[static_cast<size_t>(r.scene)][static_cast<size_t>(best_j)] = 1;
      ++tp;
      ap += static_cast<double>(tp) / seen;  // precision at each new recall point
    }
  }
  return ap / n_gt;
}

// ---------------------------------------------------------------------------

struct MetricsReport {
  double cider_25 = 0, cider_50 = 0;
  double bleu4_25 = 0, bleu4_50 = 0;
  double rouge_25 = 0, rouge_50 = 0;
  double ar_50 = 0, map_50 = 0;
  int n_objects = 0, n_matched_50 = 0;

  std::string to_text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << "cider@0.25 " << cider_25 << "\n"
       << "cider@0.5 " << cider_50 << "\n"
       << "bleu4@0.25 " << bleu4_25 << "\n"
       << "bleu4@0.5 " << bleu4_50 << "\n"
       << "rougeL@0.25 " << rouge_25 << "\n"
       << "rougeL@0.5 " << rouge_50 << "\n"
       << "AR@0.5 " << ar_50 << "\n"
       << "mAP@0.5 " << map_50 << "\n"
       << "n_objects " << n_objects << "\n"
       << "n_matched@0.5 " << n_matched_50 << "\n";
    return os.str();
  }
};

// Applies NMS, builds the corpus idf index from the ground-truth references,
// and fills the full report.
inline MetricsReport evaluate_scenes(std::vector<SceneEval> scenes, double nms_iou) {
  CiderIndex idx;
  for (const auto& sc : scenes)
    for (const auto& gt : sc.gts) idx.add_document(gt.refs);

  for (auto& sc : scenes) sc.preds = apply_nms(sc.preds, nms_iou);

  auto with_guard = [](auto fn) {
    return [fn](const TokenSeq& c, const std::vector<TokenSeq>& r) {
      return c.empty() || r.empty() ? 0.0 : fn(c, r);
    };
  };
  auto cid = with_guard([&idx](const TokenSeq& c, const std::vector<TokenSeq>& r) {
    return cider(c, r, idx);
  });
  auto bl = with_guard([](const TokenSeq& c, const std::vector<TokenSeq>& r) { return bleu4(c, r); });
  auto rg = with_guard([](const TokenSeq& c, const std::vector<TokenSeq>& r) { return rouge_l(c, r); });

  MetricsReport rep;
  rep.cider_25 = m_at_k(scenes, cid, 0.25);
  rep.cider_50 = m_at_k(scenes, cid, 0.5);
  rep.bleu4_25 = m_at_k(scenes, bl, 0.25);
  rep.bleu4_50 = m_at_k(scenes, bl, 0.5);
  rep.rouge_25 = m_at_k(scenes, rg, 0.25);
  rep.rouge_50 = m_at_k(scenes, rg, 0.5);
  rep.ar_50 = average_recall(scenes, 0.5, &rep.n_matched_50, &rep.n_objects);
  rep.map_50 = average_precision(scenes, 0.5);
  return rep;
}

}  // namespace bica
