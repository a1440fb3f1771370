#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "bica/blocks.hpp"
#include "bica/config.hpp"
#include "bica/geom.hpp"

namespace bica {

// ---- detection heads (shared across decoder layers) ----

template <class T>
struct DetPreds {
  Tensor<T> center;      // [n x 3]
  Tensor<T> size;        // [n x 3], positive
  Tensor<T> cls_logits;  // [n x (n_class+1)], last column = no-object
  Tensor<T> obj_logit;   // [n x 1]
  Tensor<T> iou;         // optional head, undefined when disabled
};

template <class T>
void register_det_heads(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  const int d = c.d_model;
  reg_mlp2(s, "det_heads/center", d, d, 3, rng);
  reg_mlp2(s, "det_heads/size", d, d, 3, rng);
  reg_mlp2(s, "det_heads/cls", d, d, c.n_class + 1, rng);
  reg_mlp2(s, "det_heads/obj", d, d, 1, rng);
  if (c.iou_head) reg_mlp2(s, "det_heads/iou", d, d, 1, rng);
}

template <class T>
DetPreds<T> localize(Workspace<T>& ws, const ModelConfig& c, const Tensor<T>& v,
                     const Tensor<T>& query_pos) {
  DetPreds<T> out;
  out.center = add(query_pos, ws_mlp2(ws, "det_heads/center", v));
  out.size = softplus(ws_mlp2(ws, "det_heads/size", v));
  out.cls_logits = ws_mlp2(ws, "det_heads/cls", v);
  out.obj_logit = ws_mlp2(ws, "det_heads/obj", v);
  if (c.iou_head) out.iou = ws_mlp2(ws, "det_heads/iou", v);
  return out;
}

// ---- caption head ----

template <class T>
void register_caption_head(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  require(c.vocab_size >= 3, "caption head needs a vocabulary");
  const int d = c.d_model;
  s.add_uniform("cap_head/emb", {c.vocab_size, d}, d, rng);
  for (int b = 0; b < c.cap_blocks; ++b) {
    const std::string stem = "cap_head/b" + std::to_string(b);
    reg_ln(s, stem + "/ln1", d);
    reg_mha(s, stem + "/attn", d, rng);
    reg_ln(s, stem + "/ln2", d);
    reg_mlp2(s, stem + "/ffn", d, c.ffn_mult * d, d, rng);
  }
  reg_ln(s, "cap_head/out_ln", d);
  reg_linear(s, "cap_head/cls", d, c.vocab_size, rng);
}

template <class T>
Tensor<T> causal_mask(int n) {
  auto m = Tensor<T>::zeros({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.val()[static_cast<size_t>(i) * n + j] = T(-1e9);
  return m;
}

// Sequence rows: [prefix + pe(0); emb(tok_0) + pe(1); ...]. Row i of the
// returned logits scores the token at position i+1, so training feeds the
// reference without its terminal token and scores the full reference.
template <class T>
Tensor<T> caption_logits(Workspace<T>& ws, const ModelConfig& c, const Tensor<T>& prefix_row,
                         const std::vector<int>& tokens) {
  require(prefix_row.dim(0) == 1 && prefix_row.cols() == c.d_model, "caption prefix must be 1 x d");
  const int n_tok = static_cast<int>(tokens.size());
  const int len = 1 + n_tok;
  require(len <= c.t_max + 1, "caption sequence exceeds t_max");

  auto pe = Tensor<T>::zeros({len, c.d_model});
  for (int p = 0; p < len; ++p) {
    auto row = sinusoid_pe<T>(p, c.d_model);
    std::copy(row.begin(), row.end(), pe.val().begin() + static_cast<size_t>(p) * c.d_model);
  }

  Tensor<T> x;
  if (n_tok == 0) {
    x = add(prefix_row, pe);  // pe is the single row 0 here
  } else {
    auto pe0 = Tensor<T>::from({1, c.d_model}, std::vector<T>(pe.val().begin(), pe.val().begin() + c.d_model));
    auto pe_rest = Tensor<T>::from({n_tok, c.d_model},
                                   std::vector<T>(pe.val().begin() + c.d_model, pe.val().end()));
    auto tok_emb = gather_rows(ws.p("cap_head/emb"), tokens);
    x = concat_rows<T>({add(prefix_row, pe0), add(tok_emb, pe_rest)});
  }

  auto mask = causal_mask<T>(len);
  for (int b = 0; b < c.cap_blocks; ++b) {
    const std::string stem = "cap_head/b" + std::to_string(b);
    auto h = ws_ln(ws, stem + "/ln1", x);
    auto att = multi_head_attention(h, h, h, ws_mha(ws, stem + "/attn"), c.n_heads, &mask);
    x = add(x, att.out);
    x = add(x, ws_mlp2(ws, stem + "/ffn", ws_ln(ws, stem + "/ln2", x)));
  }
  x = ws_ln(ws, "cap_head/out_ln", x);
  return ws_linear(ws, "cap_head/cls", x);
}

struct CaptionResult {
  std::vector<int> ids;  // includes the terminal token when one was emitted
  double logprob = 0.0;
  bool finished = false;
  double norm_score() const { return logprob / std::max<size_t>(1, ids.size()); }
};

template <class T>
std::vector<double> last_row_logprobs(Workspace<T>& ws, const ModelConfig& c,
                                      const Tensor<T>& prefix_row, const std::vector<int>& tokens) {
  auto logits = caption_logits(ws, c, prefix_row, tokens);
  auto lsm = log_softmax_rows(logits);
  const int last = logits.dim(0) - 1;
  std::vector<double> out(c.vocab_size);
  for (int v = 0; v < c.vocab_size; ++v)
    out[v] = static_cast<double>(lsm.val()[static_cast<size_t>(last) * c.vocab_size + v]);
  return out;
}

template <class T>
CaptionResult greedy_decode(Workspace<T>& ws, const ModelConfig& c, const Tensor<T>& prefix_row,
                            int eos_id) {
  NoGradGuard ng;
  CaptionResult r;
  for (int t = 0; t < c.t_max; ++t) {
    auto lp = last_row_logprobs(ws, c, prefix_row, r.ids);
    int best = 0;
    for (int v = 1; v < c.vocab_size; ++v)
      if (lp[v] > lp[best]) best = v;  // first occurrence wins ties
    r.ids.push_back(best);
    r.logprob += lp[best];
    if (best == eos_id) {
      r.finished = true;
      break;
    }
  }
  return r;
}

// Length-normalised beam search; completed hypotheses are held aside and the
// final ranking is by logprob / length, ties broken lexicographically.
template <class T>
std::vector<CaptionResult> beam_search(Workspace<T>& ws, const ModelConfig& c,
                                       const Tensor<T>& prefix_row, int eos_id, int beam_width) {
  NoGradGuard ng;
  require(beam_width >= 1, "beam width must be positive");
  std::vector<CaptionResult> alive{CaptionResult{}};
  std::vector<CaptionResult> finished;

  for (int t = 0; t < c.t_max && !alive.empty(); ++t) {
    std::vector<CaptionResult> cand;
    cand.reserve(alive.size() * static_cast<size_t>(c.vocab_size));
    for (const auto& b : alive) {
      auto lp = last_row_logprobs(ws, c, prefix_row, b.ids);
      for (int v = 0; v < c.vocab_size; ++v) {
        CaptionResult nb = b;
        nb.ids.push_back(v);
        nb.logprob += lp[v];
        cand.push_back(std::move(nb));
      }
    }
    std::sort(cand.begin(), cand.end(), [](const CaptionResult& a, const CaptionResult& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.ids < b.ids;
    });
    alive.clear();
    for (auto& cb : cand) {
      if (cb.ids.back() == eos_id) {  // one per alive beam per step, keep them all
        cb.finished = true;
        finished.push_back(std::move(cb));
      } else if (static_cast<int>(alive.size()) < beam_width) {
        alive.push_back(std::move(cb));
      }
    }
  }
  for (auto& b : alive) finished.push_back(std::move(b));  // ran out of steps

  std::sort(finished.begin(), finished.end(), [](const CaptionResult& a, const CaptionResult& b) {
    const double na = a.norm_score(), nb = b.norm_score();
    if (na != nb) return na > nb;
    return a.ids < b.ids;
  });
  if (static_cast<int>(finished.size()) > beam_width) finished.resize(beam_width);
  return finished;
}

}  // namespace bica
