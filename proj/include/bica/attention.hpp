#pragma once

#include "bica/ops.hpp"

namespace bica {

template <class T>
struct MhaWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // all [d x d] / [d]
};

template <class T>
struct MhaResult {
  Tensor<T> out;                  // [nq x d]
  Tensor<T> weights;              // [heads x nq x nk], detached copy
  std::vector<char> fully_masked; // one flag per (head, query) row
};

// Scaled dot-product attention with learned projections. The additive mask
// (when given) is [nq x nk] with large negative entries for disallowed keys; a
// row with every key masked degenerates to uniform weights and is flagged.
template <class T>
MhaResult<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  const MhaWeights<T>& w, int n_heads,
                                  const Tensor<T>* mask = nullptr) {
  const int d = q.dim(1);
  if (d % n_heads != 0) throw validation_error("mha: d_model not divisible by n_heads");
  if (k.dim(1) != d || v.dim(1) != d) throw validation_error("mha: feature width mismatch");
  const int nq = q.dim(0), nk = k.dim(0);
  if (v.dim(0) != nk) throw validation_error("mha: key/value count mismatch");
  if (mask && (mask->dim(0) != nq || mask->dim(1) != nk))
    throw validation_error("mha: mask shape mismatch");
  const int dh = d / n_heads;

  auto qp = add_row(matmul(q, w.wq), w.bq);
  auto kp = add_row(matmul(k, w.wk), w.bk);
  auto vp = add_row(matmul(v, w.wv), w.bv);

  MhaResult<T> res;
  res.weights = Tensor<T>::zeros({n_heads, nq, nk});
  res.fully_masked.assign(static_cast<size_t>(n_heads) * nq, 0);

  std::vector<Tensor<T>> head_outs;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < n_heads; ++h) {
    auto qh = slice_cols(qp, h * dh, dh);
    auto kh = slice_cols(kp, h * dh, dh);
    auto vh = slice_cols(vp, h * dh, dh);
    auto scores = scale(matmul(qh, kh, false, true), inv_sqrt);
    if (mask) scores = add(scores, *mask);
    std::vector<char> flags;
    auto probs = softmax_rows(scores, &flags);
    for (int i = 0; i < nq; ++i)
      res.fully_masked[static_cast<size_t>(h) * nq + i] = flags[static_cast<size_t>(i)];
    std::copy(probs.val().begin(), probs.val().end(),
              res.weights.val().begin() + static_cast<size_t>(h) * nq * nk);
    head_outs.push_back(matmul(probs, vh));
  }
  auto merged = n_heads == 1 ? head_outs[0] : concat_cols(head_outs);
  res.out = add_row(matmul(merged, w.wo), w.bo);
  return res;
}

}  // namespace bica
