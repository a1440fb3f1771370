#pragma once

#include "bica/blocks.hpp"
#include "bica/config.hpp"
#include "bica/geom.hpp"

namespace bica {

template <class T>
void register_bica(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  const int d = c.d_model;
  for (const char* stem : {"bica/o4c", "bica/c4o"}) {
    reg_linear(s, std::string(stem) + "_q", d, d, rng);
    reg_linear(s, std::string(stem) + "_k", d, d, rng);
    reg_linear(s, std::string(stem) + "_v", d, d, rng);
  }
  s.add_const("bica/gamma", {1, d}, 1.0);
  s.add_const("bica/lambda", {1, d}, 1.0);
  reg_linear(s, "bica/prefix", 3 * d, d, rng);
}

// single-head cross attention with a learned per-channel output gate;
// queries attend over keys/values and there is no residual here
template <class T>
Tensor<T> gated_cross_attention(Workspace<T>& ws, const std::string& stem, const Tensor<T>& gate,
                                const Tensor<T>& queries, const Tensor<T>& keys_values) {
  const int d = queries.cols();
  auto q = ws_linear(ws, stem + "_q", queries);
  auto k = ws_linear(ws, stem + "_k", keys_values);
  auto v = ws_linear(ws, stem + "_v", keys_values);
  auto scores = scale(matmul(q, k, false, true), T(1) / std::sqrt(static_cast<T>(d)));
  auto probs = softmax_rows(scores);
  return mul_row(matmul(probs, v), gate);
}

// object-to-context: each instance query aggregates the context features
template <class T>
Tensor<T> o4c_attend(Workspace<T>& ws, const Tensor<T>& vo, const Tensor<T>& vc) {
  return gated_cross_attention(ws, "bica/o4c", ws.p("bica/gamma"), vo, vc);
}

// context-to-object: the aggregated contexts look back at the objects
template <class T>
Tensor<T> c4o_attend(Workspace<T>& ws, const Tensor<T>& vca, const Tensor<T>& vo) {
  return gated_cross_attention(ws, "bica/c4o", ws.p("bica/lambda"), vca, vo);
}

// ablation stand-in for o4c: mean of the k nearest context features by
// query/context positions
template <class T>
Tensor<T> knn_context(const Tensor<T>& vc, const std::vector<T>& query_xyz, int n_query,
                      const std::vector<T>& context_xyz, int k, DiscreteCache* cache = nullptr) {
  auto idx = pin(cache, knn(context_xyz, vc.dim(0), query_xyz, n_query, k));
  return group_mean_pool(gather_rows(vc, idx), k);
}

// fused caption prefix: concat [vo | vca | voa] -> linear down to d.
// absent slots (per ablation variant) enter as zeros.
template <class T>
Tensor<T> assemble_prefix(Workspace<T>& ws, const Tensor<T>& vo, const Tensor<T>& vca,
                          const Tensor<T>& voa) {
  const int n = vo.dim(0), d = vo.cols();
  auto part = [&](const Tensor<T>& x) { return x.defined() ? x : Tensor<T>::zeros({n, d}); };
  auto va = concat_cols<T>({vo, part(vca), part(voa)});
  return ws_linear(ws, "bica/prefix", va);
}

}  // namespace bica
