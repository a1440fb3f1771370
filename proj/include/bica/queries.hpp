#pragma once

#include "bica/blocks.hpp"
#include "bica/config.hpp"
#include "bica/encoder.hpp"
#include "bica/geom.hpp"

namespace bica {

template <class T>
struct QuerySet {
  Tensor<T> positions;          // [m x 3]
  Tensor<T> feats;              // [m x d]
  std::vector<int> origin_idx;  // index into the rows the query was sampled from
};

template <class T>
struct Queries {
  QuerySet<T> instance;
  QuerySet<T> context;
  Tensor<T> vote_offsets;  // [n_enc x 3], kept for the vote loss
};

template <class T>
void register_queries(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  reg_mlp2(s, "queries/vote_ffn", c.d_model, c.d_model, 3 + c.d_model, rng);
  reg_mlp2(s, "queries/sa_o_mlp", 3 + c.d_model, c.d_model, c.d_model, rng);
  reg_mlp2(s, "queries/sa_c_mlp", 3 + c.d_model, c.d_model, c.d_model, rng);
}

// Instance queries: every scene token votes an offset [dp;df] toward its
// instance, and the shifted point set is regrouped with set abstraction.
// Context queries: FPS seeds over the unshifted tokens, FPS again down to
// n_context, then a wide-radius grouping over all tokens.
template <class T>
Queries<T> generate_queries(Workspace<T>& ws, const ModelConfig& c, const SceneTokens<T>& st,
                            DiscreteCache* cache = nullptr) {
  Queries<T> out;

  auto vote = ws_mlp2(ws, "queries/vote_ffn", st.f_enc);
  out.vote_offsets = slice_cols(vote, 0, 3);
  auto df = slice_cols(vote, 3, c.d_model);
  auto shifted_p = add(st.p_enc, out.vote_offsets);
  auto shifted_f = add(st.f_enc, df);

  auto sa_o_mlp = [&](const Tensor<T>& x) { return ws_mlp2(ws, "queries/sa_o_mlp", x); };
  auto sao = set_abstraction<T>(shifted_p, shifted_f, c.n_instance, c.sa_o_radius, c.sa_o_nsample,
                                sa_o_mlp, cache);
  out.instance = QuerySet<T>{sao.centers, sao.features, sao.center_idx};

  auto seeds = pin(cache, fps(st.p_enc.val(), c.n_enc, c.n_seeds));
  std::vector<T> seed_xyz(static_cast<size_t>(c.n_seeds) * 3);
  for (int i = 0; i < c.n_seeds; ++i)
    for (int a = 0; a < 3; ++a)
      seed_xyz[static_cast<size_t>(i) * 3 + a] = st.p_enc.val()[static_cast<size_t>(seeds[i]) * 3 + a];
  auto sub = fps(seed_xyz, c.n_seeds, c.n_context);
  std::vector<int> ctr_idx(sub.size());
  for (size_t i = 0; i < sub.size(); ++i) ctr_idx[i] = seeds[sub[i]];

  auto sa_c_mlp = [&](const Tensor<T>& x) { return ws_mlp2(ws, "queries/sa_c_mlp", x); };
  auto sac = set_abstraction<T>(st.p_enc, st.f_enc, c.n_context, c.sa_c_radius, c.sa_c_nsample,
                                sa_c_mlp, cache, ctr_idx);
  out.context = QuerySet<T>{sac.centers, sac.features, sac.center_idx};
  return out;
}

}  // namespace bica
