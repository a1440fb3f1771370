#pragma once

#include "bica/blocks.hpp"
#include "bica/config.hpp"
#include "bica/geom.hpp"

namespace bica {

template <class T>
struct SceneTokens {
  Tensor<T> p_enc;  // [n_enc x 3]
  Tensor<T> f_enc;  // [n_enc x d_model]
};

template <class T>
void register_encoder(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  reg_mlp2(s, "encoder/tok_mlp", 3 + c.feat_dim, c.d_model, c.d_model, rng);
  reg_encoder_layer(s, "encoder/masked", c.d_model, c.ffn_mult, rng);
  reg_mlp2(s, "encoder/down_mlp", 3 + c.d_model, c.d_model, c.d_model, rng);
  reg_encoder_layer(s, "encoder/l1", c.d_model, c.ffn_mult, rng);
  reg_encoder_layer(s, "encoder/l2", c.d_model, c.ffn_mult, rng);
  reg_ln(s, "encoder/out_ln", c.d_model);
}

// additive local-attention mask: 0 inside the radius, -1e9 outside
template <class T>
Tensor<T> radius_attention_mask(const std::vector<T>& xyz, int n, double radius) {
  auto mask = Tensor<T>::zeros({n, n});
  const double r2 = radius * radius;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double d = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double diff = static_cast<double>(xyz[static_cast<size_t>(i) * 3 + a]) -
                            static_cast<double>(xyz[static_cast<size_t>(j) * 3 + a]);
        d += diff * diff;
      }
      if (d > r2) mask.val()[static_cast<size_t>(i) * n + j] = T(-1e9);
    }
  return mask;
}

// Tokenize with set abstraction, one locally masked attention layer, a second
// set-abstraction downsample to n_enc, then two plain attention layers.
template <class T>
SceneTokens<T> encode_scene(Workspace<T>& ws, const ModelConfig& c, const Tensor<T>& xyz,
                            const Tensor<T>& feats, DiscreteCache* cache = nullptr) {
  if (xyz.dim(0) < c.n_tokens)
    throw validation_error("encoder: scene has fewer points than the tokenizer output");
  auto tok_mlp = [&](const Tensor<T>& x) { return ws_mlp2(ws, "encoder/tok_mlp", x); };
  auto tok = set_abstraction<T>(xyz, feats, c.n_tokens, c.tokenizer_radius, c.tokenizer_nsample,
                                tok_mlp, cache);

  auto mask = radius_attention_mask<T>(tok.centers.val(), c.n_tokens, c.masked_radius);
  auto x = ws_encoder_layer(ws, "encoder/masked", tok.features, c.n_heads, &mask);

  auto down_mlp = [&](const Tensor<T>& v) { return ws_mlp2(ws, "encoder/down_mlp", v); };
  auto down = set_abstraction<T>(tok.centers, x, c.n_enc, c.enc_down_radius, c.enc_down_nsample,
                                 down_mlp, cache);

  auto y = ws_encoder_layer(ws, "encoder/l1", down.features, c.n_heads);
  y = ws_encoder_layer(ws, "encoder/l2", y, c.n_heads);
  return SceneTokens<T>{down.centers, ws_ln(ws, "encoder/out_ln", y)};
}

}  // namespace bica
