#pragma once

#include "bica/blocks.hpp"
#include "bica/config.hpp"
#include "bica/encoder.hpp"
#include "bica/queries.hpp"

namespace bica {

template <class T>
void register_decoders(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  // shared random fourier projection for positional encodings, frozen
  s.add_gaussian("pe/fourier_b", {3, c.d_model / 2}, 1.0, rng, /*trainable=*/false);
  for (const char* stem : {"decoder_o", "decoder_c"}) {
    for (int l = 0; l < c.n_layers; ++l)
      reg_decoder_layer(s, std::string(stem) + "/l" + std::to_string(l), c.d_model, c.ffn_mult, rng);
    reg_ln(s, std::string(stem) + "/out_ln", c.d_model);
  }
}

template <class T>
Tensor<T> positional_encoding(Workspace<T>& ws, const Tensor<T>& xyz) {
  return fourier_pe(xyz, ws.p("pe/fourier_b"));
}

// Pre-norm transformer decoder over the scene tokens. Returns the output of
// every layer (each passed through the shared output norm) so detection heads
// can supervise all of them; callers that only need the last one take back().
template <class T>
std::vector<Tensor<T>> run_decoder(Workspace<T>& ws, const ModelConfig& c, const std::string& stem,
                                   const Tensor<T>& query_feats, const Tensor<T>& query_pos,
                                   const SceneTokens<T>& st) {
  auto query_pe = positional_encoding(ws, query_pos);
  auto memory_pe = positional_encoding(ws, st.p_enc);
  std::vector<Tensor<T>> outs;
  auto x = query_feats;
  for (int l = 0; l < c.n_layers; ++l) {
    x = ws_decoder_layer(ws, stem + "/l" + std::to_string(l), x, query_pe, st.f_enc, memory_pe,
                         c.n_heads);
    outs.push_back(ws_ln(ws, stem + "/out_ln", x));
  }
  return outs;
}

template <class T>
std::vector<Tensor<T>> decode_instance(Workspace<T>& ws, const ModelConfig& c,
                                       const Queries<T>& q, const SceneTokens<T>& st) {
  return run_decoder(ws, c, "decoder_o", q.instance.feats, q.instance.positions, st);
}

template <class T>
Tensor<T> decode_context(Workspace<T>& ws, const ModelConfig& c, const Queries<T>& q,
                         const SceneTokens<T>& st) {
  return run_decoder(ws, c, "decoder_c", q.context.feats, q.context.positions, st).back();
}

}  // namespace bica
