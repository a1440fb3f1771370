#pragma once

#include <string>

#include "bica/attention.hpp"
#include "bica/param.hpp"

namespace bica {

// Parameter registration + forward helpers for the standard sub-modules.
// Registration order is fixed by the callers, which pins parameter ids,
// init-RNG consumption and checkpoint layout.

template <class T>
void reg_linear(ParamStore<T>& s, const std::string& p, int din, int dout, Rng& rng) {
  s.add_uniform(p + "/w", {din, dout}, din, rng);
  s.add_zeros(p + "/b", {dout});
}

template <class T>
Tensor<T> ws_linear(Workspace<T>& ws, const std::string& p, const Tensor<T>& x) {
  return linear(x, ws.p(p + "/w"), ws.p(p + "/b"));
}

// two-layer MLP with one ReLU; no activation after the last layer
template <class T>
void reg_mlp2(ParamStore<T>& s, const std::string& p, int din, int dh, int dout, Rng& rng) {
  reg_linear(s, p + "/l0", din, dh, rng);
  reg_linear(s, p + "/l1", dh, dout, rng);
}

template <class T>
Tensor<T> ws_mlp2(Workspace<T>& ws, const std::string& p, const Tensor<T>& x) {
  return ws_linear(ws, p + "/l1", relu(ws_linear(ws, p + "/l0", x)));
}

template <class T>
void reg_ln(ParamStore<T>& s, const std::string& p, int d) {
  s.add_const(p + "/g", {d}, T(1));
  s.add_zeros(p + "/b", {d});
}

template <class T>
Tensor<T> ws_ln(Workspace<T>& ws, const std::string& p, const Tensor<T>& x) {
  return layer_norm(x, ws.p(p + "/g"), ws.p(p + "/b"), static_cast<T>(1e-5));
}

template <class T>
void reg_mha(ParamStore<T>& s, const std::string& p, int d, Rng& rng) {
  for (const char* n : {"wq", "wk", "wv", "wo"}) s.add_uniform(p + "/" + n, {d, d}, d, rng);
  for (const char* n : {"bq", "bk", "bv", "bo"}) s.add_zeros(p + "/" + n, {d});
}

template <class T>
MhaWeights<T> ws_mha(Workspace<T>& ws, const std::string& p) {
  return MhaWeights<T>{ws.p(p + "/wq"), ws.p(p + "/bq"), ws.p(p + "/wk"), ws.p(p + "/bk"),
                       ws.p(p + "/wv"), ws.p(p + "/bv"), ws.p(p + "/wo"), ws.p(p + "/bo")};
}

// ---------------------------------------------------------------------------
// pre-norm transformer encoder layer (self-attention + FFN)

template <class T>
void reg_encoder_layer(ParamStore<T>& s, const std::string& p, int d, int ffn_mult, Rng& rng) {
  reg_ln(s, p + "/ln1", d);
  reg_mha(s, p + "/attn", d, rng);
  reg_ln(s, p + "/ln2", d);
  reg_mlp2(s, p + "/ffn", d, d * ffn_mult, d, rng);
}

template <class T>
Tensor<T> ws_encoder_layer(Workspace<T>& ws, const std::string& p, const Tensor<T>& x,
                           int n_heads, const Tensor<T>* mask = nullptr) {
  auto h = ws_ln(ws, p + "/ln1", x);
  auto a = multi_head_attention(h, h, h, ws_mha(ws, p + "/attn"), n_heads, mask);
  auto y = add(x, a.out);
  return add(y, ws_mlp2(ws, p + "/ffn", ws_ln(ws, p + "/ln2", y)));
}

// ---------------------------------------------------------------------------
// pre-norm decoder layer: query self-attention, cross-attention to memory, FFN.
// Positional encodings are added to the attention's query/key inputs each
// layer; values stay encoding-free.

template <class T>
void reg_decoder_layer(ParamStore<T>& s, const std::string& p, int d, int ffn_mult, Rng& rng) {
  reg_ln(s, p + "/ln1", d);
  reg_mha(s, p + "/self", d, rng);
  reg_ln(s, p + "/ln2", d);
  reg_mha(s, p + "/cross", d, rng);
  reg_ln(s, p + "/ln3", d);
  reg_mlp2(s, p + "/ffn", d, d * ffn_mult, d, rng);
}

template <class T>
Tensor<T> ws_decoder_layer(Workspace<T>& ws, const std::string& p, const Tensor<T>& x,
                           const Tensor<T>& query_pe, const Tensor<T>& memory,
                           const Tensor<T>& memory_pe, int n_heads) {
  auto h1 = ws_ln(ws, p + "/ln1", x);
  auto qk = add(h1, query_pe);
  auto a1 = multi_head_attention(qk, qk, h1, ws_mha(ws, p + "/self"), n_heads);
  auto y = add(x, a1.out);

  auto h2 = ws_ln(ws, p + "/ln2", y);
  auto a2 = multi_head_attention(add(h2, query_pe), add(memory, memory_pe), memory,
                                 ws_mha(ws, p + "/cross"), n_heads);
  y = add(y, a2.out);
  return add(y, ws_mlp2(ws, p + "/ffn", ws_ln(ws, p + "/ln3", y)));
}

}  // namespace bica
