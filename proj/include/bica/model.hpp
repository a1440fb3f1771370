#pragma once

#include "bica/bica.hpp"
#include "bica/config.hpp"
#include "bica/decoders.hpp"
#include "bica/encoder.hpp"
#include "bica/heads.hpp"
#include "bica/queries.hpp"

namespace bica {

template <class T>
void register_model_params(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  register_encoder(s, c, rng);
  register_queries(s, c, rng);
  register_decoders(s, c, rng);
  register_bica(s, c, rng);
  register_det_heads(s, c, rng);
  register_caption_head(s, c, rng);
}

// stage-wise trainability split
inline const std::vector<std::string>& detector_prefixes() {
  static const std::vector<std::string> v = {"encoder/", "queries/", "pe/",
                                             "decoder_o/", "decoder_c/", "det_heads/"};
  return v;
}
inline const std::vector<std::string>& caption_prefixes() {
  static const std::vector<std::string> v = {"bica/", "cap_head/"};
  return v;
}

template <class T>
struct ModelOutputs {
  SceneTokens<T> scene;
  Queries<T> queries;
  std::vector<Tensor<T>> vo_layers;  // per decoder layer, [n_instance x d]
  Tensor<T> vc;                      // [n_context x d] (undefined for variant "vo")
  Tensor<T> vca, voa;                // per-variant aggregates, may be undefined
  Tensor<T> prefix;                  // [n_instance x d]
  std::vector<DetPreds<T>> preds;    // detection heads on every decoder layer
};

// Full pipeline up to the caption prefix. The caption path (context decoder,
// bi-directional attention, prefix fusion) is skipped when with_caption=false,
// e.g. during detector-only training.
template <class T>
ModelOutputs<T> model_forward(Workspace<T>& ws, const ModelConfig& c, const Tensor<T>& xyz,
                              const Tensor<T>& feats, DiscreteCache* cache = nullptr,
                              bool with_caption = true) {
  ModelOutputs<T> out;
  out.scene = encode_scene(ws, c, xyz, feats, cache);
  out.queries = generate_queries(ws, c, out.scene, cache);
  out.vo_layers = decode_instance(ws, c, out.queries, out.scene);

  for (const auto& vo : out.vo_layers)
    out.preds.push_back(localize(ws, c, vo, out.queries.instance.positions));

  if (!with_caption) return out;
  const auto& vo = out.vo_layers.back();
  if (c.variant != "vo") out.vc = decode_context(ws, c, out.queries, out.scene);
  if (c.variant == "vo+knn") {
    out.vca = knn_context(out.vc, out.queries.instance.positions.val(), c.n_instance,
                          out.queries.context.positions.val(), c.knn_k, cache);
  } else if (c.variant == "vo+o4c" || c.variant == "full") {
    out.vca = o4c_attend(ws, vo, out.vc);
  }
  if (c.variant == "full") out.voa = c4o_attend(ws, out.vca, vo);
  out.prefix = assemble_prefix(ws, vo, out.vca, out.voa);
  return out;
}

}  // namespace bica
