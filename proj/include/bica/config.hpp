#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "bica/errors.hpp"

namespace bica {

// Every hyperparameter of the pipeline, round-trippable through a flat
// key-value text format. file values < CLI flags in precedence; presets fill
// the struct first.
struct ModelConfig {
  std::string preset;  // "", "tiny" or "paper"; plain defaults are the desk-scale config
  std::string variant = "full";  // vo | vo+knn | vo+o4c | full
  uint64_t seed = 1;

  // input features per point (synthetic scenes carry RGB)
  int feat_dim = 3;

  // encoder
  int n_tokens = 256;  // keeps a desk-scale step cheap; paper preset overrides
  int n_enc = 256;
  int d_model = 64;
  int n_heads = 4;
  int ffn_mult = 4;
  double tokenizer_radius = 0.4;
  int tokenizer_nsample = 16;
  double masked_radius = 0.4;
  double enc_down_radius = 0.8;
  int enc_down_nsample = 16;

  // queries
  int n_instance = 64;
  int n_context = 16;
  int n_seeds = 128;
  double sa_o_radius = 0.6;
  int sa_o_nsample = 16;
  double sa_c_radius = 2.4;
  int sa_c_nsample = 32;

  // decoders
  int n_layers = 2;

  // bica
  int knn_k = 16;

  // heads / captioning
  int n_class = 12;
  int vocab_size = 0;  // 0 = adopt from dataset at train time
  int t_max = 16;
  int beam = 5;
  int cap_blocks = 2;
  bool iou_head = false;

  // losses
  double alpha1 = 10, alpha2 = 1, alpha3 = 5, alpha4 = 1;
  double beta1 = 10, beta2 = 1, beta3 = 5;

  // optimization
  double lr_start = 1e-3, lr_end = 1e-5;
  double weight_decay = 0.1;
  double clip_norm = 0.1;
  int epochs1 = 400, epochs2 = 500, epochs3 = 60;
  int batch1 = 2, batch2 = 2, batch3 = 2;
  double stage2_det_lr = 1e-5;
  double stage2_cap_lr_start = 5e-4, stage2_cap_lr_end = 1e-5;
  double stage3_cap_lr = 1e-6;

  // evaluation
  double nms_iou = 0.5;
  double objectness_threshold = 0.5;

  int threads = 1;
};

// One visitation order shared by serialize/parse/hash so the canonical text
// is stable.
template <class C, class F>
void config_fields(C& c, F&& f) {
  f("preset", c.preset);
  f("variant", c.variant);
  f("seed", c.seed);
  f("feat_dim", c.feat_dim);
  f("n_tokens", c.n_tokens);
  f("n_enc", c.n_enc);
  f("d_model", c.d_model);
  f("n_heads", c.n_heads);
  f("ffn_mult", c.ffn_mult);
  f("tokenizer_radius", c.tokenizer_radius);
  f("tokenizer_nsample", c.tokenizer_nsample);
  f("masked_radius", c.masked_radius);
  f("enc_down_radius", c.enc_down_radius);
  f("enc_down_nsample", c.enc_down_nsample);
  f("n_instance", c.n_instance);
  f("n_context", c.n_context);
  f("n_seeds", c.n_seeds);
  f("sa_o_radius", c.sa_o_radius);
  f("sa_o_nsample", c.sa_o_nsample);
  f("sa_c_radius", c.sa_c_radius);
  f("sa_c_nsample", c.sa_c_nsample);
  f("n_layers", c.n_layers);
  f("knn_k", c.knn_k);
  f("n_class", c.n_class);
  f("vocab_size", c.vocab_size);
  f("t_max", c.t_max);
  f("beam", c.beam);
  f("cap_blocks", c.cap_blocks);
  f("iou_head", c.iou_head);
  f("alpha1", c.alpha1);
  f("alpha2", c.alpha2);
  f("alpha3", c.alpha3);
  f("alpha4", c.alpha4);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("beta3", c.beta3);
  f("lr_start", c.lr_start);
  f("lr_end", c.lr_end);
  f("weight_decay", c.weight_decay);
  f("clip_norm", c.clip_norm);
  f("epochs1", c.epochs1);
  f("epochs2", c.epochs2);
  f("epochs3", c.epochs3);
  f("batch1", c.batch1);
  f("batch2", c.batch2);
  f("batch3", c.batch3);
  f("stage2_det_lr", c.stage2_det_lr);
  f("stage2_cap_lr_start", c.stage2_cap_lr_start);
  f("stage2_cap_lr_end", c.stage2_cap_lr_end);
  f("stage3_cap_lr", c.stage3_cap_lr);
  f("nms_iou", c.nms_iou);
  f("objectness_threshold", c.objectness_threshold);
  f("threads", c.threads);
}

namespace detail {
inline std::string field_to_string(const std::string& v) { return v; }
inline std::string field_to_string(uint64_t v) { return std::to_string(v); }
inline std::string field_to_string(int v) { return std::to_string(v); }
inline std::string field_to_string(bool v) { return v ? "1" : "0"; }
inline std::string field_to_string(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void field_from_string(const std::string& s, std::string& out) { out = s; }
inline void field_from_string(const std::string& s, uint64_t& out) { out = std::stoull(s); }
inline void field_from_string(const std::string& s, int& out) { out = std::stoi(s); }
inline void field_from_string(const std::string& s, bool& out) { out = s == "1" || s == "true"; }
inline void field_from_string(const std::string& s, double& out) { out = std::stod(s); }
}  // namespace detail

inline std::string serialize_config(const ModelConfig& c) {
  std::ostringstream out;
  config_fields(const_cast<ModelConfig&>(c), [&](const char* name, auto& v) {
    out << name << ' ' << detail::field_to_string(v) << '\n';
  });
  return out.str();
}

inline void set_config_field(ModelConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  config_fields(c, [&](const char* name, auto& v) {
    if (key == name) {
      detail::field_from_string(value, v);
      found = true;
    }
  });
  if (!found) throw validation_error("config: unknown key '" + key + "'");
}

inline uint64_t config_hash(const ModelConfig& c) {
  const std::string s = serialize_config(c);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  if (name.empty()) {
    // plain defaults
  } else if (name == "tiny") {
    c.preset = "tiny";
    c.beam = 3;
  } else if (name == "paper") {
    c.preset = "paper";
    c.n_tokens = 2048;
    c.n_enc = 1024;
    c.d_model = 256;
    c.n_instance = 256;
    c.n_context = 64;
    c.n_seeds = 512;
    c.sa_o_radius = 0.3;
    c.sa_o_nsample = 16;
    c.sa_c_radius = 1.2;
    c.sa_c_nsample = 64;
    c.n_layers = 8;
    c.beam = 5;
    c.t_max = 32;
    c.lr_start = 5e-4;
    c.lr_end = 1e-6;
    c.weight_decay = 0.1;
    c.clip_norm = 0.1;
    c.epochs1 = 1080;
    c.epochs2 = 720;
    c.epochs3 = 180;
    c.batch1 = 8;
    c.batch2 = 8;
    c.batch3 = 2;
    c.stage2_det_lr = 1e-6;
    c.stage2_cap_lr_start = 1e-4;
    c.stage2_cap_lr_end = 1e-6;
    c.stage3_cap_lr = 1e-6;
  } else {
    throw validation_error("config: unknown preset '" + name + "'");
  }
  return c;
}

inline void validate_config(const ModelConfig& c) {
  require(c.d_model % c.n_heads == 0, "config: d_model must be divisible by n_heads");
  require(c.n_instance <= c.n_enc, "config: instance query count exceeds n_enc");
  require(c.n_context <= c.n_seeds && c.n_seeds <= c.n_enc,
          "config: need n_context <= n_seeds <= n_enc");
  require(c.n_enc <= c.n_tokens, "config: n_enc exceeds tokenizer output");
  require(c.n_layers >= 1 && c.cap_blocks >= 1, "config: layer counts must be positive");
  require(c.beam >= 1, "config: beam must be >= 1");
  require(c.t_max >= 2, "config: t_max too small");
  require(c.variant == "vo" || c.variant == "vo+knn" || c.variant == "vo+o4c" ||
              c.variant == "full",
          "config: unknown variant '" + c.variant + "'");
  require(c.knn_k >= 1 && c.knn_k <= c.n_context, "config: knn_k must be in [1, n_context]");
  require(c.batch1 >= 1 && c.batch2 >= 1 && c.batch3 >= 1, "config: batch sizes must be >= 1");
}

// flat key-value text; '#' starts a comment, blank lines skipped
inline ModelConfig parse_config_text(const std::string& text, const std::string& origin) {
  // first pass to find the preset line so later keys override preset values
  std::string preset;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string k, v;
      if (ls >> k >> v && k == "preset") preset = v;
    }
  }
  ModelConfig c = preset_config(preset);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string k, v;
    if (!(ls >> k)) continue;
    if (!(ls >> v))
      throw validation_error("config: missing value at " + origin + ":" + std::to_string(lineno));
    set_config_field(c, k, v);
  }
  return c;
}

inline ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

}  // namespace bica
