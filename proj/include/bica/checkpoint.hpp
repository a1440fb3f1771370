#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "bica/config.hpp"
#include "bica/io.hpp"
#include "bica/optim.hpp"

namespace bica {

inline constexpr uint32_t checkpoint_format_version = 1;

struct ParamRecord {
  std::string name;
  std::vector<int> shape;
  bool trainable = true;
  std::vector<float> values;
};

// everything a run needs to continue exactly where it stopped
struct Checkpoint {
  uint32_t stage = 0;  // 1..3; last stage that touched the parameters
  std::string config_text;
  std::vector<std::string> vocab_tokens;
  std::vector<ParamRecord> params;
  bool has_opt = false;
  OptimizerState<float> opt;
  std::vector<std::array<uint64_t, 4>> rng_states;
};

inline Checkpoint snapshot_checkpoint(const ModelConfig& cfg, const ParamStore<float>& store,
                                      uint32_t stage, const std::vector<std::string>& vocab_tokens,
                                      const OptimizerState<float>* opt,
                                      const std::vector<std::array<uint64_t, 4>>& rng_states) {
  Checkpoint ck;
  ck.stage = stage;
  ck.config_text = serialize_config(cfg);
  ck.vocab_tokens = vocab_tokens;
  for (int id = 0; id < store.count(); ++id) {
    const auto& p = store.at(id);
    ck.params.push_back({p.name, p.shape, p.trainable, p.value});
  }
  if (opt) {
    ck.has_opt = true;
    ck.opt = *opt;
  }
  ck.rng_states = rng_states;
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw io_error("checkpoint: cannot write " + tmp);
    f.write("BCKP", 4);
    detail::write_pod<uint32_t>(f, checkpoint_format_version);
    detail::write_pod<uint32_t>(f, ck.stage);
    detail::write_str(f, ck.config_text);
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(ck.vocab_tokens.size()));
    for (const auto& t : ck.vocab_tokens) detail::write_str(f, t);
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(ck.params.size()));
    for (const auto& p : ck.params) {
      detail::write_str(f, p.name);
      detail::write_pod<uint32_t>(f, static_cast<uint32_t>(p.shape.size()));
      for (int d : p.shape) detail::write_pod<int32_t>(f, d);
      detail::write_pod<uint8_t>(f, p.trainable ? 1 : 0);
      detail::write_pod<uint32_t>(f, static_cast<uint32_t>(p.values.size()));
      for (float v : p.values) detail::write_pod<float>(f, v);
    }
    detail::write_pod<uint8_t>(f, ck.has_opt ? 1 : 0);
    if (ck.has_opt) {
      detail::write_pod<int64_t>(f, ck.opt.step);
      detail::write_pod<uint32_t>(f, static_cast<uint32_t>(ck.opt.m.size()));
      for (size_t i = 0; i < ck.opt.m.size(); ++i) {
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(ck.opt.m[i].size()));
        for (float v : ck.opt.m[i]) detail::write_pod<float>(f, v);
        for (float v : ck.opt.v[i]) detail::write_pod<float>(f, v);
      }
    }
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(ck.rng_states.size()));
    for (const auto& s : ck.rng_states)
      for (uint64_t w : s) detail::write_pod<uint64_t>(f, w);
    if (!f) throw io_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("checkpoint: cannot read " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "BCKP") throw io_error("checkpoint: bad magic in " + path);
  const auto version = detail::read_pod<uint32_t>(f);
  if (version != checkpoint_format_version)
    throw io_error("checkpoint: format version " + std::to_string(version) + " unsupported");
  Checkpoint ck;
  ck.stage = detail::read_pod<uint32_t>(f);
  ck.config_text = detail::read_str(f);
  const auto n_vocab = detail::read_pod<uint32_t>(f);
  for (uint32_t i = 0; i < n_vocab; ++i) ck.vocab_tokens.push_back(detail::read_str(f));
  const auto n_params = detail::read_pod<uint32_t>(f);
  for (uint32_t i = 0; i < n_params; ++i) {
    ParamRecord p;
    p.name = detail::read_str(f);
    const auto nd = detail::read_pod<uint32_t>(f);
    for (uint32_t d = 0; d < nd; ++d) p.shape.push_back(detail::read_pod<int32_t>(f));
    p.trainable = detail::read_pod<uint8_t>(f) != 0;
    p.values.resize(detail::read_pod<uint32_t>(f));
    for (auto& v : p.values) v = detail::read_pod<float>(f);
    ck.params.push_back(std::move(p));
  }
  ck.has_opt = detail::read_pod<uint8_t>(f) != 0;
  if (ck.has_opt) {
    ck.opt.step = detail::read_pod<int64_t>(f);
    const auto n = detail::read_pod<uint32_t>(f);
    ck.opt.m.resize(n);
    ck.opt.v.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
      const auto len = detail::read_pod<uint32_t>(f);
      ck.opt.m[i].resize(len);
      for (auto& v : ck.opt.m[i]) v = detail::read_pod<float>(f);
      ck.opt.v[i].resize(len);
      for (auto& v : ck.opt.v[i]) v = detail::read_pod<float>(f);
    }
  }
  const auto n_rng = detail::read_pod<uint32_t>(f);
  for (uint32_t i = 0; i < n_rng; ++i) {
    std::array<uint64_t, 4> s;
    for (auto& w : s) w = detail::read_pod<uint64_t>(f);
    ck.rng_states.push_back(s);
  }
  return ck;
}

// copies recorded values into a store registered from the same config; the
// record order must match registration order exactly
inline void restore_params(const Checkpoint& ck, ParamStore<float>& store) {
  require(static_cast<int>(ck.params.size()) == store.count(),
          "checkpoint: parameter count mismatch (" + std::to_string(ck.params.size()) + " vs " +
              std::to_string(store.count()) + ")");
  for (int id = 0; id < store.count(); ++id) {
    const auto& rec = ck.params[static_cast<size_t>(id)];
    auto& dst = store.at(id);
    require(rec.name == dst.name, "checkpoint: parameter name mismatch at slot " +
                                      std::to_string(id) + ": " + rec.name + " vs " + dst.name);
    require(rec.shape == dst.shape, "checkpoint: shape mismatch for " + rec.name);
    require(rec.values.size() == dst.value.size(), "checkpoint: size mismatch for " + rec.name);
    dst.value = rec.values;
    dst.trainable = rec.trainable;
  }
}

// config snapshots compare as canonical text; --force downgrades to a warning
// the caller is expected to print
inline void ensure_config_match(const Checkpoint& ck, const ModelConfig& cfg, bool force) {
  if (force) return;
  const std::string now = serialize_config(cfg);
  if (ck.config_text == now) return;
  // find the first differing line for a pointed message
  std::istringstream a(ck.config_text), b(now);
  std::string la, lb;
  while (std::getline(a, la) && std::getline(b, lb))
    if (la != lb)
      throw validation_error("checkpoint: config mismatch (checkpoint: '" + la + "' vs current: '" +
                             lb + "'); pass --force to override");
  throw validation_error("checkpoint: config mismatch; pass --force to override");
}

inline std::string param_hash_hex(const ParamStore<float>& store,
                                  const std::vector<std::string>& prefixes) {
  // FNV-1a over the raw bytes of every selected parameter, in id order
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (int id = 0; id < store.count(); ++id) {
    const auto& par = store.at(id);
    bool hit = prefixes.empty();
    for (const auto& pre : prefixes) hit = hit || par.name.rfind(pre, 0) == 0;
    if (!hit) continue;
    mix(par.name.data(), par.name.size());
    mix(par.value.data(), par.value.size() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace bica
