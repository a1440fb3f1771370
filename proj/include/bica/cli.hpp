#pragma once

#include <cstdlib>
#include <iostream>
#include <map>
#include <set>

#include "bica/gradcheck.hpp"
#include "bica/trainer.hpp"

namespace bica {

inline const char* git_describe() {
#ifdef BICA_GIT_DESCRIBE
  return BICA_GIT_DESCRIBE;
#else
  return "unknown";
#endif
}

namespace cli {

// "--key value" pairs, "--key" alone for booleans, "--set k=v" repeatable
struct Args {
  std::map<std::string, std::string> kv;
  std::vector<std::pair<std::string, std::string>> sets;

  bool has(const std::string& k) const { return kv.count(k) > 0; }
  bool flag(const std::string& k) const { return has(k); }

  std::string get(const std::string& k, const std::string& dflt = "") const {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : it->second;
  }
  std::string need(const std::string& k) const {
    auto it = kv.find(k);
    require(it != kv.end(), "missing required flag --" + k);
    return it->second;
  }
  int64_t geti(const std::string& k, int64_t dflt) const {
    auto it = kv.find(k);
    if (it == kv.end()) return dflt;
    try {
      size_t pos = 0;
      int64_t v = std::stoll(it->second, &pos);
      require(pos == it->second.size(), "flag --" + k + ": not an integer: " + it->second);
      return v;
    } catch (const validation_error&) {
      throw;
    } catch (const std::exception&) {
      throw validation_error("flag --" + k + ": not an integer: " + it->second);
    }
  }
  double getd(const std::string& k, double dflt) const {
    auto it = kv.find(k);
    if (it == kv.end()) return dflt;
    try {
      size_t pos = 0;
      double v = std::stod(it->second, &pos);
      require(pos == it->second.size(), "flag --" + k + ": not a number: " + it->second);
      return v;
    } catch (const validation_error&) {
      throw;
    } catch (const std::exception&) {
      throw validation_error("flag --" + k + ": not a number: " + it->second);
    }
  }
};

inline const std::set<std::string>& boolean_flags() {
  static const std::set<std::string> f = {"overwrite", "force"};
  return f;
}

inline Args parse_args(int argc, char** argv, int first,
                       const std::set<std::string>& allowed) {
  Args a;
  for (int i = first; i < argc; ++i) {
    std::string tok = argv[i];
    require(tok.rfind("--", 0) == 0 && tok.size() > 2, "unexpected argument: " + tok);
    std::string key = tok.substr(2);
    require(allowed.count(key) > 0, "unknown flag --" + key);
    if (key == "set") {
      require(i + 1 < argc, "--set needs key=value");
      std::string kv = argv[++i];
      auto eq = kv.find('=');
      require(eq != std::string::npos && eq > 0 && eq + 1 < kv.size(),
              "--set needs key=value, got: " + kv);
      a.sets.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    } else if (boolean_flags().count(key)) {
      a.kv[key] = "1";
    } else {
      require(i + 1 < argc, "flag --" + key + " needs a value");
      a.kv[key] = argv[++i];
    }
  }
  return a;
}

// precedence: preset < config file < --set < dedicated flags < BICA_SEED
inline ModelConfig effective_config(const Args& a) {
  ModelConfig c;
  if (a.has("config")) {
    c = load_config_file(a.need("config"));
    require(!a.has("preset"), "--preset conflicts with --config (put a preset line in the file)");
  } else {
    c = preset_config(a.get("preset", "tiny"));
  }
  for (const auto& [k, v] : a.sets) set_config_field(c, k, v);
  if (a.has("variant")) c.variant = a.need("variant");
  if (a.has("seed")) c.seed = static_cast<uint64_t>(a.geti("seed", 0));
  if (a.has("threads")) c.threads = static_cast<int>(a.geti("threads", 1));
  if (a.has("beam")) c.beam = static_cast<int>(a.geti("beam", c.beam));
  if (const char* env = std::getenv("BICA_SEED"); env && *env) {
    std::string s(env);
    require(s.find_first_not_of("0123456789") == std::string::npos,
            "BICA_SEED must be a non-negative integer, got: " + s);
    c.seed = std::stoull(s);
  }
  return c;
}

struct CheckpointBundle {
  Checkpoint ck;
  ModelConfig cfg;
  ParamStore<float> store;
  Vocabulary vocab{{"<eos>", "<pad>"}};
};

inline CheckpointBundle load_bundle(const std::string& path) {
  CheckpointBundle b;
  b.ck = read_checkpoint(path);
  b.cfg = parse_config_text(b.ck.config_text, path);
  require(b.cfg.vocab_size == static_cast<int>(b.ck.vocab_tokens.size()),
          "checkpoint vocabulary does not match its config (vocab mismatch)");
  b.vocab = Vocabulary(b.ck.vocab_tokens);
  Rng rng(b.cfg.seed);
  register_model_params(b.store, b.cfg, rng);
  restore_params(b.ck, b.store);
  return b;
}

inline void check_dataset_vocab(const Dataset& data, int vocab_size) {
  for (const auto& s : data.scenes)
    for (const auto& refs : s.gt.refs)
      for (const auto& ref : refs)
        for (int t : ref)
          require(t >= 0 && t < vocab_size,
                  "dataset references tokens outside the checkpoint vocabulary (vocab mismatch)");
}

inline int cmd_gen_data(const Args& a, std::ostream& out) {
  const std::string path = a.need("out");
  const int scenes = static_cast<int>(a.geti("scenes", 32));
  const uint64_t seed = static_cast<uint64_t>(a.geti("seed", 7));
  const int omin = static_cast<int>(a.geti("objects-min", 2));
  const int omax = static_cast<int>(a.geti("objects-max", 8));
  if (std::filesystem::exists(path) && !a.flag("overwrite"))
    throw validation_error("gen-data: " + path + " exists (pass --overwrite to replace it)");
  auto data = make_dataset(seed, scenes, omin, omax);
  save_dataset(data, path);
  size_t pts = 0;
  for (const auto& s : data.scenes) pts += static_cast<size_t>(s.n_points);
  out << "wrote " << path << " scenes=" << scenes << " points=" << pts << " seed=" << seed
      << "\n";
  return 0;
}

inline int cmd_train(const Args& a, std::ostream& out) {
  auto cfg = effective_config(a);
  const std::string data_path = a.need("data");
  const std::string out_dir = a.need("out-dir");
  const std::string stage_s = a.get("stage", "all");
  int stage_filter = 0;
  if (stage_s != "all") {
    require(stage_s == "1" || stage_s == "2" || stage_s == "3",
            "--stage must be all, 1, 2 or 3");
    stage_filter = stage_s[0] - '0';
  }
  auto data = load_dataset(data_path);
  auto vocab = builtin_vocabulary();

  std::vector<std::string> tokens = vocab.tokens();
  std::optional<Checkpoint> ck;
  if (a.has("checkpoint")) {
    ck = read_checkpoint(a.need("checkpoint"));
    tokens = ck->vocab_tokens;
  }
  Trainer t(cfg, data, tokens);
  if (ck)
    t.resume(*ck, a.flag("force"));
  else
    t.init_params();

  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir + "/train.log", std::ios::app);
  if (!log) throw io_error("train: cannot write " + out_dir + "/train.log");
  std::ostringstream info;
  info << "git=" << git_describe() << " data=" << data_path << " stage=" << stage_s;
  const auto final_path =
      t.run(stage_filter, out_dir, log, info.str(), a.geti("max-steps", 0));
  out << "checkpoint " << final_path << "\n";
  return 0;
}

inline int cmd_eval(const Args& a, std::ostream& out) {
  auto b = load_bundle(a.need("checkpoint"));
  auto data = load_dataset(a.need("data"));
  check_dataset_vocab(data, b.cfg.vocab_size);
  if (a.has("threads")) b.cfg.threads = static_cast<int>(a.geti("threads", 1));
  const double nms_iou = a.getd("nms-iou", b.cfg.nms_iou);
  auto report = evaluate_dataset(b.store, b.cfg, data, nms_iou);
  const std::string text = report.to_text();
  if (a.has("out")) {
    std::ofstream f(a.need("out"), std::ios::binary);
    if (!f) throw io_error("eval: cannot write " + a.need("out"));
    f << text;
  }
  out << text;
  return 0;
}

inline int cmd_caption(const Args& a, std::ostream& out) {
  auto b = load_bundle(a.need("checkpoint"));
  auto data = load_dataset(a.need("data"));
  check_dataset_vocab(data, b.cfg.vocab_size);
  const int idx = static_cast<int>(a.geti("scene", 0));
  require(idx >= 0 && idx < static_cast<int>(data.scenes.size()),
          "caption: --scene out of range");
  if (a.has("beam")) {
    const int beam = static_cast<int>(a.geti("beam", b.cfg.beam));
    require(beam >= 1, "caption: --beam must be >= 1");
    b.cfg.beam = beam;
  }
  const auto& sample = data.scenes[static_cast<size_t>(idx)];
  auto preds = predict_scene(b.store, b.cfg, sample);

  std::vector<int> keep;
  for (int i = 0; i < static_cast<int>(preds.size()); ++i)
    if (preds[static_cast<size_t>(i)].score > b.cfg.objectness_threshold) keep.push_back(i);

  out.setf(std::ios::fixed);
  out.precision(6);
  out << "scene " << idx << " objects " << keep.size() << "\n";
  for (int i : keep) {
    const auto& p = preds[static_cast<size_t>(i)];
    out << "object " << i << " score " << p.score << " class \"" << scene::class_label(p.cls)
        << "\" center " << p.box.center[0] << " " << p.box.center[1] << " " << p.box.center[2]
        << " size " << p.box.size[0] << " " << p.box.size[1] << " " << p.box.size[2]
        << " caption \"" << b.vocab.decode(p.caption) << "\"\n";
  }
  return 0;
}

inline int cmd_gradcheck(const Args& a, std::ostream& out) {
  auto cfg = effective_config(a);
  const int samples = static_cast<int>(a.geti("samples", 50));
  const double h = a.getd("h", 1e-3);
  const uint64_t scene_seed = static_cast<uint64_t>(a.geti("scene-seed", 11));
  const uint64_t probe_seed = static_cast<uint64_t>(a.geti("probe-seed", 17));
  auto r = fd_gradcheck(cfg, scene_seed, probe_seed, samples, h);
  out << "gradcheck samples=" << r.n_checked << " h=" << h << " scene_seed=" << scene_seed
      << " probe_seed=" << probe_seed << "\n";
  out << "max_rel_err " << std::scientific << r.max_rel_err << std::defaultfloat << " at "
      << r.worst_param << "[" << r.worst_coord << "]\n";
  if (r.max_rel_err < 1e-3) {
    out << "PASS tolerance 1e-3\n";
    return 0;
  }
  out << "FAIL tolerance 1e-3\n";
  return 3;
}

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v = {"vo", "vo+knn", "vo+o4c", "full"};
  return v;
}

inline int cmd_ablate(const Args& a, std::ostream& out) {
  auto base = effective_config(a);
  const std::string data_path = a.need("data");
  const std::string out_dir = a.need("out-dir");
  const int n_seeds = static_cast<int>(a.geti("seeds", 5));
  require(n_seeds >= 1, "ablate: --seeds must be >= 1");
  const uint64_t seed0 = base.seed;

  std::vector<std::string> wanted;
  if (a.has("variants")) {
    std::istringstream in(a.need("variants"));
    std::string v;
    std::set<std::string> asked;
    while (std::getline(in, v, ',')) asked.insert(v);
    for (const auto& known : ablation_variants())
      if (asked.count(known)) {
        wanted.push_back(known);
        asked.erase(known);
      }
    require(asked.empty(), "ablate: unknown variant in --variants");
  } else if (a.has("variant")) {
    const std::string v = a.need("variant");
    bool known = false;
    for (const auto& k : ablation_variants()) known = known || k == v;
    require(known, "ablate: unknown variant " + v);
    wanted.push_back(v);
  } else {
    wanted = ablation_variants();
  }

  auto data = load_dataset(data_path);
  auto vocab = builtin_vocabulary();
  std::filesystem::create_directories(out_dir);

  std::ostringstream table;
  table.setf(std::ios::fixed);
  table.precision(6);
  table << "# ablation cider@0.5 scenes=" << data.scenes.size() << " seeds=" << n_seeds << "\n";
  table << "variant";
  for (int s = 0; s < n_seeds; ++s) table << " seed" << seed0 + static_cast<uint64_t>(s);
  table << " mean\n";

  for (const auto& variant : wanted) {
    table << variant;
    double sum = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
      auto cfg = base;
      cfg.variant = variant;
      cfg.seed = seed0 + static_cast<uint64_t>(s);
      const std::string run_dir = out_dir + "/" + variant + "-s" + std::to_string(cfg.seed);
      std::filesystem::create_directories(run_dir);
      std::ofstream log(run_dir + "/train.log", std::ios::app);
      if (!log) throw io_error("ablate: cannot write " + run_dir + "/train.log");
      Trainer t(cfg, data, vocab.tokens());
      t.init_params();
      std::ostringstream info;
      info << "git=" << git_describe() << " variant=" << variant << " seed=" << cfg.seed;
      t.run(0, run_dir, log, info.str());
      auto report = evaluate_dataset(t.store(), t.config(), data, t.config().nms_iou);
      table << " " << report.cider_50;
      sum += report.cider_50;
    }
    table << " " << sum / n_seeds << "\n";
  }

  const std::string text = table.str();
  std::ofstream f(out_dir + "/ablation.txt", std::ios::binary);
  if (!f) throw io_error("ablate: cannot write " + out_dir + "/ablation.txt");
  f << text;
  out << text;
  return 0;
}

inline void usage(std::ostream& out) {
  out << "usage: bica <command> [flags]\n"
         "  gen-data  --out F [--scenes N] [--seed S] [--objects-min A] [--objects-max B]\n"
         "            [--overwrite]\n"
         "  train     --data F --out-dir D [--config F] [--preset P] [--set k=v]...\n"
         "            [--stage all|1|2|3] [--checkpoint F] [--force] [--seed S]\n"
         "            [--threads N] [--variant V] [--max-steps N]\n"
         "  eval      --checkpoint F --data F [--nms-iou X] [--out F] [--threads N]\n"
         "  caption   --checkpoint F --data F [--scene I] [--beam K]\n"
         "  gradcheck [--config F] [--preset P] [--set k=v]... [--samples N] [--h X]\n"
         "            [--scene-seed S] [--probe-seed S]\n"
         "  ablate    --data F --out-dir D [--config F] [--preset P] [--set k=v]...\n"
         "            [--variants v1,v2] [--variant V] [--seeds N] [--seed S]\n"
         "exit codes: 0 ok, 2 validation, 3 numeric, 4 io/format\n"
         "env: BICA_SEED overrides the config seed\n";
}

}  // namespace cli

inline int cli_main(int argc, char** argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  using namespace cli;
  try {
    if (argc < 2) {
      usage(err);
      return 2;
    }
    const std::string cmd = argv[1];
    if (cmd == "gen-data") {
      auto a = parse_args(argc, argv, 2,
                          {"out", "scenes", "seed", "objects-min", "objects-max", "overwrite"});
      return cmd_gen_data(a, out);
    }
    if (cmd == "train") {
      auto a = parse_args(argc, argv, 2,
                          {"data", "out-dir", "config", "preset", "set", "stage", "checkpoint",
                           "force", "seed", "threads", "variant", "max-steps"});
      return cmd_train(a, out);
    }
    if (cmd == "eval") {
      auto a = parse_args(argc, argv, 2, {"checkpoint", "data", "nms-iou", "out", "threads"});
      return cmd_eval(a, out);
    }
    if (cmd == "caption") {
      auto a = parse_args(argc, argv, 2, {"checkpoint", "data", "scene", "beam"});
      return cmd_caption(a, out);
    }
    if (cmd == "gradcheck") {
      auto a = parse_args(argc, argv, 2,
                          {"config", "preset", "set", "samples", "h", "scene-seed", "probe-seed",
                           "seed", "variant", "threads"});
      return cmd_gradcheck(a, out);
    }
    if (cmd == "ablate") {
      auto a = parse_args(argc, argv, 2,
                          {"data", "out-dir", "config", "preset", "set", "variants", "variant",
                           "seeds", "seed", "threads"});
      return cmd_ablate(a, out);
    }
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
      usage(out);
      return 0;
    }
    usage(err);
    err << "unknown command: " << cmd << "\n";
    return 2;
  } catch (const validation_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const io_error& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace bica
