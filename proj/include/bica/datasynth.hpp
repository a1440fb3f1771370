#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "bica/io.hpp"
#include "bica/training.hpp"

namespace bica {

// ---------------------------------------------------------------------------
// vocabulary: token <-> id bijection, newline-delimited on disk, line = id

class Vocabulary {
 public:
  static constexpr int eos_id = 0;
  static constexpr int pad_id = 1;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    require(tokens_.size() >= 2 && tokens_[0] == "<eos>" && tokens_[1] == "<pad>",
            "vocabulary: first two entries must be <eos>, <pad>");
    for (size_t i = 0; i < tokens_.size(); ++i) {
      auto [it, fresh] = index_.emplace(tokens_[i], static_cast<int>(i));
      require(fresh, "vocabulary: duplicate token " + tokens_[i]);
    }
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    require(it != index_.end(), "vocabulary: unknown token " + tok);
    return it->second;
  }

  const std::string& token(int id) const {
    require(id >= 0 && id < size(), "vocabulary: id out of range");
    return tokens_[static_cast<size_t>(id)];
  }

  TokenSeq encode(const std::string& sentence) const {
    TokenSeq out;
    std::istringstream in(sentence);
    std::string tok;
    while (in >> tok) out.push_back(id(tok));
    return out;
  }

  std::string decode(const TokenSeq& ids) const {
    std::string out;
    for (int t : ids) {
      if (t == eos_id) break;
      if (!out.empty()) out += ' ';
      out += token(t);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("vocabulary: cannot write " + path);
    for (const auto& t : tokens_) f << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("vocabulary: cannot read " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

namespace scene {

inline constexpr double room_x = 10.0, room_y = 10.0, room_z = 3.0;
inline constexpr int n_colors = 6, n_size_cats = 2;
inline constexpr int n_classes = n_colors * n_size_cats;
inline constexpr double noise_sigma = 0.01;
inline constexpr int points_per_scene = 2048;

inline const char* color_name(int c) {
  static const char* names[n_colors] = {"red", "green", "blue", "yellow", "purple", "orange"};
  return names[c];
}

inline const char* size_name(int s) { return s == 0 ? "small" : "large"; }

inline std::array<float, 3> color_rgb(int c) {
  static const std::array<float, 3> base[n_colors] = {
      {0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.1f}, {0.1f, 0.2f, 0.9f},
      {0.9f, 0.9f, 0.1f}, {0.6f, 0.1f, 0.8f}, {0.9f, 0.5f, 0.1f}};
  return base[c];
}

inline std::string class_label(int cls) {
  return std::string(size_name(cls % n_size_cats)) + " " + color_name(cls / n_size_cats);
}

}  // namespace scene

// the shared scene vocabulary; tokens past the templates keep the id space
// roomy enough for caption experiments without regenerating datasets
inline Vocabulary builtin_vocabulary() {
  std::vector<std::string> toks = {"<eos>", "<pad>"};
  const char* words[] = {
      "the",    "a",      "box",       "room",    "floor",  "wall",   "corner", "center",
      "is",     "standing", "sitting", "placed",  "on",     "in",     "near",   "far",
      "from",   "next",   "to",        "beside",  "of",     "at",     "red",    "green",
      "blue",   "yellow", "purple",    "orange",  "small",  "large",  "left",   "right",
      "front",  "behind", "north",     "south",   "east",   "west",   "most",   "across",
      "this",   "that",   "and",       "side",    "middle", "edge",   "tall",   "short",
      "wide",   "narrow", "object",    "crate",   "another", "other", "empty",  "open",
      "closed", "big"};
  for (const char* w : words) toks.emplace_back(w);
  return Vocabulary(std::move(toks));
}

// ---------------------------------------------------------------------------
// scene sample

struct SceneSample {
  std::vector<float> xyz, rgb;  // flattened n x 3
  int n_points = 0;
  SceneTargets gt;
  uint64_t seed = 0;

  template <class T>
  Tensor<T> points() const {
    std::vector<T> v(xyz.begin(), xyz.end());
    return Tensor<T>::from({n_points, 3}, std::move(v));
  }
  template <class T>
  Tensor<T> colors() const {
    std::vector<T> v(rgb.begin(), rgb.end());
    return Tensor<T>::from({n_points, 3}, std::move(v));
  }
};

struct Dataset {
  std::vector<SceneSample> scenes;
};

namespace detail {

inline bool boxes_clash(const Box& a, const Box& b, double gap) {
  for (int ax = 0; ax < 3; ++ax) {
    const double d = std::abs(a.center[static_cast<size_t>(ax)] - b.center[static_cast<size_t>(ax)]);
    if (d >= 0.5 * (a.size[static_cast<size_t>(ax)] + b.size[static_cast<size_t>(ax)]) + gap)
      return false;
  }
  return true;
}

// truncated so the room-bound invariant (3 sigma margin) holds exactly
inline float clipped_noise(Rng& rng) {
  const float v = rng.normal() * static_cast<float>(scene::noise_sigma);
  const float lim = 3.0f * static_cast<float>(scene::noise_sigma);
  return std::max(-lim, std::min(lim, v));
}

inline void push_point(SceneSample& s, Rng& rng, double x, double y, double z,
                       const std::array<float, 3>& base_rgb) {
  s.xyz.push_back(static_cast<float>(x) + clipped_noise(rng));
  s.xyz.push_back(static_cast<float>(y) + clipped_noise(rng));
  s.xyz.push_back(static_cast<float>(z) + clipped_noise(rng));
  for (float c : base_rgb) s.rgb.push_back(std::max(0.0f, std::min(1.0f, c + 0.05f * rng.normal())));
  ++s.n_points;
}

// uniform point on one of the 6 faces of an axis-aligned box
inline void sample_box_face(SceneSample& s, Rng& rng, const Box& b, int face,
                            const std::array<float, 3>& rgb) {
  const int ax = face / 2;           // fixed axis
  const double sgn = face % 2 ? 0.5 : -0.5;
  double p[3];
  for (int a = 0; a < 3; ++a)
    p[a] = b.center[static_cast<size_t>(a)] +
           (a == ax ? sgn * b.size[static_cast<size_t>(a)]
                    : (rng.next_double() - 0.5) * b.size[static_cast<size_t>(a)]);
  push_point(s, rng, p[0], p[1], p[2], rgb);
}

}  // namespace detail

// procedural scene: colored boxes resting on the floor of a 10 x 10 x 3 room,
// points surface-sampled from boxes, walls and floor, two references per
// object (attribute + relational)
inline SceneSample make_scene(uint64_t seed, int n_objects) {
  require(n_objects >= 2 && n_objects <= 8, "make_scene: n_objects must be in [2, 8]");
  const auto vocab = builtin_vocabulary();
  Rng rng(seed);
  SceneSample s;
  s.seed = seed;

  // --- placement by rejection sampling
  std::vector<int> color_of, size_cat_of;
  int tries = 0;
  while (static_cast<int>(s.gt.boxes.size()) < n_objects) {
    if (++tries > 1000) throw validation_error("make_scene: box placement failed after 1000 tries");
    const int color = rng.next_int(scene::n_colors);
    const int size_cat = rng.next_int(scene::n_size_cats);
    Box b;
    for (int a = 0; a < 3; ++a)
      b.size[static_cast<size_t>(a)] =
          size_cat == 0 ? rng.uniform(0.55f, 0.95f) : rng.uniform(1.3f, 1.9f);
    const double margin = 0.3;
    b.center[0] = rng.uniform(static_cast<float>(margin + 0.5 * b.size[0]),
                              static_cast<float>(scene::room_x - margin - 0.5 * b.size[0]));
    b.center[1] = rng.uniform(static_cast<float>(margin + 0.5 * b.size[1]),
                              static_cast<float>(scene::room_y - margin - 0.5 * b.size[1]));
    b.center[2] = 0.5 * b.size[2];  // resting on the floor
    bool clash = false;
    for (const auto& other : s.gt.boxes) clash = clash || detail::boxes_clash(b, other, 0.25);
    if (clash) continue;
    s.gt.boxes.push_back(b);
    s.gt.cls.push_back(color * scene::n_size_cats + size_cat);
    color_of.push_back(color);
    size_cat_of.push_back(size_cat);
  }

  // --- captions: shared long stem, then an attribute tail and a relational
  // tail whose wording depends on the nearest other box
  for (int i = 0; i < n_objects; ++i) {
    const std::string stem = std::string("the ") + scene::size_name(size_cat_of[static_cast<size_t>(i)]) +
                             " " + scene::color_name(color_of[static_cast<size_t>(i)]) +
                             " box in the room is standing ";
    int nearest = -1;
    double best = 1e30;
    for (int j = 0; j < n_objects; ++j) {
      if (j == i) continue;
      double d2 = 0;
      for (int a = 0; a < 3; ++a) {
        const double d = s.gt.boxes[static_cast<size_t>(i)].center[static_cast<size_t>(a)] -
                         s.gt.boxes[static_cast<size_t>(j)].center[static_cast<size_t>(a)];
        d2 += d * d;
      }
      if (d2 < best) {
        best = d2;
        nearest = j;
      }
    }
    const bool far = std::sqrt(best) > 0.5 * scene::room_x;
    // the neighbor is named by its size word: correctness still depends on the
    // other box, while the wording stays common enough corpus-wide that the
    // tf-idf mass of a caption is not dominated by this tail
    const std::string other = scene::size_name(size_cat_of[static_cast<size_t>(nearest)]);
    const std::string rel = far ? "far from the " + other + " box" : "near the " + other + " box";
    s.gt.refs.push_back({vocab.encode(stem + "on the floor"), vocab.encode(stem + rel)});
  }

  // --- surface sampling against a fixed per-scene budget
  const std::array<float, 3> gray = {0.5f, 0.5f, 0.5f};
  const int n_floor = 300, n_wall = 87;
  const int n_obj_total = scene::points_per_scene - n_floor - 4 * n_wall;
  for (int i = 0; i < n_floor; ++i)
    detail::push_point(s, rng, rng.next_double() * scene::room_x, rng.next_double() * scene::room_y,
                       0.0, gray);
  for (int w = 0; w < 4; ++w)
    for (int i = 0; i < n_wall; ++i) {
      const double along = rng.next_double() * (w < 2 ? scene::room_y : scene::room_x);
      const double up = rng.next_double() * scene::room_z;
      const double fixed = (w % 2) ? (w < 2 ? scene::room_x : scene::room_y) : 0.0;
      if (w < 2)
        detail::push_point(s, rng, fixed, along, up, gray);
      else
        detail::push_point(s, rng, along, fixed, up, gray);
    }
  for (int i = 0; i < n_objects; ++i) {
    const int quota = n_obj_total / n_objects + (i < n_obj_total % n_objects ? 1 : 0);
    const auto rgb = scene::color_rgb(color_of[static_cast<size_t>(i)]);
    for (int k = 0; k < quota; ++k)
      detail::sample_box_face(s, rng, s.gt.boxes[static_cast<size_t>(i)], k % 6, rgb);
  }
  return s;
}

inline Dataset make_dataset(uint64_t dataset_seed, int n_scenes, int obj_min, int obj_max) {
  require(n_scenes > 0, "make_dataset: need at least one scene");
  require(obj_min >= 2 && obj_max <= 8 && obj_min <= obj_max,
          "make_dataset: object count bounds must satisfy 2 <= min <= max <= 8");
  Dataset d;
  Rng root(dataset_seed);
  for (int i = 0; i < n_scenes; ++i) {
    Rng fork = root.fork(static_cast<uint64_t>(i));
    const int n_obj = obj_min + (obj_max > obj_min ? fork.next_int(obj_max - obj_min + 1) : 0);
    d.scenes.push_back(make_scene(fork.next_u64(), n_obj));
  }
  return d;
}

// eval-side view of the ground truth
inline std::vector<EvalObject> to_eval_objects(const SceneSample& s) {
  std::vector<EvalObject> out;
  for (size_t i = 0; i < s.gt.boxes.size(); ++i)
    out.push_back({s.gt.boxes[i], s.gt.refs[i]});
  return out;
}

// ---------------------------------------------------------------------------
// dataset container: "BICA" magic, u32 version, u32 scene count, then per
// scene the seed, points (f32 le) and ground truth (token ids u16 le)

inline constexpr uint32_t dataset_format_version = 1;

inline void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("dataset: cannot write " + path);
  f.write("BICA", 4);
  detail::write_pod<uint32_t>(f, dataset_format_version);
  detail::write_pod<uint32_t>(f, static_cast<uint32_t>(d.scenes.size()));
  for (const auto& s : d.scenes) {
    detail::write_pod<uint64_t>(f, s.seed);
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(s.n_points));
    for (float v : s.xyz) detail::write_pod<float>(f, v);
    for (float v : s.rgb) detail::write_pod<float>(f, v);
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(s.gt.boxes.size()));
    for (size_t i = 0; i < s.gt.boxes.size(); ++i) {
      for (double v : s.gt.boxes[i].center) detail::write_pod<float>(f, static_cast<float>(v));
      for (double v : s.gt.boxes[i].size) detail::write_pod<float>(f, static_cast<float>(v));
      detail::write_pod<uint32_t>(f, static_cast<uint32_t>(s.gt.cls[i]));
      detail::write_pod<uint32_t>(f, static_cast<uint32_t>(s.gt.refs[i].size()));
      for (const auto& ref : s.gt.refs[i]) {
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(ref.size()));
        for (int t : ref) {
          require(t >= 0 && t < 65536, "dataset: token id exceeds u16");
          detail::write_pod<uint16_t>(f, static_cast<uint16_t>(t));
        }
      }
    }
  }
  if (!f) throw io_error("dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("dataset: cannot read " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "BICA") throw io_error("dataset: bad magic in " + path);
  const auto version = detail::read_pod<uint32_t>(f);
  if (version != dataset_format_version)
    throw io_error("dataset: format version " + std::to_string(version) + " unsupported (expect " +
                   std::to_string(dataset_format_version) + ")");
  const auto count = detail::read_pod<uint32_t>(f);
  Dataset d;
  for (uint32_t si = 0; si < count; ++si) {
    SceneSample s;
    s.seed = detail::read_pod<uint64_t>(f);
    s.n_points = static_cast<int>(detail::read_pod<uint32_t>(f));
    require(s.n_points > 0, "dataset: empty scene");
    s.xyz.resize(static_cast<size_t>(s.n_points) * 3);
    for (auto& v : s.xyz) v = detail::read_pod<float>(f);
    s.rgb.resize(static_cast<size_t>(s.n_points) * 3);
    for (auto& v : s.rgb) v = detail::read_pod<float>(f);
    const auto n_obj = detail::read_pod<uint32_t>(f);
    for (uint32_t i = 0; i < n_obj; ++i) {
      Box b;
      for (auto& v : b.center) v = detail::read_pod<float>(f);
      for (auto& v : b.size) v = detail::read_pod<float>(f);
      s.gt.boxes.push_back(b);
      s.gt.cls.push_back(static_cast<int>(detail::read_pod<uint32_t>(f)));
      const auto n_refs = detail::read_pod<uint32_t>(f);
      std::vector<TokenSeq> refs;
      for (uint32_t r = 0; r < n_refs; ++r) {
        TokenSeq ref(detail::read_pod<uint32_t>(f));
        for (auto& t : ref) t = static_cast<int>(detail::read_pod<uint16_t>(f));
        refs.push_back(std::move(ref));
      }
      s.gt.refs.push_back(std::move(refs));
    }
    d.scenes.push_back(std::move(s));
  }
  return d;
}

}  // namespace bica
