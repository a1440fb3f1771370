#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace bica {

// xoshiro256** seeded through splitmix64. Hand-rolled so that streams are
// bit-stable across platforms and the full state (4 words) serializes into
// checkpoints.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  // Independent child stream, e.g. per-scene RNG derived from (seed, index).
  Rng fork(uint64_t stream) const {
    uint64_t x = s_[0] ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    Rng r;
    for (auto& w : r.s_) w = splitmix64(x);
    return r;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(next_double());
  }

  // Box-Muller; recomputes a fresh pair each call to keep the state layout trivial.
  float normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-12) u1 = 1e-12;
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
  }

  // [0, n)
  int next_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::array<uint64_t, 4> s_{};
};

}  // namespace bica
