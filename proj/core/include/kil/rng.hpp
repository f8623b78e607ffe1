#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace kil {

// splitmix64 step: advances the state and returns a well-mixed 64-bit word.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Hash-combine for deriving independent substream seeds from a base seed.
// Everything downstream of a seed is a pure function of it, so replacing
// library distributions with this keeps outputs identical across platforms
// and across worker counts.
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b = 0,
                           std::uint64_t c = 0, std::uint64_t d = 0) {
  std::uint64_t s = a;
  std::uint64_t out = splitmix64(s);
  s ^= b + 0x9E3779B97F4A7C15ULL + (out << 6) + (out >> 2);
  out = splitmix64(s);
  s ^= c + 0x9E3779B97F4A7C15ULL + (out << 6) + (out >> 2);
  out = splitmix64(s);
  s ^= d + 0x9E3779B97F4A7C15ULL + (out << 6) + (out >> 2);
  return splitmix64(s);
}

inline std::uint64_t hash_str(const std::string_view s, std::uint64_t seed = 0) {
  std::uint64_t h = 0xCBF29CE484222325ULL ^ seed;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return mix64(h);
}

// Self-contained deterministic generator (splitmix64 + Box-Muller).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(mix64(seed)) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double sigma) { return sigma * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream; derivation depends on the constructor seed
  // only, never on how many values were drawn from this stream.
  Rng child(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    return Rng(mix64(seed_, a ^ 0xA5A5A5A5A5A5A5A5ULL, b, c));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace kil
