#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "dime/common.hpp"

namespace dime {

// Deterministic random source. All draws are derived from the raw mt19937_64
// output stream (whose sequence is fixed by the standard), never from
// std::*_distribution, so identical seeds give identical draws on every
// platform and toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Decorrelated child stream, e.g. derive(seed, kInitStream).
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix64(seed + 0x9e3779b97f4a7c15ull * (stream + 1)));
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
  // so the state is exactly the engine state.
  double normal() {
    double u1 = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n), rejection sampled (unbiased).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ValueError("uniform_int: n must be positive");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates.
  template <class RandomIt>
  void shuffle(RandomIt first, RandomIt last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::uint64_t j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  template <class Container>
  void shuffle(Container& c) {
    shuffle(c.begin(), c.end());
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw ValueError("Rng::set_state: malformed state string");
  }

 private:
  static std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

// Stream tags for Rng::derive.
inline constexpr std::uint64_t kInitStream = 1;   // parameter initialization
inline constexpr std::uint64_t kTrainStream = 2;  // shuffling, dropout, e_r draws
inline constexpr std::uint64_t kDataStream = 3;   // synthetic data generation

}  // namespace dime
