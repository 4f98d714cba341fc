#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace refgeo {

// Counter-based generator: every output word is a pure function of
// (seed, stream, counter). Words come from chained splitmix64 finalizers,
// streams are named with FNV-1a 64 so the layout is easy to reproduce in
// another language. Random access by counter, no hidden state.
class CounterRng {
 public:
  static constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
  static constexpr uint64_t kFnvPrime = 0x100000001b3ull;

  static uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  static uint64_t stream_id(std::string_view name) {
    uint64_t h = kFnvOffset;
    for (unsigned char c : name) {
      h ^= c;
      h *= kFnvPrime;
    }
    return h;
  }

  static uint64_t word(uint64_t seed, uint64_t stream, uint64_t counter) {
    return mix(mix(mix(seed) ^ stream) ^ counter);
  }

  CounterRng(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}
  CounterRng(uint64_t seed, std::string_view stream_name)
      : CounterRng(seed, stream_id(stream_name)) {}

  uint64_t next_u64() { return word(seed_, stream_, counter_++); }

  // [0, 1), 53-bit mantissa
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // modulo draw; bias is negligible for the small n used here
  uint64_t uniform_u64(uint64_t n) { return next_u64() % n; }

  // Box-Muller, consumes two counters
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_ = 0;
};

// Deterministic sub-seed derivation for per-item generators.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  return CounterRng::mix(CounterRng::mix(CounterRng::mix(seed) ^ a) ^ b);
}

// Generation seed for one prompt, stable under prompt-set reordering.
inline uint64_t prompt_seed(uint64_t seed, std::string_view prompt_id) {
  return derive_seed(seed, CounterRng::stream_id(prompt_id));
}

}  // namespace refgeo
