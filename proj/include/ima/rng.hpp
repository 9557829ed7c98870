#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ima {

// Deterministic random source. The mt19937_64 engine is bit-exact across
// platforms; the distribution mappings below are ours, so streams do not
// depend on libstdc++ internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second deviate is cached.
  double normal();

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Inclusive range. Modulo mapping; bias is negligible for desk-scale spans.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over bytes; used for id-based splits and seed derivation.
std::uint64_t fnv1a(std::string_view text);

// splitmix64-style combine for deriving independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace ima
