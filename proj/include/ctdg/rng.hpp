#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ctdg {

/// Seeded generator. Independent components draw from named sub-streams so
/// that e.g. weight initialization does not shift when shuffling changes.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Deterministic child stream keyed by `name`.
  Rng substream(std::string_view name) const;

  uint64_t seed() const { return seed_; }
  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

uint64_t mix_seed(uint64_t seed, std::string_view name);

}  // namespace ctdg
