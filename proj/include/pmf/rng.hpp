#pragma once

#include <cstdint>
#include <string_view>

namespace pmf {

/// SplitMix64 counter-based generator.
///
/// Output k of a stream seeded with s is mix(s + (k+1) * 0x9E3779B97F4A7C15),
/// so every draw depends only on the seed and the draw index. Sub-streams are
/// derived by hashing the parent seed with a key, which keeps per-record and
/// per-module randomness independent of call order elsewhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (both outputs are used).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p = 0.5) { return uniform() < p; }

  Rng fork(std::uint64_t key) const;
  Rng fork(std::string_view label) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

/// FNV-1a, used to turn stream labels into fork keys.
std::uint64_t hash_label(std::string_view label);

}  // namespace pmf
