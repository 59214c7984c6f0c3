#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace tapl {

std::uint64_t splitmix64(std::uint64_t x);

/// Seed of a named sub-stream of `seed` (e.g. "sampling", "init").
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

/// Deterministic seed for a tuple of integers, used for on-demand samples.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// Distributions are implemented on top of the raw engine output so the full
// generator state is the engine state (std::normal_distribution caches a
// spare value that would not survive a checkpoint).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  std::string state() const;
  void set_state(const std::string& s);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tapl
