#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace mantis {

/// splitmix64 finalizer; used to derive independent stream seeds from
/// (base seed, stream index) pairs.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

/// Seeded generator with distribution code that does not depend on the
/// standard library's implementation-defined distributions, so a seed
/// reproduces the same values on any toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::size_t below(std::size_t n);
  /// Standard normal via Box-Muller.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  Rng fork(std::uint64_t stream) { return Rng(mix_seed(next_u64(), stream)); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mantis
