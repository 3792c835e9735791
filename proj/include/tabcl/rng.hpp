#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tabcl {

/// Seeded generator with distribution code of our own, so streams are
/// identical across standard library implementations (std::mt19937_64 is
/// fully specified; the std distributions are not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, bound); bound must be > 0. Unbiased (rejection).
  std::size_t index(std::size_t bound);
  /// Standard normal via Box-Muller (no cached second value).
  double normal();

 private:
  std::mt19937_64 engine_;
};

std::uint64_t fnv1a64(std::string_view bytes);

/// Derives an independent child seed from a root seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

}  // namespace tabcl
