#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bilalora {

// Named, independently seeded random stream. Streams derived from the same
// seed but different names do not share state, so changing how one component
// consumes randomness leaves the others untouched.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream);

  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  std::uint64_t next_seed() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

}  // namespace bilalora
