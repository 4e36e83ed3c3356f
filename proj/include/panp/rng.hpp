#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace panp {

/// Deterministic pseudo-random source (xoshiro256++ seeded via splitmix64).
/// State is explicit so checkpoints can persist it; identical seeds give
/// bit-identical streams on every platform.
class Rng {
 public:
  struct State {
    uint64_t seed = 0;
    std::array<uint64_t, 4> words{};
    bool has_spare = false;
    double spare = 0.0;
  };

  explicit Rng(uint64_t seed);
  static Rng from_state(const State& state);

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  size_t uniform_index(size_t n);        // [0, n), unbiased
  int uniform_int(int lo, int hi);       // [lo, hi] inclusive
  double gauss();                        // standard normal, Box-Muller with cached spare
  std::vector<double> gauss_vector(size_t n, double mean = 0.0, double stddev = 1.0);
  std::vector<size_t> permutation(size_t n);

  uint64_t seed() const { return state_.seed; }
  const State& state() const { return state_; }

 private:
  Rng() = default;
  State state_;
};

}  // namespace panp
