#include "panp/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace panp {

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) {
  state_.seed = seed;
  uint64_t sm = seed;
  for (auto& w : state_.words) w = splitmix64(sm);
}

Rng Rng::from_state(const State& state) {
  Rng r;
  r.state_ = state;
  return r;
}

uint64_t Rng::next_u64() {
  auto& s = state_.words;
  const uint64_t result = rotl(s[0] + s[3], 23) + s[0];
  const uint64_t t = s[1] << 17;
  s[2] ^= s[0];
  s[3] ^= s[1];
  s[1] ^= s[2];
  s[0] ^= s[3];
  s[2] ^= t;
  s[3] = rotl(s[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

size_t Rng::uniform_index(size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_index: n must be positive");
  const uint64_t limit = UINT64_MAX - UINT64_MAX % static_cast<uint64_t>(n);
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<size_t>(x % static_cast<uint64_t>(n));
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("Rng::uniform_int: empty range");
  const auto span = static_cast<size_t>(static_cast<long long>(hi) - static_cast<long long>(lo) + 1);
  return lo + static_cast<int>(uniform_index(span));
}

double Rng::gauss() {
  if (state_.has_spare) {
    state_.has_spare = false;
    return state_.spare;
  }
  const double u = 1.0 - uniform();  // (0, 1] keeps the log finite
  const double r = std::sqrt(-2.0 * std::log(u));
  const double theta = 2.0 * std::numbers::pi * uniform();
  state_.spare = r * std::sin(theta);
  state_.has_spare = true;
  return r * std::cos(theta);
}

std::vector<double> Rng::gauss_vector(size_t n, double mean, double stddev) {
  std::vector<double> out(n);
  for (auto& v : out) v = mean + stddev * gauss();
  return out;
}

std::vector<size_t> Rng::permutation(size_t n) {
  std::vector<size_t> p(n);
  std::iota(p.begin(), p.end(), size_t{0});
  for (size_t i = n; i > 1; --i) {
    const size_t j = uniform_index(i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace panp
