#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace latcast {

// Deterministic, serializable RNG (xoshiro256++ seeded via splitmix64).
// All distributions are implemented in-house so that a (seed, call-order)
// pair produces identical streams on every build of this project; the
// standard library distributions make no such guarantee.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller, cosine branch only; u1 shifted into (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Weibull with scale 1 and shape k, via inverse CDF.
  double weibull(double k) {
    const double u = 1.0 - uniform();  // (0, 1]
    return std::pow(-std::log(u), 1.0 / k);
  }

  // Derive an independent child stream. Splitting mixes the parent state
  // with the stream id, so worker streams never overlap the parent's.
  Rng split(std::uint64_t stream) const {
    std::uint64_t x = state_[0] ^ rotl(state_[2], 29) ^ (stream * 0x9e3779b97f4a7c15ULL);
    return Rng(splitmix64(x));
  }

  std::array<std::uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::array<std::uint64_t, 4> state_{};
};

}  // namespace latcast
