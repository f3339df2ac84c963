#pragma once

#include <cmath>
#include <cstdint>

namespace translab {

// Deterministic splitmix64 stream. Every stochastic step in the project draws
// from one of these, keyed explicitly, so reruns are bit-reproducible and
// independent of scheduling or batching.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Derives an independent stream from (seed, key), e.g. (attack seed, image
  // index) or (tie seed, step, image index).
  static Rng keyed(std::uint64_t seed, std::uint64_t key) {
    Rng mixer(seed ^ (0x9e3779b97f4a7c15ULL + key * 0xbf58476d1ce4e5b9ULL));
    return Rng(mixer.next_u64());
  }
  static Rng keyed(std::uint64_t seed, std::uint64_t k1, std::uint64_t k2) {
    Rng mixer(Rng::keyed(seed, k1).next_u64() ^ (k2 * 0x94d049bb133111ebULL));
    return Rng(mixer.next_u64());
  }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(6.283185307179586 * u2);
    has_spare_ = true;
    return mag * std::cos(6.283185307179586 * u2);
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(T& seq) {
    for (std::size_t i = seq.size(); i > 1; --i) {
      std::size_t j = next_u64() % i;
      std::swap(seq[i - 1], seq[j]);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace translab
