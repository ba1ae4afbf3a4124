#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "hydramix/errors.hpp"

namespace hydramix {

// Deterministic random source. mt19937_64 gives a portable bit stream and the
// distributions below are hand-rolled so draws are identical across standard
// library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Derives an independent substream from (seed, tags...). Used to give each
  // record / epoch / step its own generator so results do not depend on
  // evaluation order elsewhere.
  static Rng stream(uint64_t seed, std::initializer_list<uint64_t> tags) {
    uint64_t s = splitmix(seed ^ 0x9e3779b97f4a7c15ull);
    for (uint64_t t : tags) s = splitmix(s ^ splitmix(t + 0x632be59bd9b4e019ull));
    return Rng(s);
  }

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw ArgumentError("uniform_int requires n > 0");
    uint64_t un = uint64_t(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return int64_t(x % un);
  }

  double normal() {
    // Box-Muller, cosine branch only; u1 in (0,1] avoids log(0).
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 handled by boosting.
  double gamma(double shape) {
    if (shape <= 0.0) throw ArgumentError("gamma shape must be positive");
    if (shape < 1.0) {
      double u = 1.0 - uniform();  // (0,1]
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    double d = shape - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = 1.0 - uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double beta(double a, double b) {
    if (a <= 0.0 || b <= 0.0) throw ArgumentError("beta shape parameters must be positive");
    double ga = gamma(a);
    double gb = gamma(b);
    double s = ga + gb;
    return s > 0.0 ? ga / s : 0.5;
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[size_t(i)], v[size_t(j)]);
    }
  }

 private:
  static uint64_t splitmix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 eng_;
};

}  // namespace hydramix
