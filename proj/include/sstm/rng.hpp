#pragma once

#include <cstdint>
#include <random>

namespace sstm {

// Deterministic RNG wrapper. std::mt19937 output is portable; the
// uniform/normal mappings below are hand-rolled so that streams are
// bit-identical across standard libraries (std::*_distribution is not).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  // [0, 1) with 24 bits of mantissa
  double uniform() { return (eng_() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // inclusive bounds
  int randint(int lo, int hi) {
    return lo + static_cast<int>(uniform() * (static_cast<double>(hi) - lo + 1));
  }

  uint32_t next_u32() { return eng_(); }

 private:
  std::mt19937 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sstm
