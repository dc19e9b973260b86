#pragma once

// Counter-based RNG (Philox4x32-10) plus the handful of samplers the
// simulations need. Counter mode gives cheap independent streams keyed by
// (master seed, stream index), so trajectory i always sees the same draws
// no matter how work is scheduled across workers.

#include <cmath>
#include <cstdint>

#include "ri/common.hpp"

namespace ri {

class Rng {
 public:
  Rng(uint64_t master_seed, uint64_t stream) {
    k0_ = static_cast<uint32_t>(master_seed);
    k1_ = static_cast<uint32_t>(master_seed >> 32);
    c_[0] = 0;
    c_[1] = 0;
    c_[2] = static_cast<uint32_t>(stream);
    c_[3] = static_cast<uint32_t>(stream >> 32);
  }

  uint64_t next_u64() {
    if (have_ == 0) refill();
    return buf_[--have_];
  }

  // Uniform on [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Exp(1); argument of log stays in (0,1].
  double exponential() { return -std::log1p(-uniform()); }

  double normal() {
    if (have_normal_) {
      have_normal_ = false;
      return cached_normal_;
    }
    double r = std::sqrt(2.0 * exponential());
    double t = 6.283185307179586476925286766559 * uniform();
    cached_normal_ = r * std::sin(t);
    have_normal_ = true;
    return r * std::cos(t);
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) throw error(errc::bad_argument, "Rng::below(0)");
    uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= lim);
    return x % n;
  }

  uint64_t poisson(double mean) {
    if (!(mean >= 0.0)) throw error(errc::bad_argument, "poisson mean must be >= 0");
    if (mean == 0.0) return 0;
    if (mean <= 12.0) {
      // Inversion by multiplication.
      double limit = std::exp(-mean), p = 1.0;
      uint64_t k = 0;
      do {
        ++k;
        p *= uniform();
      } while (p > limit);
      return k - 1;
    }
    return poisson_ptrs(mean);
  }

 private:
  // Hoermann's PTRS transformed-rejection sampler, valid for mean >= ~10.
  uint64_t poisson_ptrs(double mu) {
    double smu = std::sqrt(mu);
    double b = 0.931 + 2.53 * smu;
    double a = -0.059 + 0.02483 * b;
    double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    double v_r = 0.9277 - 3.6224 / (b - 2.0);
    double lmu = std::log(mu);
    for (;;) {
      double U = uniform() - 0.5;
      double V = uniform();
      double us = 0.5 - std::fabs(U);
      double kf = std::floor((2.0 * a / us + b) * U + mu + 0.43);
      if (us >= 0.07 && V <= v_r) return static_cast<uint64_t>(kf);
      if (kf < 0.0) continue;
      if (us < 0.013 && V > us) continue;
      double k = kf;
      if (std::log(V) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
          k * lmu - mu - std::lgamma(k + 1.0)) {
        return static_cast<uint64_t>(kf);
      }
    }
  }

  static uint32_t mulhi(uint32_t a, uint32_t b) {
    return static_cast<uint32_t>((static_cast<uint64_t>(a) * b) >> 32);
  }

  void refill() {
    uint32_t x0 = c_[0], x1 = c_[1], x2 = c_[2], x3 = c_[3];
    uint32_t kk0 = k0_, kk1 = k1_;
    for (int round = 0; round < 10; ++round) {
      uint32_t hi0 = mulhi(0xD2511F53u, x0), lo0 = 0xD2511F53u * x0;
      uint32_t hi1 = mulhi(0xCD9E8D57u, x2), lo1 = 0xCD9E8D57u * x2;
      uint32_t y0 = hi1 ^ x1 ^ kk0;
      uint32_t y1 = lo1;
      uint32_t y2 = hi0 ^ x3 ^ kk1;
      uint32_t y3 = lo0;
      x0 = y0;
      x1 = y1;
      x2 = y2;
      x3 = y3;
      kk0 += 0x9E3779B9u;
      kk1 += 0xBB67AE85u;
    }
    buf_[0] = (static_cast<uint64_t>(x1) << 32) | x0;
    buf_[1] = (static_cast<uint64_t>(x3) << 32) | x2;
    have_ = 2;
    if (++c_[0] == 0) ++c_[1];  // block counter; streams live in c_[2..3]
  }

  uint32_t k0_, k1_;
  uint32_t c_[4];
  uint64_t buf_[2] = {0, 0};
  int have_ = 0;
  bool have_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace ri
