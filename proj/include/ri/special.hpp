#pragma once

// Numerics used by the Green-function table: Gauss-Legendre panels, scaled
// modified Bessel functions i_n(z) = e^{-z} I_n(z) for a whole range of
// orders at once, and a small adaptive 1D quadrature.

#include <cmath>
#include <cstdint>
#include <vector>

#include "ri/common.hpp"

namespace ri {

// Nodes/weights of n-point Gauss-Legendre on [-1,1], Newton iteration on
// the Legendre recurrence. Deterministic, accurate to machine precision.
struct GaussLegendre {
  std::vector<double> x, w;
  explicit GaussLegendre(int n) {
    x.resize(static_cast<size_t>(n));
    w.resize(static_cast<size_t>(n));
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < (n + 1) / 2; ++i) {
      double z = std::cos(pi * (i + 0.75) / (n + 0.5));
      double pp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = 0.0;
        for (int j = 0; j < n; ++j) {
          double p2 = p1;
          p1 = p0;
          p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
        }
        pp = n * (z * p0 - p1) / (z * z - 1.0);
        double dz = p0 / pp;
        z -= dz;
        if (std::fabs(dz) < 1e-15) break;
      }
      x[static_cast<size_t>(i)] = -z;
      x[static_cast<size_t>(n - 1 - i)] = z;
      w[static_cast<size_t>(i)] = 2.0 / ((1.0 - z * z) * pp * pp);
      w[static_cast<size_t>(n - 1 - i)] = w[static_cast<size_t>(i)];
    }
  }
};

// Fills out[0..nmax] with i_n(z) = e^{-z} I_n(z).
//
// Moderate z: Miller's downward recurrence, normalized by
// i_0 + 2*sum_{n>=1} i_n = 1. Large z (z >> nmax^2): the uniform large-z
// expansion per order is cheaper and avoids the very long recurrence the
// dominance condition would force.
inline void scaled_bessel_i(double z, int nmax, double* out) {
  if (z < 0.0 || nmax < 0) throw error(errc::bad_argument, "scaled_bessel_i: bad input");
  if (z == 0.0) {
    out[0] = 1.0;
    for (int n = 1; n <= nmax; ++n) out[static_cast<size_t>(n)] = 0.0;
    return;
  }
  const double z_asym = 500.0 * (static_cast<double>(nmax) * nmax + 1.0);
  if (z >= z_asym && z >= 1e4) {
    // e^{-z} I_n(z) ~ (2 pi z)^{-1/2} [1 - (m-1)/(8z) + (m-1)(m-9)/(2(8z)^2)
    //   - (m-1)(m-9)(m-25)/(6(8z)^3)], m = 4n^2.
    double pref = 1.0 / std::sqrt(2.0 * 3.14159265358979323846 * z);
    double i8z = 1.0 / (8.0 * z);
    for (int n = 0; n <= nmax; ++n) {
      double m = 4.0 * n * n;
      double t1 = (m - 1.0) * i8z;
      double t2 = (m - 1.0) * (m - 9.0) * i8z * i8z / 2.0;
      double t3 = (m - 1.0) * (m - 9.0) * (m - 25.0) * i8z * i8z * i8z / 6.0;
      out[static_cast<size_t>(n)] = pref * (1.0 - t1 + t2 - t3);
    }
    return;
  }
  // Start order: i_M / i_0 ~ exp(-(M^2 - n^2)/(2z)) must be ~1e-18.
  int M = nmax + 2 + static_cast<int>(std::ceil(std::sqrt(83.0 * z + static_cast<double>(nmax) * nmax)));
  std::vector<double> v(static_cast<size_t>(M) + 2, 0.0);
  v[static_cast<size_t>(M) + 1] = 0.0;
  v[static_cast<size_t>(M)] = 1e-280;
  for (int n = M; n >= 1; --n) {
    v[static_cast<size_t>(n) - 1] = v[static_cast<size_t>(n) + 1] + (2.0 * n / z) * v[static_cast<size_t>(n)];
    if (v[static_cast<size_t>(n) - 1] > 1e260) {
      double s = 1e-260;
      for (int m2 = n - 1; m2 <= M + 1; ++m2) v[static_cast<size_t>(m2)] *= s;
    }
  }
  double norm = v[0];
  for (int n = 1; n <= M; ++n) norm += 2.0 * v[static_cast<size_t>(n)];
  double inv = 1.0 / norm;
  for (int n = 0; n <= nmax; ++n) out[static_cast<size_t>(n)] = v[static_cast<size_t>(n)] * inv;
}

// Adaptive Gauss-Kronrod-free quadrature: compares GL-10 vs GL-21 on each
// interval and bisects until the difference is below tol. Good enough for
// the smooth / mildly singular 1D integrands we feed it.
namespace detail {
inline const GaussLegendre& gl10() {
  static GaussLegendre g(10);
  return g;
}
inline const GaussLegendre& gl21() {
  static GaussLegendre g(21);
  return g;
}
}  // namespace detail

template <class F>
double integrate_adaptive(F&& f, double a, double b, double tol, int max_depth = 32) {
  struct Seg {
    double a, b, tol;
    int depth;
  };
  std::vector<Seg> stack{{a, b, tol, 0}};
  double total = 0.0;
  const GaussLegendre& lo = detail::gl10();
  const GaussLegendre& hi = detail::gl21();
  // Hard segment budget: once exhausted, remaining segments are accepted as-is,
  // so a noisy integrand degrades accuracy instead of hanging.
  long budget = 400000;
  while (!stack.empty()) {
    Seg s = stack.back();
    stack.pop_back();
    double mid = 0.5 * (s.a + s.b), half = 0.5 * (s.b - s.a);
    double c = 0.0, fine = 0.0;
    for (size_t i = 0; i < lo.x.size(); ++i) c += lo.w[i] * f(mid + half * lo.x[i]);
    for (size_t i = 0; i < hi.x.size(); ++i) fine += hi.w[i] * f(mid + half * hi.x[i]);
    c *= half;
    fine *= half;
    double diff = std::fabs(fine - c);
    // Relative floor: never demand agreement below what doubles can express,
    // or singular corners force a full binary tree to max_depth.
    if (--budget < 0 || diff <= s.tol || diff <= 1e-14 * std::fabs(fine) ||
        s.depth >= max_depth) {
      total += fine;
    } else {
      stack.push_back({s.a, mid, 0.5 * s.tol, s.depth + 1});
      stack.push_back({mid, s.b, 0.5 * s.tol, s.depth + 1});
    }
  }
  return total;
}

// CRC32 (IEEE 802.3, reflected), used by the table cache format.
inline uint32_t crc32(const void* data, size_t n, uint32_t seed = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// Kolmogorov distribution tail Q(lambda) = P(sup|B_bridge| > lambda); the KS
// p-value is Q(sqrt(n) * D_n).  Dual series: the theta-transformed form
// converges fast for small lambda, the alternating form for large.
inline double kolmogorov_q(double lambda) {
  if (!(lambda > 0)) return 1.0;
  const double pi = 3.14159265358979323846;
  if (lambda < 1.18) {
    double t = std::exp(-pi * pi / (8.0 * lambda * lambda));
    double p = std::sqrt(2.0 * pi) / lambda * (t + std::pow(t, 9.0) + std::pow(t, 25.0));
    return 1.0 - p;
  }
  double q = 0.0, sign = 1.0;
  for (int k = 1; k <= 8; ++k) {
    q += sign * 2.0 * std::exp(-2.0 * k * k * lambda * lambda);
    sign = -sign;
  }
  return std::max(q, 0.0);
}

}  // namespace ri
