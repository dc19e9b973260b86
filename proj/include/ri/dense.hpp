#pragma once

// Small dense LU with partial pivoting, for the unsymmetric finite-rank
// systems behind the tilted resolvent and the Laplace-transform oracles.

#include <cmath>
#include <string>
#include <vector>

#include "ri/common.hpp"

namespace ri::detail {

struct Lu {
  int n = 0;
  std::vector<double> a;   // packed row-major factors
  std::vector<int> piv;
};

inline Lu lu_factor(std::vector<double> a, int n, const char* what) {
  Lu f;
  f.n = n;
  f.piv.resize(static_cast<size_t>(n));
  double scale = 0.0;
  for (double v : a) scale = std::max(scale, std::fabs(v));
  for (int k = 0; k < n; ++k) {
    int p = k;
    for (int i = k + 1; i < n; ++i)
      if (std::fabs(a[static_cast<size_t>(i) * n + k]) > std::fabs(a[static_cast<size_t>(p) * n + k])) p = i;
    f.piv[static_cast<size_t>(k)] = p;
    if (p != k)
      for (int j = 0; j < n; ++j)
        std::swap(a[static_cast<size_t>(k) * n + j], a[static_cast<size_t>(p) * n + j]);
    double d = a[static_cast<size_t>(k) * n + k];
    if (std::fabs(d) <= 1e-13 * std::max(scale, 1.0))
      throw error(errc::numeric, std::string(what) + ": singular system (pivot " +
                                     std::to_string(d) + " at step " + std::to_string(k) + ")");
    for (int i = k + 1; i < n; ++i) {
      double m = a[static_cast<size_t>(i) * n + k] / d;
      a[static_cast<size_t>(i) * n + k] = m;
      for (int j = k + 1; j < n; ++j)
        a[static_cast<size_t>(i) * n + j] -= m * a[static_cast<size_t>(k) * n + j];
    }
  }
  f.a = std::move(a);
  return f;
}

inline void lu_solve(const Lu& f, std::vector<double>& x) {
  int n = f.n;
  // All row swaps go first, in factorization order; the stored L rows are the
  // post-swap ones, so interleaving swaps with the forward solve is wrong.
  for (int k = 0; k < n; ++k) {
    int p = f.piv[static_cast<size_t>(k)];
    if (p != k) std::swap(x[static_cast<size_t>(k)], x[static_cast<size_t>(p)]);
  }
  for (int k = 0; k < n; ++k)
    for (int i = k + 1; i < n; ++i)
      x[static_cast<size_t>(i)] -= f.a[static_cast<size_t>(i) * n + k] * x[static_cast<size_t>(k)];
  for (int i = n - 1; i >= 0; --i) {
    double s = x[static_cast<size_t>(i)];
    for (int j = i + 1; j < n; ++j) s -= f.a[static_cast<size_t>(i) * n + j] * x[static_cast<size_t>(j)];
    x[static_cast<size_t>(i)] = s / f.a[static_cast<size_t>(i) * n + i];
  }
}

}  // namespace ri::detail
