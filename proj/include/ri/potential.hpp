#pragma once

// Discrete potential theory on Z^d for the rate-1 continuous-time SRW:
// equilibrium measure / capacity of a finite set, hitting distributions,
// equilibrium potential h_A, Dirichlet forms (unit and scaled lattice),
// and the Green function killed outside a finite domain.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "ri/common.hpp"
#include "ri/green.hpp"

namespace ri {

using FieldMap = std::unordered_map<Site, double, SiteHash>;

namespace detail {

// Dense Cholesky, lower triangular in place (row-major n x n). Returns the
// ratio max(diag)/min(diag) of the factor as a cheap conditioning proxy.
inline double cholesky(std::vector<double>& a, int n) {
  double mx = 0.0, mn = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
      if (i == j) {
        if (s <= 0.0)
          throw error(errc::numeric,
                      "restricted Green matrix not positive definite (pivot " +
                          std::to_string(s) + " at row " + std::to_string(i) + ")");
        double l = std::sqrt(s);
        a[static_cast<size_t>(i) * n + i] = l;
        if (i == 0) {
          mx = mn = l;
        } else {
          mx = std::max(mx, l);
          mn = std::min(mn, l);
        }
      } else {
        a[static_cast<size_t>(i) * n + j] = s / a[static_cast<size_t>(j) * n + j];
      }
    }
    for (int j = i + 1; j < n; ++j) a[static_cast<size_t>(i) * n + j] = 0.0;
  }
  return mn > 0.0 ? (mx / mn) * (mx / mn) : std::numeric_limits<double>::infinity();
}

inline void chol_solve(const std::vector<double>& l, int n, std::vector<double>& x) {
  for (int i = 0; i < n; ++i) {
    double s = x[static_cast<size_t>(i)];
    for (int k = 0; k < i; ++k) s -= l[static_cast<size_t>(i) * n + k] * x[static_cast<size_t>(k)];
    x[static_cast<size_t>(i)] = s / l[static_cast<size_t>(i) * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = x[static_cast<size_t>(i)];
    for (int k = i + 1; k < n; ++k) s -= l[static_cast<size_t>(k) * n + i] * x[static_cast<size_t>(k)];
    x[static_cast<size_t>(i)] = s / l[static_cast<size_t>(i) * n + i];
  }
}

}  // namespace detail

// Equilibrium measure, capacity, and the potential h_A of a finite set.
struct PotentialSolution {
  SiteSet set;            // A, in insertion order
  std::vector<double> e;  // equilibrium mass per site of A
  double cap = 0.0;
  double condition = 1.0;  // conditioning proxy of the solved system

  // h_A(x) = sum_y g(x,y) e_A(y) = P_x[H_A < infinity]
  double h(const GreenTable& green, const Site& x) const {
    double s = 0.0;
    for (size_t i = 0; i < set.size(); ++i)
      if (e[i] != 0.0) s += green.at(x, set[i]) * e[i];
    return s;
  }
};

// Factorized restriction of the Green matrix to the internal boundary of A.
// The equilibrium measure charges only boundary sites (a walk escaping A
// last touches A there), and interior rows of the defining system follow
// from the maximum principle, so the dense solve involves boundary sites
// only. One factorization serves capacity, h_A, and every hitting query.
class RestrictedGreen {
 public:
  RestrictedGreen(const SiteSet& A, const GreenTable& green) : g_(&green), a_(A) {
    if (A.empty()) throw error(errc::bad_argument, "equilibrium system: empty set");
    if (A.dim() != green.dim())
      throw error(errc::bad_argument, "equilibrium system: dimension mismatch");
    bd_ = a_.internal_boundary();
    n_ = static_cast<int>(bd_.size());
    if (n_ > 4000)
      throw error(errc::out_of_range,
                  "equilibrium system: " + std::to_string(n_) +
                      " boundary sites exceeds the direct-solve cap of 4000");
    Box bb = a_.bounding_box();
    for (int i = 0; i < a_.dim(); ++i)
      if (bb.hi[static_cast<size_t>(i)] - bb.lo[static_cast<size_t>(i)] - 1 > green.extent())
        throw error(errc::out_of_range, "equilibrium system: set diameter exceeds table extent");

    chol_.assign(static_cast<size_t>(n_) * n_, 0.0);
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j <= i; ++j)
        chol_[static_cast<size_t>(i) * n_ + j] = green.at(site(i), site(j));
    cond_ = detail::cholesky(chol_, n_);

    std::vector<double> one(static_cast<size_t>(n_), 1.0);
    detail::chol_solve(chol_, n_, one);
    e_.assign(a_.size(), 0.0);
    cap_ = 0.0;
    for (int i = 0; i < n_; ++i) {
      // equilibrium masses are nonnegative; forgive roundoff dust only
      if (one[static_cast<size_t>(i)] < -1e-10)
        throw error(errc::numeric, "equilibrium system: negative mass beyond roundoff");
      double m = std::max(0.0, one[static_cast<size_t>(i)]);
      e_[static_cast<size_t>(bd_[static_cast<size_t>(i)])] = m;
      cap_ += m;
    }

    // Boundary reduction is exact (interior rows follow from the maximum
    // principle); spot-check a few interior rows anyway.
    if (static_cast<size_t>(n_) < a_.size()) {
      int checked = 0;
      for (size_t i = 0; i < a_.size() && checked < 8; ++i) {
        if (e_[i] != 0.0) continue;
        double hv = 0.0;
        for (int j = 0; j < n_; ++j)
          hv += green.at(a_[i], site(j)) * e_[static_cast<size_t>(bd_[static_cast<size_t>(j)])];
        if (std::fabs(hv - 1.0) > 1e-8)
          throw error(errc::numeric, "equilibrium system: interior potential deviates from 1");
        ++checked;
      }
    }
  }

  const SiteSet& set() const { return a_; }
  const GreenTable& green() const { return *g_; }
  double cap() const { return cap_; }
  double condition() const { return cond_; }
  const std::vector<double>& equilibrium() const { return e_; }

  PotentialSolution solution() const {
    PotentialSolution s;
    s.set = a_;
    s.e = e_;
    s.cap = cap_;
    s.condition = cond_;
    return s;
  }

  // P_x[H_A < inf, X_{H_A} = y] for each y of A (entry happens on the
  // internal boundary). Point mass when x already lies in A.
  std::vector<double> hitting_from(const Site& x) const {
    std::vector<double> out(a_.size(), 0.0);
    int ix = a_.index_of(x);
    if (ix >= 0) {
      out[static_cast<size_t>(ix)] = 1.0;
      return out;
    }
    std::vector<double> rhs(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) rhs[static_cast<size_t>(i)] = g_->at(x, site(i));
    detail::chol_solve(chol_, n_, rhs);
    for (int i = 0; i < n_; ++i)
      out[static_cast<size_t>(bd_[static_cast<size_t>(i)])] =
          std::max(0.0, rhs[static_cast<size_t>(i)]);
    return out;
  }

  double h(const Site& x) const {
    if (a_.contains(x)) return 1.0;
    double s = 0.0;
    for (double m : hitting_from(x)) s += m;
    return s;
  }

 private:
  const Site& site(int i) const { return a_[static_cast<size_t>(bd_[static_cast<size_t>(i)])]; }

  const GreenTable* g_;
  SiteSet a_;
  std::vector<int> bd_;
  std::vector<double> chol_;
  std::vector<double> e_;
  double cap_ = 0.0, cond_ = 1.0;
  int n_ = 0;
};

inline PotentialSolution capacity_and_equilibrium(const SiteSet& A, const GreenTable& green) {
  return RestrictedGreen(A, green).solution();
}

inline std::vector<double> hitting_distribution(const Site& x, const SiteSet& A,
                                                const GreenTable& green) {
  return RestrictedGreen(A, green).hitting_from(x);
}

// Dirichlet form value together with the lattice it was computed on.
struct DirichletFormValue {
  double value = 0.0;
  int scale_n = 1;  // 1: unit lattice, N > 1: lattice (1/N) Z^d
};

namespace detail {

// sum over unordered nearest-neighbor edges meeting the support of (dh)^2
inline double edge_energy(const FieldMap& h, int d) {
  auto val = [&](const Site& x) {
    auto it = h.find(x);
    return it == h.end() ? 0.0 : it->second;
  };
  double s = 0.0;
  for (const auto& [x, hx] : h) {
    for (int i = 0; i < d; ++i) {
      Site y = x;
      y[static_cast<size_t>(i)] += 1;
      double dv = val(y) - hx;
      s += dv * dv;  // edge with lower end in the support
      y[static_cast<size_t>(i)] -= 2;
      if (h.find(y) == h.end()) s += hx * hx;  // lower end outside the support
    }
  }
  return s;
}

}  // namespace detail

// E(h,h) = (1/2) sum_{y ~ x} (1/2d) (h(y)-h(x))^2, each unordered edge once
// at weight 1/(2d); equals <h, -Lh> for finitely supported h.
inline DirichletFormValue dirichlet_form(const FieldMap& h, int d) {
  if (d < 1 || d > kMaxDim) throw error(errc::bad_argument, "dirichlet_form: bad dimension");
  return {detail::edge_energy(h, d) / (2.0 * d), 1};
}

// E_N(h,h) = (1/(2 N^{d-2})) sum over unordered edges of (1/N) Z^d; h is
// indexed by the integer grid point, i.e. h(y) for y = x/N.
inline DirichletFormValue dirichlet_form_scaled(const FieldMap& h, int d, int N) {
  if (d < 3 || d > kMaxDim) throw error(errc::bad_argument, "dirichlet_form_scaled: bad dimension");
  if (N < 1) throw error(errc::bad_argument, "dirichlet_form_scaled: N must be >= 1");
  return {detail::edge_energy(h, d) / (2.0 * std::pow(static_cast<double>(N), d - 2)), N};
}

// Green function of the walk killed outside U: the unique function of x
// vanishing off U with L g_U(. , y) = -delta_y on U. Solved by conjugate
// gradients on the sites of U ((-L) restricted to U is SPD).
inline double kill_outside(const GreenTable& green, const SiteSet& U, const Site& x,
                           const Site& y) {
  int d = green.dim();
  if (U.dim() != d) throw error(errc::bad_argument, "kill_outside: dimension mismatch");
  int iy = U.index_of(y);
  if (iy < 0 || U.index_of(x) < 0) return 0.0;  // vanishes off U by convention

  size_t n = U.size();
  std::vector<int> nbrs(n * static_cast<size_t>(2 * d));
  for (size_t i = 0; i < n; ++i) {
    int c = 0;
    for (int k = 0; k < d; ++k) {
      for (int sgn = -1; sgn <= 1; sgn += 2) {
        Site t = U[i];
        t[static_cast<size_t>(k)] += sgn;
        nbrs[i * static_cast<size_t>(2 * d) + c++] = U.index_of(t);
      }
    }
  }
  auto apply = [&](const std::vector<double>& v, std::vector<double>& out) {
    for (size_t i = 0; i < n; ++i) {
      double nb = 0.0;
      for (int c = 0; c < 2 * d; ++c) {
        int j = nbrs[i * static_cast<size_t>(2 * d) + c];
        if (j >= 0) nb += v[static_cast<size_t>(j)];
      }
      out[i] = v[i] - nb / (2.0 * d);
    }
  };

  std::vector<double> b(n, 0.0), w(n, 0.0), r(n), p(n), ap(n);
  b[static_cast<size_t>(iy)] = 1.0;
  r = b;
  p = r;
  double rr = 1.0;
  for (size_t it = 0; it < 20 * n + 100; ++it) {
    apply(p, ap);
    double pap = 0.0;
    for (size_t i = 0; i < n; ++i) pap += p[i] * ap[i];
    double alpha = rr / pap;
    for (size_t i = 0; i < n; ++i) {
      w[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    double rr2 = 0.0;
    for (size_t i = 0; i < n; ++i) rr2 += r[i] * r[i];
    if (rr2 < 1e-28) {
      rr = rr2;
      break;
    }
    for (size_t i = 0; i < n; ++i) p[i] = r[i] + (rr2 / rr) * p[i];
    rr = rr2;
  }
  if (rr >= 1e-28)
    throw error(errc::numeric, "kill_outside: conjugate gradients failed to converge");
  return w[static_cast<size_t>(U.index_of(x))];
}

}  // namespace ri
