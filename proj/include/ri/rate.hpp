#pragma once

// Constrained Dirichlet-energy minimization: minimize (1/2d) int |grad phi|^2
// over phi >= 0 vanishing at infinity subject to the normalized constraint
// avg_D theta((sqrt(u)+phi)^2) = nu.  Damped Picard on the semilinear
// Euler-Lagrange equation -(1/2) Lap phi = lambda (sqrt(u)+phi)
// theta'((sqrt(u)+phi)^2) 1_D, with the Lagrange multiplier found by
// bisection on the monotone map lambda -> constraint.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "ri/functionals.hpp"

namespace ri {

// monotone theta with a derivative; theta_inf bounds the admissible nu
struct ThetaFn {
  std::function<double(double)> f;
  std::function<double(double)> df;
  double theta_inf = 1.0;
};

inline ThetaFn theta_exp_form(double c0) {
  if (!(c0 > 0.0)) throw error(errc::bad_argument, "theta_exp_form: rate must be positive");
  ThetaFn t;
  t.f = [c0](double v) { return -std::expm1(-c0 * v); };
  t.df = [c0](double v) { return c0 * std::exp(-c0 * v); };
  t.theta_inf = 1.0;
  return t;
}

// step regularization 1/(1+e^{-(v-u*)/sigma}); sigma -> 0 recovers 1{v>u*}
inline ThetaFn theta_sigmoid(double u_star, double sigma) {
  if (!(u_star > 0.0) || !(sigma > 0.0))
    throw error(errc::bad_argument, "theta_sigmoid: u_star and sigma must be positive");
  ThetaFn t;
  t.f = [u_star, sigma](double v) { return 1.0 / (1.0 + std::exp(-(v - u_star) / sigma)); };
  t.df = [u_star, sigma](double v) {
    double s = 1.0 / (1.0 + std::exp(-(v - u_star) / sigma));
    return s * (1.0 - s) / sigma;
  };
  t.theta_inf = 1.0;
  return t;
}

namespace detail {

// Fritsch-Carlson monotone cubic Hermite data
struct Pchip {
  std::vector<double> x, y, m;

  void build(const std::vector<double>& u, const std::vector<double>& v) {
    size_t n = u.size();
    x = u;
    y = v;
    m.assign(n, 0.0);
    if (n == 1) return;
    std::vector<double> h(n - 1), del(n - 1);
    for (size_t i = 0; i + 1 < n; ++i) {
      h[i] = u[i + 1] - u[i];
      del[i] = (v[i + 1] - v[i]) / h[i];
    }
    if (n == 2) {
      m[0] = m[1] = del[0];
      return;
    }
    for (size_t i = 1; i + 1 < n; ++i) {
      if (del[i - 1] * del[i] <= 0.0) {
        m[i] = 0.0;
      } else {
        double w1 = 2.0 * h[i] + h[i - 1];
        double w2 = h[i] + 2.0 * h[i - 1];
        m[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
      }
    }
    auto endpoint = [](double h0, double h1, double d0, double d1) {
      double s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
      if (s * d0 <= 0.0) return 0.0;
      if (std::fabs(s) > 3.0 * std::fabs(d0)) return 3.0 * d0;
      return s;
    };
    m[0] = endpoint(h[0], h[1], del[0], del[1]);
    m[n - 1] = endpoint(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
  }

  double eval(double v, bool deriv) const {
    size_t n = x.size();
    if (v <= x.front()) return deriv ? 0.0 : y.front();
    if (v >= x.back()) return deriv ? 0.0 : y.back();
    size_t i = static_cast<size_t>(std::upper_bound(x.begin(), x.end(), v) - x.begin()) - 1;
    double h = x[i + 1] - x[i];
    double t = (v - x[i]) / h;
    double t2 = t * t, t3 = t2 * t;
    if (!deriv) {
      return y[i] * (2 * t3 - 3 * t2 + 1) + h * m[i] * (t3 - 2 * t2 + t) +
             y[i + 1] * (-2 * t3 + 3 * t2) + h * m[i + 1] * (t3 - t2);
    }
    return (y[i] * (6 * t2 - 6 * t) / h + m[i] * (3 * t2 - 4 * t + 1) +
            y[i + 1] * (6 * t - 6 * t2) / h + m[i + 1] * (3 * t2 - 2 * t));
  }
};

}  // namespace detail

// monotone cubic interpolant of the curve, flat beyond the last knot
inline ThetaFn theta_from_curve(const ThetaCurve& c) {
  validate_theta_curve(c);
  if (c.u_grid.size() < 2)
    throw error(errc::bad_argument, "theta_from_curve: need at least two knots");
  for (size_t i = 1; i < c.values.size(); ++i)
    if (c.values[i] < c.values[i - 1])
      throw error(errc::bad_argument,
                  "theta_from_curve: values must be non-decreasing; re-estimate with isotonic");
  auto p = std::make_shared<detail::Pchip>();
  p->build(c.u_grid, c.values);
  ThetaFn t;
  t.f = [p](double v) { return p->eval(v, false); };
  t.df = [p](double v) { return p->eval(v, true); };
  t.theta_inf = c.theta_inf;
  return t;
}

struct RateProblem {
  int d = 3;
  double u = 1.0;
  double nu = 0.0;
  enum class Dom { cube, ball } domain = Dom::ball;  // cube is [-1,1]^d
  double rho_D = 1.0;                                // ball radius
  ThetaFn theta;
  double h = 0.1;
  double rho_t = 8.0;
  enum class OuterBC { zero, monopole } outer_bc = OuterBC::zero;
  bool clip = true;
  double beta = 0.5;
};

struct RateSolution {
  bool radial = false;
  std::vector<double> phi;  // radial profile phi(i h) or grid field over GridGeom sites
  double lambda = 0.0;
  double energy = 0.0;
  double constraint_residual = 0.0;
  double el_residual = 0.0;
  double h = 0.0;
  double rho_t = 0.0;
  double monopole_A = 0.0;
  long picard_iters = 0;
  long lambda_evals = 0;
};

inline double brownian_capacity_ball(int d, double radius) {
  if (d < 3) throw error(errc::bad_argument, "brownian_capacity_ball: requires d >= 3");
  if (!(radius > 0.0)) throw error(errc::bad_argument, "brownian_capacity_ball: radius must be positive");
  // uniform surface charge q has constant potential q Gamma(d/2-1) /
  // (2 pi^{d/2} rho^{d-2}) inside the sphere; unit potential fixes q
  const double pi = 3.14159265358979323846;
  return 2.0 * std::pow(pi, 0.5 * d) / std::tgamma(0.5 * d - 1.0) * std::pow(radius, d - 2);
}

namespace detail {

inline double domain_diam(const RateProblem& p) {
  return p.domain == RateProblem::Dom::cube ? 2.0 * std::sqrt(static_cast<double>(p.d))
                                            : 2.0 * p.rho_D;
}

inline void validate_rate_problem(const RateProblem& p) {
  if (p.d < 3) throw error(errc::bad_argument, "rate problem: requires d >= 3");
  if (!(p.u > 0.0)) throw error(errc::bad_argument, "rate problem: u must be positive");
  if (!p.theta.f || !p.theta.df)
    throw error(errc::bad_argument, "rate problem: theta callable and derivative required");
  if (!(p.nu < p.theta.theta_inf))
    throw error(errc::bad_argument, "rate problem: nu must lie below theta_inf");
  if (!(p.h > 0.0)) throw error(errc::bad_argument, "rate problem: grid spacing must be positive");
  if (p.domain == RateProblem::Dom::ball && !(p.rho_D > 0.0))
    throw error(errc::bad_argument, "rate problem: ball radius must be positive");
  if (p.rho_t < 4.0 * domain_diam(p) - 1e-9)
    throw error(errc::bad_argument, "rate problem: rho_t must be at least 4 diam(D)");
  double cells = p.rho_t / p.h;
  if (std::fabs(cells - std::round(cells)) > 1e-9)
    throw error(errc::bad_argument, "rate problem: rho_t must be a multiple of h");
  if (!(p.beta > 0.0 && p.beta <= 1.0))
    throw error(errc::bad_argument, "rate problem: damping beta must lie in (0,1]");
}

inline double surface_area(int d) {  // of the unit sphere in R^d
  const double pi = 3.14159265358979323846;
  return 2.0 * std::pow(pi, 0.5 * d) / std::tgamma(0.5 * d);
}

// fraction of the radial cell around r_i inside [0, rho_D]
inline double radial_weight(double r, double h, double rho_D) {
  return std::clamp((rho_D + 0.5 * h - r) / h, 0.0, 1.0);
}

// per-Picard-step multiplier choice shared by both solvers: bisection on
// the monotone scalar map lam -> constraint(candidate(lam)), bracket grown
// geometrically, narrowed past the constraint tolerance so multiplier
// granularity cannot hold the iterate change above its 1e-8 target
template <class Constraint>
double step_lambda(double nu, double lam, Constraint&& c_of, long& evals, double& c_out) {
  double lo = lam, hi = lam;
  double clo = c_of(lo);
  ++evals;
  while (clo > nu) {
    hi = lo;
    lo /= 8.0;
    if (lo < 1e-15)
      throw error(errc::numeric, "rate solver: bisection bracket not found (lambda range exhausted)");
    clo = c_of(lo);
    ++evals;
  }
  double chi = (hi == lo) ? clo : c_of(hi);
  if (hi != lo) ++evals;
  while (chi < nu) {
    lo = hi;
    hi *= 8.0;
    if (hi > 1e9)
      throw error(errc::numeric, "rate solver: bisection bracket not found (lambda range exhausted)");
    chi = c_of(hi);
    ++evals;
  }
  lam = hi;
  double c = chi;
  double eps_l = 1e-9 * std::max(lam, 1e-3);
  for (int bit = 0; bit < 300; ++bit) {
    if (std::fabs(c - nu) <= 1e-8 && hi - lo <= eps_l) break;
    if (hi - lo < 1e-15 * hi) break;
    lam = 0.5 * (lo + hi);
    c = c_of(lam);
    ++evals;
    if (c < nu)
      lo = lam;
    else
      hi = lam;
  }
  c_out = c;
  return lam;
}

}  // namespace detail

// ---------------------------------------------------------------- radial

namespace detail {

struct RadialGrid {
  int n = 0, d = 3;
  double h = 0.0, rho_t = 0.0, rho_D = 0.0;
  std::vector<double> w;  // D-cell weight per node

  double r(int i) const { return h * i; }

  // normalized constraint avg_D theta((sqrt(u)+phi)^2); the same weights
  // integrate the constant 1 to exactly 1
  double constraint(const std::vector<double>& phi, const RateProblem& p) const {
    double num = 0.0, den = 0.0;
    for (int i = 0; i <= n; ++i) {
      if (w[static_cast<size_t>(i)] == 0.0) continue;
      double cell = w[static_cast<size_t>(i)] * std::pow(r(i), d - 1) *
                    ((i == 0 || i == n) ? 0.5 : 1.0);
      double s = std::sqrt(p.u) + phi[static_cast<size_t>(i)];
      num += cell * p.theta.f(s * s);
      den += cell;
    }
    if (den == 0.0) throw error(errc::numeric, "radial solver: empty constraint domain");
    return num / den;
  }

  double energy(const std::vector<double>& phi) const {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      double d1 = (phi[static_cast<size_t>(i + 1)] - phi[static_cast<size_t>(i)]) / h;
      double rm = r(i) + 0.5 * h;
      acc += d1 * d1 * std::pow(rm, d - 1) * h;
    }
    // exact harmonic tail phi(rho_t) (rho_t/r)^{d-2} beyond the grid
    acc += (d - 2) * phi[static_cast<size_t>(n)] * phi[static_cast<size_t>(n)] *
           std::pow(rho_t, d - 2);
    return surface_area(d) / (2.0 * d) * acc;
  }
};

}  // namespace detail

inline RateSolution solve_radial(const RateProblem& p,
                                 const std::vector<double>* initial = nullptr) {
  detail::validate_rate_problem(p);
  if (p.domain != RateProblem::Dom::ball)
    throw error(errc::bad_argument, "solve_radial: domain must be a centered ball");
  double cells_D = p.rho_D / p.h;
  if (std::fabs(cells_D - std::round(cells_D)) > 1e-9)
    throw error(errc::bad_argument, "solve_radial: rho_D must be a multiple of h");

  detail::RadialGrid g;
  g.n = static_cast<int>(std::round(p.rho_t / p.h));
  g.d = p.d;
  g.h = p.h;
  g.rho_t = p.rho_t;
  g.rho_D = p.rho_D;
  g.w.resize(static_cast<size_t>(g.n + 1));
  for (int i = 0; i <= g.n; ++i)
    g.w[static_cast<size_t>(i)] = detail::radial_weight(g.r(i), g.h, g.rho_D);

  RateSolution sol;
  sol.radial = true;
  sol.h = p.h;
  sol.rho_t = p.rho_t;
  size_t N = static_cast<size_t>(g.n + 1);
  sol.phi.assign(N, 0.0);
  if (initial) {  // warm start, e.g. continuation through a stiffness sweep
    if (initial->size() != N)
      throw error(errc::bad_argument, "solve_radial: initial profile size mismatch");
    sol.phi = *initial;
  }

  if (p.nu <= p.theta.f(p.u)) {  // the zero profile already meets the target
    std::fill(sol.phi.begin(), sol.phi.end(), 0.0);
    sol.constraint_residual = std::fabs(g.constraint(sol.phi, p) - p.nu);
    return sol;
  }

  // tridiagonal rows of -(1/2)(phi'' + (d-1)/r phi'), Robin tail at rho_t
  std::vector<double> lo(N, 0.0), di(N, 0.0), up(N, 0.0);
  double h2 = p.h * p.h;
  di[0] = p.d / h2;
  up[0] = -static_cast<double>(p.d) / h2;
  for (int i = 1; i < g.n; ++i) {
    double ri = g.r(i);
    lo[static_cast<size_t>(i)] = -0.5 * (1.0 / h2 - (p.d - 1) / (2.0 * p.h * ri));
    di[static_cast<size_t>(i)] = 1.0 / h2;
    up[static_cast<size_t>(i)] = -0.5 * (1.0 / h2 + (p.d - 1) / (2.0 * p.h * ri));
  }
  lo[N - 1] = -1.0 / h2;
  di[N - 1] = (1.0 + p.h * (p.d - 2) / p.rho_t) / h2 +
              (p.d - 1) * (p.d - 2) / (2.0 * p.rho_t * p.rho_t);

  std::vector<double> rhs(N), psi(N), cp(N), dp(N);
  auto thomas = [&](void) {
    cp[0] = up[0] / di[0];
    dp[0] = rhs[0] / di[0];
    for (size_t i = 1; i < N; ++i) {
      double m = di[i] - lo[i] * cp[i - 1];
      cp[i] = (i + 1 < N) ? up[i] / m : 0.0;
      dp[i] = (rhs[i] - lo[i] * dp[i - 1]) / m;
    }
    psi[N - 1] = dp[N - 1];
    for (size_t i = N - 1; i-- > 0;) psi[i] = dp[i] - cp[i] * psi[i + 1];
  };

  double sqrtu = std::sqrt(p.u);
  std::vector<double> cand(N);
  auto build_cand = [&](double lam) {
    for (size_t i = 0; i < N; ++i) {
      double next = (1.0 - p.beta) * sol.phi[i] + p.beta * lam * psi[i];
      if (p.clip && next < 0.0) next = 0.0;
      cand[i] = next;
    }
  };
  auto cand_constraint = [&](double lam) {
    build_cand(lam);
    return g.constraint(cand, p);
  };

  double lam = 1.0;
  double change = std::numeric_limits<double>::infinity();
  long step = 0;
  for (;; ++step) {
    if (step >= 20000)
      throw error(errc::numeric, "solve_radial: Picard iteration did not converge, last change " +
                                     std::to_string(change));
    for (size_t i = 0; i < N; ++i) {
      double wD = g.w[i];
      double s = sqrtu + sol.phi[i];
      rhs[i] = wD > 0.0 ? s * p.theta.df(s * s) * wD : 0.0;  // multiplier applied later
    }
    thomas();
    double c = 0.0;
    lam = detail::step_lambda(p.nu, lam, cand_constraint, sol.lambda_evals, c);
    build_cand(lam);
    change = 0.0;
    for (size_t i = 0; i < N; ++i) {
      change = std::max(change, std::fabs(cand[i] - sol.phi[i]));
      sol.phi[i] = cand[i];
    }
    sol.constraint_residual = std::fabs(c - p.nu);
    if (change < 1e-8 && sol.constraint_residual < 1e-6) break;
  }
  sol.lambda = lam;
  sol.picard_iters = step + 1;
  sol.energy = g.energy(sol.phi);

  // interior defect of the converged discretization
  double res = 0.0;
  for (int i = 0; i < g.n; ++i) {
    double lhs;
    if (i == 0) {
      lhs = di[0] * sol.phi[0] + up[0] * sol.phi[1];
    } else {
      lhs = lo[static_cast<size_t>(i)] * sol.phi[static_cast<size_t>(i - 1)] +
            di[static_cast<size_t>(i)] * sol.phi[static_cast<size_t>(i)] +
            up[static_cast<size_t>(i)] * sol.phi[static_cast<size_t>(i + 1)];
    }
    double s = sqrtu + sol.phi[static_cast<size_t>(i)];
    double rr = sol.lambda * s * p.theta.df(s * s) * g.w[static_cast<size_t>(i)];
    res = std::max(res, std::fabs(lhs - rr));
  }
  sol.el_residual = res;
  return sol;
}

// ---------------------------------------------------------------- full grid

// centered grid of lattice sites x with |x| h < rho_t; sites outside carry
// Dirichlet data (zero or the matched monopole A/|z|^{d-2})
struct GridGeom {
  int n = 0, side = 0;
  double h = 0.0, rho_t = 0.0;
  std::vector<int32_t> index;   // cube -> site slot, -1 outside
  std::vector<Site> sites;      // slot -> lattice point
  std::vector<int32_t> nbr;     // 6 per slot, -1 when the neighbor is outside

  static GridGeom make(double h, double rho_t) {
    GridGeom g;
    g.h = h;
    g.rho_t = rho_t;
    g.n = static_cast<int>(std::round(rho_t / h));
    g.side = 2 * g.n + 1;
    double r2max = (rho_t / h) * (rho_t / h) - 1e-9;
    g.index.assign(static_cast<size_t>(g.side) * g.side * g.side, -1);
    for (int x = -g.n; x <= g.n; ++x)
      for (int y = -g.n; y <= g.n; ++y)
        for (int z = -g.n; z <= g.n; ++z) {
          double q = static_cast<double>(x) * x + static_cast<double>(y) * y +
                     static_cast<double>(z) * z;
          if (q < r2max) {
            g.index[g.flat(x, y, z)] = static_cast<int32_t>(g.sites.size());
            g.sites.push_back(Site{x, y, z});
          }
        }
    g.nbr.assign(6 * g.sites.size(), -1);
    for (size_t i = 0; i < g.sites.size(); ++i) {
      const Site& s = g.sites[i];
      for (int k = 0; k < 6; ++k) {
        Site t = s;
        t[static_cast<size_t>(k / 2)] += (k % 2 == 0) ? 1 : -1;
        if (std::abs(t[0]) <= g.n && std::abs(t[1]) <= g.n && std::abs(t[2]) <= g.n)
          g.nbr[6 * i + static_cast<size_t>(k)] = g.index[g.flat(t[0], t[1], t[2])];
      }
    }
    return g;
  }

  size_t flat(int x, int y, int z) const {
    return (static_cast<size_t>(x + n) * side + static_cast<size_t>(y + n)) * side +
           static_cast<size_t>(z + n);
  }

  Site neighbor_site(size_t slot, int k) const {
    Site t = sites[slot];
    t[static_cast<size_t>(k / 2)] += (k % 2 == 0) ? 1 : -1;
    return t;
  }

  double radius(const Site& s) const {
    double q = static_cast<double>(s[0]) * s[0] + static_cast<double>(s[1]) * s[1] +
               static_cast<double>(s[2]) * s[2];
    return h * std::sqrt(q);
  }
};

namespace detail {

// conjugate gradients for -(1/2) Lap_h with a geometric multigrid
// V-cycle preconditioner: damped-Jacobi smoothing, rediscretized coarse
// operators, trilinear prolongation with its scaled transpose
class PoissonMg {
 public:
  explicit PoissonMg(const GridGeom& fine) : fine_(&fine) {
    int n = fine.n;
    double hh = fine.h;
    while (n % 2 == 0 && n >= 16) {
      n /= 2;
      hh *= 2.0;
      coarse_.push_back(GridGeom::make(hh, fine.rho_t));
    }
    size_t levels = coarse_.size() + 1;
    x_.resize(levels);
    b_.resize(levels);
    r_.resize(levels);
    for (size_t l = 0; l < levels; ++l) {
      size_t sz = geom(l).sites.size();
      x_[l].assign(sz, 0.0);
      b_[l].assign(sz, 0.0);
      r_[l].assign(sz, 0.0);
    }
    size_t nf = fine.sites.size();
    cg_r_.assign(nf, 0.0);
    cg_z_.assign(nf, 0.0);
    cg_p_.assign(nf, 0.0);
    cg_ap_.assign(nf, 0.0);
  }

  // solve A x = b to ||r|| <= reltol ||b||, warm start from x
  void solve(std::vector<double>& x, const std::vector<double>& b, double reltol,
             long& iters) {
    size_t n = x.size();
    matvec(0, x, cg_ap_);
    double bb = 0.0, rr = 0.0;
    for (size_t i = 0; i < n; ++i) {
      cg_r_[i] = b[i] - cg_ap_[i];
      bb += b[i] * b[i];
      rr += cg_r_[i] * cg_r_[i];
    }
    double tol2 = std::max(bb, 1e-300) * reltol * reltol;
    if (rr <= tol2) return;
    precond(cg_r_, cg_z_);
    cg_p_ = cg_z_;
    double rz = dot(cg_r_, cg_z_);
    for (long it = 0; it < 2000; ++it) {
      matvec(0, cg_p_, cg_ap_);
      double pap = dot(cg_p_, cg_ap_);
      double alpha = rz / pap;
      rr = 0.0;
      for (size_t i = 0; i < n; ++i) {
        x[i] += alpha * cg_p_[i];
        cg_r_[i] -= alpha * cg_ap_[i];
        rr += cg_r_[i] * cg_r_[i];
      }
      ++iters;
      if (rr <= tol2) return;
      precond(cg_r_, cg_z_);
      double rz2 = dot(cg_r_, cg_z_);
      double beta = rz2 / rz;
      rz = rz2;
      for (size_t i = 0; i < n; ++i) cg_p_[i] = cg_z_[i] + beta * cg_p_[i];
    }
    throw error(errc::numeric, "rate solver: preconditioned conjugate gradients stalled");
  }

 private:
  const GridGeom* fine_;
  std::vector<GridGeom> coarse_;
  std::vector<std::vector<double>> x_, b_, r_;
  std::vector<double> cg_r_, cg_z_, cg_p_, cg_ap_;

  const GridGeom& geom(size_t l) const { return l == 0 ? *fine_ : coarse_[l - 1]; }

  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  }

  void matvec(size_t l, const std::vector<double>& v, std::vector<double>& out) const {
    const GridGeom& g = geom(l);
    double inv = 1.0 / (2.0 * g.h * g.h);
    size_t n = g.sites.size();
    for (size_t i = 0; i < n; ++i) {
      double acc = 6.0 * v[i];
      const int32_t* nb = &g.nbr[6 * i];
      for (int k = 0; k < 6; ++k)
        if (nb[k] >= 0) acc -= v[static_cast<size_t>(nb[k])];
      out[i] = acc * inv;
    }
  }

  void precond(const std::vector<double>& rhs, std::vector<double>& out) {
    b_[0] = rhs;
    vcycle(0);
    out = x_[0];
  }

  void vcycle(size_t l) {
    const GridGeom& g = geom(l);
    size_t n = g.sites.size();
    if (l == coarse_.size()) {  // coarsest: plain CG, effectively exact
      coarse_cg(l);
      return;
    }
    double wj = (2.0 / 3.0) * g.h * g.h / 3.0;  // omega / diag
    for (size_t i = 0; i < n; ++i) x_[l][i] = wj * b_[l][i];
    matvec(l, x_[l], r_[l]);
    for (size_t i = 0; i < n; ++i) r_[l][i] = b_[l][i] - r_[l][i];
    restrict_to(l);
    vcycle(l + 1);
    prolong_add(l);
    matvec(l, x_[l], r_[l]);
    for (size_t i = 0; i < n; ++i) x_[l][i] += wj * (b_[l][i] - r_[l][i]);
  }

  void coarse_cg(size_t l) {
    const GridGeom& g = geom(l);
    size_t n = g.sites.size();
    std::vector<double> r(b_[l]), pp(n), ap(n);
    std::fill(x_[l].begin(), x_[l].end(), 0.0);
    double rr = dot(r, r);
    double tol2 = rr * 1e-24;
    if (rr == 0.0) return;
    pp = r;
    for (long it = 0; it < 20000; ++it) {
      matvec(l, pp, ap);
      double alpha = rr / dot(pp, ap);
      for (size_t i = 0; i < n; ++i) {
        x_[l][i] += alpha * pp[i];
        r[i] -= alpha * ap[i];
      }
      double rr2 = dot(r, r);
      if (rr2 <= tol2) return;
      double beta = rr2 / rr;
      rr = rr2;
      for (size_t i = 0; i < n; ++i) pp[i] = r[i] + beta * pp[i];
    }
  }

  // scaled transpose of trilinear interpolation: R = (1/8) P^T
  void restrict_to(size_t l) {
    const GridGeom& gf = geom(l);
    const GridGeom& gc = geom(l + 1);
    std::fill(b_[l + 1].begin(), b_[l + 1].end(), 0.0);
    size_t n = gf.sites.size();
    for (size_t i = 0; i < n; ++i) {
      double v = r_[l][i] * 0.125;
      stencil(gf.sites[i], gc, [&](int32_t cs, double w) { b_[l + 1][static_cast<size_t>(cs)] += w * v; });
    }
  }

  void prolong_add(size_t l) {
    const GridGeom& gf = geom(l);
    const GridGeom& gc = geom(l + 1);
    size_t n = gf.sites.size();
    for (size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      stencil(gf.sites[i], gc, [&](int32_t cs, double w) { acc += w * x_[l + 1][static_cast<size_t>(cs)]; });
      x_[l][i] += acc;
    }
  }

  template <class F>
  static void stencil(const Site& s, const GridGeom& gc, F&& emit) {
    int base[3], odd[3];
    for (int k = 0; k < 3; ++k) {
      int c = s[static_cast<size_t>(k)];
      odd[k] = c & 1;
      base[k] = (c - odd[k]) / 2;  // exact for even; floor pair for odd
    }
    for (int ax = 0; ax <= odd[0]; ++ax)
      for (int ay = 0; ay <= odd[1]; ++ay)
        for (int az = 0; az <= odd[2]; ++az) {
          int cx = base[0] + ax, cy = base[1] + ay, cz = base[2] + az;
          if (std::abs(cx) > gc.n || std::abs(cy) > gc.n || std::abs(cz) > gc.n) continue;
          int32_t cs = gc.index[gc.flat(cx, cy, cz)];
          if (cs < 0) continue;
          double w = 1.0;
          if (odd[0]) w *= 0.5;
          if (odd[1]) w *= 0.5;
          if (odd[2]) w *= 0.5;
          emit(cs, w);
        }
  }
};

// fraction of the cell around z inside D
inline double cell_weight(const RateProblem& p, const GridGeom& g, const Site& s) {
  if (p.domain == RateProblem::Dom::cube) {
    double w = 1.0;
    for (int k = 0; k < 3; ++k) {
      double zl = g.h * s[static_cast<size_t>(k)] - 0.5 * g.h;
      double zr = zl + g.h;
      double ov = std::min(zr, 1.0) - std::max(zl, -1.0);
      w *= std::clamp(ov / g.h, 0.0, 1.0);
    }
    return w;
  }
  return radial_weight(g.radius(s), g.h, p.rho_D);
}

inline double monopole_value(double A, const GridGeom& g, const Site& s, int d) {
  double r = g.radius(s);
  return A / std::pow(r, d - 2);
}

}  // namespace detail

inline RateSolution solve_full_grid(const RateProblem& p,
                                    const std::vector<double>* initial = nullptr) {
  detail::validate_rate_problem(p);
  if (p.d != 3) throw error(errc::bad_argument, "solve_full_grid: implemented for d = 3");

  GridGeom g = GridGeom::make(p.h, p.rho_t);
  size_t N = g.sites.size();
  std::vector<double> wD(N);
  for (size_t i = 0; i < N; ++i) wD[i] = detail::cell_weight(p, g, g.sites[i]);

  // per-site sum of 1/|z_nb|^{d-2} over outside neighbors (monopole data)
  std::vector<double> bcker(N, 0.0);
  bool mono = p.outer_bc == RateProblem::OuterBC::monopole;
  if (mono) {
    for (size_t i = 0; i < N; ++i)
      for (int k = 0; k < 6; ++k)
        if (g.nbr[6 * i + static_cast<size_t>(k)] < 0)
          bcker[i] += detail::monopole_value(1.0, g, g.neighbor_site(i, k), p.d);
  }

  RateSolution sol;
  sol.h = p.h;
  sol.rho_t = p.rho_t;
  sol.phi.assign(N, 0.0);
  if (initial) {
    if (initial->size() != N)
      throw error(errc::bad_argument, "solve_full_grid: initial field size mismatch");
    sol.phi = *initial;
  }

  double sqrtu = std::sqrt(p.u);
  double h2 = p.h * p.h;
  auto constraint_of = [&](const std::vector<double>& phi) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < N; ++i) {
      if (wD[i] == 0.0) continue;
      double s = sqrtu + phi[i];
      num += wD[i] * p.theta.f(s * s);
      den += wD[i];
    }
    return num / den;
  };

  if (p.nu <= p.theta.f(p.u)) {
    sol.constraint_residual = std::fabs(constraint_of(sol.phi) - p.nu);
    return sol;
  }

  std::vector<double> b(N), psi(N, 0.0);
  detail::PoissonMg mg(g);
  long cg_iters = 0;
  auto cg_solve = [&](double reltol) { mg.solve(psi, b, reltol, cg_iters); };

  auto update_monopole = [&]() {
    if (!mono) return;
    double num = 0.0;
    long cnt = 0;
    for (size_t i = 0; i < N; ++i) {
      double rr_ = g.radius(g.sites[i]);
      if (rr_ >= 0.7 * p.rho_t && rr_ <= 0.8 * p.rho_t) {
        num += sol.phi[i] * std::pow(rr_, p.d - 2);
        ++cnt;
      }
    }
    if (cnt > 0) sol.monopole_A = num / static_cast<double>(cnt);
  };

  // the boundary data enters the linear solve linearly, so one unit solve
  // A psi_unit = bcker/(2h^2) covers every later monopole strength
  std::vector<double> psi_unit;
  std::vector<size_t> shell;  // matching shell 0.7 rho_t <= |z| <= 0.8 rho_t
  std::vector<double> shell_w;
  double u_shell = 0.0;
  if (mono) {
    for (size_t i = 0; i < N; ++i) {
      double rr_ = g.radius(g.sites[i]);
      if (rr_ >= 0.7 * p.rho_t && rr_ <= 0.8 * p.rho_t) {
        shell.push_back(i);
        shell_w.push_back(std::pow(rr_, p.d - 2));
      }
    }
    for (size_t i = 0; i < N; ++i) b[i] = bcker[i] / (2.0 * h2);
    cg_solve(1e-10);
    psi_unit = psi;
    std::fill(psi.begin(), psi.end(), 0.0);
    for (size_t k = 0; k < shell.size(); ++k) u_shell += psi_unit[shell[k]] * shell_w[k];
    u_shell /= static_cast<double>(shell.size());
  }
  auto shell_avg = [&](const std::vector<double>& f) {
    double acc = 0.0;
    for (size_t k = 0; k < shell.size(); ++k) acc += f[shell[k]] * shell_w[k];
    return acc / static_cast<double>(shell.size());
  };

  // candidate at multiplier lam; the monopole strength solves its own
  // affine fixed point A = (1-beta) avg(phi r) + beta (lam avg(psi r) + A u_shell)
  std::vector<double> cand(N);
  double mono_s0 = 0.0, mono_s1 = 0.0;
  auto mono_A_at = [&](double lam) {
    if (!mono) return 0.0;
    return ((1.0 - p.beta) * mono_s0 + p.beta * lam * mono_s1) / (1.0 - p.beta * u_shell);
  };
  auto build_candidate = [&](double lam) {
    double A = mono_A_at(lam);
    for (size_t i = 0; i < N; ++i) {
      double next = (1.0 - p.beta) * sol.phi[i] +
                    p.beta * (lam * psi[i] + (mono ? A * psi_unit[i] : 0.0));
      if (p.clip && next < 0.0) next = 0.0;
      cand[i] = next;
    }
  };
  auto cand_constraint = [&](double lam) {
    double A = mono_A_at(lam);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < N; ++i) {
      if (wD[i] == 0.0) continue;
      double next = (1.0 - p.beta) * sol.phi[i] +
                    p.beta * (lam * psi[i] + (mono ? A * psi_unit[i] : 0.0));
      if (p.clip && next < 0.0) next = 0.0;
      double s = sqrtu + next;
      num += wD[i] * p.theta.f(s * s);
      den += wD[i];
    }
    return num / den;
  };

  // per-step multiplier: bisection on the monotone scalar map
  // lam -> constraint(candidate(lam)); brackets grown geometrically
  double lam = sol.lambda > 0.0 ? sol.lambda : 1.0;
  double change = std::numeric_limits<double>::infinity();
  long step = 0;
  for (;; ++step) {
    if (step >= 3000)
      throw error(errc::numeric,
                  "solve_full_grid: Picard iteration did not converge, last change " +
                      std::to_string(change));
    for (size_t i = 0; i < N; ++i) {
      double s = sqrtu + sol.phi[i];
      b[i] = wD[i] > 0.0 ? s * p.theta.df(s * s) * wD[i] : 0.0;
    }
    double cg_tol = std::clamp(0.02 * change, 1e-11, 1e-6);
    cg_solve(cg_tol);  // psi tracks the lambda part only
    if (mono) {
      mono_s0 = shell_avg(sol.phi);
      mono_s1 = shell_avg(psi);
    }
    double c = 0.0;
    lam = detail::step_lambda(p.nu, lam, cand_constraint, sol.lambda_evals, c);
    build_candidate(lam);
    change = 0.0;
    for (size_t i = 0; i < N; ++i) {
      change = std::max(change, std::fabs(cand[i] - sol.phi[i]));
      sol.phi[i] = cand[i];
    }
    sol.constraint_residual = std::fabs(c - p.nu);
    if (std::getenv("RI_RATE_DEBUG"))
      std::fprintf(stderr, "step %ld change %.3e cres %.3e lam %.8f A %.6f cg %ld\n", step,
                   change, sol.constraint_residual, lam, mono_A_at(lam), cg_iters);
    if (change < 1e-8 && sol.constraint_residual < 1e-6) break;
  }
  sol.lambda = lam;
  sol.picard_iters = step + 1;
  update_monopole();

  // forward-difference Dirichlet energy; boundary-crossing links use the
  // Dirichlet data, and the monopole run adds its analytic outer tail
  double acc = 0.0;
  for (size_t i = 0; i < N; ++i) {
    const int32_t* nb = &g.nbr[6 * i];
    for (int k = 0; k < 6; ++k) {
      double other;
      if (nb[k] >= 0) {
        if (k % 2 != 0) continue;  // interior links counted once, forward
        other = sol.phi[static_cast<size_t>(nb[k])];
      } else {
        other = mono ? detail::monopole_value(sol.monopole_A, g, g.neighbor_site(i, k), p.d) : 0.0;
      }
      double df = (other - sol.phi[i]);
      acc += df * df;
    }
  }
  sol.energy = acc * p.h / (2.0 * p.d);  // (df/h)^2 h^d / (2d), d = 3
  if (mono)
    sol.energy += detail::surface_area(p.d) / (2.0 * p.d) * (p.d - 2) * sol.monopole_A *
                  sol.monopole_A * std::pow(p.rho_t, 2 - p.d);

  // interior defect: sites with all six neighbors present
  double res = 0.0;
  for (size_t i = 0; i < N; ++i) {
    const int32_t* nb = &g.nbr[6 * i];
    bool interior = true;
    double acc2 = 6.0 * sol.phi[i];
    for (int k = 0; k < 6; ++k) {
      if (nb[k] < 0) {
        interior = false;
        break;
      }
      acc2 -= sol.phi[static_cast<size_t>(nb[k])];
    }
    if (!interior) continue;
    double s = sqrtu + sol.phi[i];
    double rr_ = sol.lambda * s * p.theta.df(s * s) * wD[i];
    res = std::max(res, std::fabs(acc2 / (2.0 * h2) - rr_));
  }
  sol.el_residual = res;
  return sol;
}

// residual of the grid discretization of (6.9) for an arbitrary field,
// e.g. a radial solution injected onto the grid of the template problem
inline double euler_lagrange_residual(const RateProblem& p, const std::vector<double>& phi,
                                      double lambda) {
  detail::validate_rate_problem(p);
  if (p.d != 3) throw error(errc::bad_argument, "euler_lagrange_residual: implemented for d = 3");
  GridGeom g = GridGeom::make(p.h, p.rho_t);
  if (phi.size() != g.sites.size())
    throw error(errc::bad_argument, "euler_lagrange_residual: field size mismatch");
  double sqrtu = std::sqrt(p.u);
  double res = 0.0;
  for (size_t i = 0; i < g.sites.size(); ++i) {
    const int32_t* nb = &g.nbr[6 * i];
    bool interior = true;
    double acc = 6.0 * phi[i];
    for (int k = 0; k < 6; ++k) {
      if (nb[k] < 0) {
        interior = false;
        break;
      }
      acc -= phi[static_cast<size_t>(nb[k])];
    }
    if (!interior) continue;
    double s = sqrtu + phi[i];
    double rhs = lambda * s * p.theta.df(s * s) * detail::cell_weight(p, g, g.sites[i]);
    res = std::max(res, std::fabs(acc / (2.0 * p.h * p.h) - rhs));
  }
  return res;
}

inline double euler_lagrange_residual(const RateSolution& sol, const RateProblem& p) {
  if (sol.radial) return sol.el_residual;
  return euler_lagrange_residual(p, sol.phi, sol.lambda);
}

struct RearrangementReport {
  double energy_before = 0.0;
  double energy_after = 0.0;
  double constraint_before = 0.0;
  double constraint_after = 0.0;
};

// symmetric-decreasing rearrangement on the grid: the k-th largest value
// moves to the k-th closest site; energies with zero Dirichlet data
inline RearrangementReport rearrangement_check(const RateSolution& sol, const RateProblem& p) {
  detail::validate_rate_problem(p);
  if (sol.radial) throw error(errc::bad_argument, "rearrangement_check: needs a full-grid field");
  GridGeom g = GridGeom::make(p.h, p.rho_t);
  size_t N = g.sites.size();
  if (sol.phi.size() != N)
    throw error(errc::bad_argument, "rearrangement_check: field size mismatch");

  std::vector<size_t> order(N);
  for (size_t i = 0; i < N; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    double ra = g.radius(g.sites[a]), rb = g.radius(g.sites[b]);
    return ra < rb;
  });
  std::vector<double> vals = sol.phi;
  std::sort(vals.begin(), vals.end(), std::greater<double>());
  std::vector<double> star(N);
  for (size_t k = 0; k < N; ++k) star[order[k]] = vals[k];

  auto zero_energy = [&](const std::vector<double>& f) {
    double acc = 0.0;
    for (size_t i = 0; i < N; ++i) {
      const int32_t* nb = &g.nbr[6 * i];
      for (int k = 0; k < 6; ++k) {
        if (nb[k] >= 0 && k % 2 != 0) continue;  // interior links once, forward
        double other = nb[k] >= 0 ? f[static_cast<size_t>(nb[k])] : 0.0;
        double df = other - f[i];
        acc += df * df;
      }
    }
    return acc * p.h / (2.0 * p.d);
  };
  auto constraint = [&](const std::vector<double>& f) {
    double num = 0.0, den = 0.0;
    double sqrtu = std::sqrt(p.u);
    for (size_t i = 0; i < N; ++i) {
      double w = detail::cell_weight(p, g, g.sites[i]);
      if (w == 0.0) continue;
      double s = sqrtu + f[i];
      num += w * p.theta.f(s * s);
      den += w;
    }
    return num / den;
  };

  RearrangementReport rep;
  rep.energy_before = zero_energy(sol.phi);
  rep.energy_after = zero_energy(star);
  rep.constraint_before = constraint(sol.phi);
  rep.constraint_after = constraint(star);
  return rep;
}

struct KPoint {
  double nu = 0.0;
  double K = 0.0;
  double lambda = 0.0;
  double constraint_residual = 0.0;
  double el_residual = 0.0;
  bool ok = false;
  std::string err;
};

// K_{r,R} along a nu grid from an estimated disconnection curve; ball
// domains run the radial solver, the cube runs the full grid
inline std::vector<KPoint> k_curve(int r, int R, double u, const std::vector<double>& nu_grid,
                                   const ThetaCurve& curve, const RateProblem& tmpl) {
  if (curve.kind != FunctionalKind::disconnect || curve.r != r || curve.R != R)
    throw error(errc::bad_argument, "k_curve: curve provenance does not match (r, R)");
  ThetaFn th = theta_from_curve(curve);
  RateProblem p = tmpl;
  p.u = u;
  p.theta = th;
  std::vector<KPoint> out;
  double floor_nu = th.f(u);
  for (double nu : nu_grid) {
    KPoint kp;
    kp.nu = nu;
    if (!(nu > floor_nu) || !(nu < th.theta_inf)) {
      kp.err = "nu outside (theta_{r,R}(u), theta_inf)";
      out.push_back(kp);
      continue;
    }
    p.nu = nu;
    try {
      RateSolution s = p.domain == RateProblem::Dom::ball ? solve_radial(p) : solve_full_grid(p);
      kp.K = s.energy;
      kp.lambda = s.lambda;
      kp.constraint_residual = s.constraint_residual;
      kp.el_residual = s.el_residual;
      kp.ok = true;
    } catch (const error& e) {
      kp.err = e.what();
    }
    out.push_back(kp);
  }
  return out;
}

}  // namespace ri
