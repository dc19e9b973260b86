#pragma once

// Occupation-time fields of random interlacements in a finite window.
// A field at level u is a Poisson number N ~ Poisson(u cap(W)) of
// trajectories entering W from the normalized equilibrium measure and run
// forward with the guarded walk; the marginal law on W is exact. A coupled
// multi-level sampler realizes the label thinning (trajectories with label
// at most u), and Laplace-transform oracles give closed forms for
// exponential moments, standard and tilted.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ri/common.hpp"
#include "ri/dense.hpp"
#include "ri/potential.hpp"
#include "ri/rng.hpp"
#include "ri/walk.hpp"

namespace ri {

// Per-site visit counts and occupation times on a window, with the level
// and master seed that produced them. {time > 0} is the interlacement set,
// {time = 0} the vacant set; the two partition the window.
struct OccupationField {
  SiteSet window;
  std::vector<uint64_t> visits;
  std::vector<double> time;
  double level_u = 0.0;
  uint64_t seed = 0;
  uint64_t trajectories = 0;  // soup trajectories retained at this level

  uint64_t visit_count(const Site& x) const { return visits[idx(x)]; }
  double time_at(const Site& x) const { return time[idx(x)]; }
  bool occupied(const Site& x) const { return time_at(x) > 0.0; }
  bool vacant(const Site& x) const { return !occupied(x); }

 private:
  size_t idx(const Site& x) const {
    int i = window.index_of(x);
    if (i < 0) throw error(errc::bad_argument, "OccupationField: site outside window");
    return static_cast<size_t>(i);
  }
};

// One row per window site, in window order: x1..xd, visits, time.
inline void write_field_csv(const OccupationField& f, std::ostream& os) {
  int d = f.window.dim();
  for (int i = 0; i < d; ++i) os << 'x' << (i + 1) << ',';
  os << "visits,time\n";
  char buf[64];
  for (size_t i = 0; i < f.window.size(); ++i) {
    const Site& x = f.window[i];
    for (int k = 0; k < d; ++k) os << x[static_cast<size_t>(k)] << ',';
    std::snprintf(buf, sizeof buf, "%llu,%.17g\n",
                  static_cast<unsigned long long>(f.visits[i]), f.time[i]);
    os << buf;
  }
}

// Coupled sampler: one soup at u_max = max(levels), each trajectory tagged
// with an independent label u_max*U(0,1); the field at level u keeps the
// trajectories with label <= u. Trajectory t draws everything from the
// counter stream (seed, 1+t), so the sample is a pure function of the seed
// and the coupling is pointwise monotone by construction.
inline std::vector<OccupationField> sample_field_coupled(const std::vector<double>& levels,
                                                         const SiteSet& window,
                                                         const GreenTable& green, uint64_t seed,
                                                         int guard_radius = 0,
                                                         uint64_t max_jumps = 1000000) {
  if (levels.empty())
    throw error(errc::bad_argument, "sample_field: no levels requested");
  for (double u : levels)
    if (!(u >= 0.0) || !std::isfinite(u))
      throw error(errc::bad_argument, "sample_field: level u must be finite and >= 0");
  RestrictedGreen rw(window, green);
  if (guard_radius == 0) guard_radius = default_guard_radius(window);

  std::vector<OccupationField> fields(levels.size());
  for (size_t i = 0; i < levels.size(); ++i) {
    fields[i].window = window;
    fields[i].visits.assign(window.size(), 0);
    fields[i].time.assign(window.size(), 0.0);
    fields[i].level_u = levels[i];
    fields[i].seed = seed;
  }
  double umax = *std::max_element(levels.begin(), levels.end());
  if (umax == 0.0) return fields;

  double cap = rw.cap();
  const std::vector<double>& e = rw.equilibrium();
  uint64_t n_traj = Rng(seed, 0).poisson(umax * cap);

  // Per-trajectory scratch, cleared sparsely.
  std::vector<uint64_t> sv(window.size(), 0);
  std::vector<double> st(window.size(), 0.0);
  std::vector<size_t> touched;
  for (uint64_t t = 0; t < n_traj; ++t) {
    Rng r(seed, 1 + t);
    double label = umax * r.uniform();
    int k = detail::sample_index(e, cap, r);
    touched.clear();
    walk_with_guard(window[static_cast<size_t>(k)], rw, guard_radius, r,
                    [&](const Site& x, bool) {
                      int j = window.index_of(x);
                      if (j < 0) return;
                      size_t ji = static_cast<size_t>(j);
                      if (sv[ji] == 0) touched.push_back(ji);
                      ++sv[ji];
                      st[ji] += r.exponential();
                    },
                    max_jumps);
    for (OccupationField& f : fields) {
      if (label > f.level_u) continue;
      ++f.trajectories;
      for (size_t j : touched) {
        f.visits[j] += sv[j];
        f.time[j] += st[j];
      }
    }
    for (size_t j : touched) {
      sv[j] = 0;
      st[j] = 0.0;
    }
  }
  return fields;
}

inline OccupationField sample_field(double u, const SiteSet& window, const GreenTable& green,
                                    uint64_t seed, int guard_radius = 0,
                                    uint64_t max_jumps = 1000000) {
  std::vector<OccupationField> f =
      sample_field_coupled({u}, window, green, seed, guard_radius, max_jumps);
  return std::move(f.front());
}

// Exponential-moment query: E[exp<L^u, V>] for finitely supported V.
struct LaplaceQuery {
  FieldMap V;
  double u = 0.0;
};

namespace detail {

// Strips exact zeros; validates finiteness.
inline void strip_query(const FieldMap& V, const char* who, std::vector<Site>& zs,
                        std::vector<double>& vv) {
  zs.clear();
  vv.clear();
  for (const auto& kv : V) {
    if (!std::isfinite(kv.second))
      throw error(errc::bad_argument, std::string(who) + ": V must be finite");
    if (kv.second != 0.0) {
      zs.push_back(kv.first);
      vv.push_back(kv.second);
    }
  }
}

// Collatz-Wielandt bounds on the Perron root of the (entrywise positive)
// matrix M from one positive iterate: min and max of (Ma)_i / a_i.
inline std::pair<double, double> perron_bounds(const std::vector<double>& M, int n,
                                               int iterations) {
  std::vector<double> a(static_cast<size_t>(n), 1.0), b(static_cast<size_t>(n));
  double lo = 0.0, hi = 0.0;
  for (int it = 0; it < iterations; ++it) {
    lo = 1e300;
    hi = 0.0;
    double nrm = 0.0;
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j)
        s += M[static_cast<size_t>(i * n + j)] * a[static_cast<size_t>(j)];
      b[static_cast<size_t>(i)] = s;
      double ratio = s / a[static_cast<size_t>(i)];
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
      nrm = std::max(nrm, s);
    }
    for (int i = 0; i < n; ++i) a[static_cast<size_t>(i)] = b[static_cast<size_t>(i)] / nrm;
    if (hi - lo < 1e-13 * hi && it > 4) break;
  }
  return {lo, hi};
}

}  // namespace detail

// Closed form exp{u <V, sum_n (GV)^n 1>} by truncated Neumann series.
// Gauge gate: the spectral radius of G|V| on supp V must be < 1, else the
// exponential moment is infinite. The truncation order adapts to the
// measured contraction: with a_k = (G|V|)^k 1, the entrywise ratio bound
// r = max_i a_{k+1,i}/a_{k,i} dominates the Perron root, so the tail of
// the exponent is at most ||V||_1 ||a_k||_inf r/(1-r), kept below 1e-10/u.
inline double laplace_oracle(const LaplaceQuery& q, const GreenTable& green) {
  if (!(q.u >= 0.0) || !std::isfinite(q.u))
    throw error(errc::bad_argument, "laplace_oracle: u must be finite and >= 0");
  std::vector<Site> zs;
  std::vector<double> vv;
  detail::strip_query(q.V, "laplace_oracle", zs, vv);
  if (zs.empty() || q.u == 0.0) return 1.0;
  int n = static_cast<int>(zs.size());

  std::vector<double> G(static_cast<size_t>(n) * static_cast<size_t>(n));
  std::vector<double> Mabs(G.size());
  double v1 = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double g = green.at(sub(zs[static_cast<size_t>(i)], zs[static_cast<size_t>(j)]));
      G[static_cast<size_t>(i * n + j)] = g;
      Mabs[static_cast<size_t>(i * n + j)] = g * std::fabs(vv[static_cast<size_t>(j)]);
    }
    v1 += std::fabs(vv[static_cast<size_t>(i)]);
  }
  auto [rho_lo, rho_hi] = detail::perron_bounds(Mabs, n, 400);
  if (rho_lo >= 1.0)
    throw error(errc::numeric, "laplace_oracle: gauge not finite (spectral radius of G|V| is " +
                                   std::to_string(rho_hi) + " >= 1)");

  // w_k = (GV)^k 1 paired against V; a_k = (G|V|)^k 1 dominates |w_k|.
  std::vector<double> w(static_cast<size_t>(n), 1.0), a(w), wn(w), an(w);
  double S = 0.0;
  const double tail_goal = 1e-10 / std::max(q.u, 1.0);
  for (int k = 0;; ++k) {
    if (k >= 10000)
      throw error(errc::numeric, "laplace_oracle: Neumann series did not converge in 10^4 terms");
    double term = 0.0;
    for (int i = 0; i < n; ++i) term += vv[static_cast<size_t>(i)] * w[static_cast<size_t>(i)];
    S += term;
    double r = 0.0, amax = 0.0;
    for (int i = 0; i < n; ++i) {
      double sw = 0.0, sa = 0.0;
      for (int j = 0; j < n; ++j) {
        sw += G[static_cast<size_t>(i * n + j)] * vv[static_cast<size_t>(j)] *
              w[static_cast<size_t>(j)];
        sa += Mabs[static_cast<size_t>(i * n + j)] * a[static_cast<size_t>(j)];
      }
      wn[static_cast<size_t>(i)] = sw;
      an[static_cast<size_t>(i)] = sa;
      r = std::max(r, sa / a[static_cast<size_t>(i)]);
      amax = std::max(amax, sa);
    }
    w.swap(wn);
    a.swap(an);
    if (r < 1.0 && v1 * amax * r / (1.0 - r) < tail_goal) {
      for (int i = 0; i < n; ++i) S += vv[static_cast<size_t>(i)] * w[static_cast<size_t>(i)];
      break;
    }
  }
  return std::exp(q.u * S);
}

// Tilted exponential moment exp{u <V, (I - G~V)^{-1} 1>_lambda} with the
// lambda-weighted pairing, lambda = f~^2. G~ entries come from the tilted
// resolvent (each with its residual gate); the finite system is solved
// exactly, so no truncation enters. Lemma hypothesis sup (G~|V|) < 1 is
// checked on supp V, where the maximum principle puts the sup.
inline double tilted_laplace_oracle(const LaplaceQuery& q, const TiltedProfile& profile,
                                    const GreenTable& green) {
  if (!(q.u >= 0.0) || !std::isfinite(q.u))
    throw error(errc::bad_argument, "tilted_laplace_oracle: u must be finite and >= 0");
  std::vector<Site> zs;
  std::vector<double> vv;
  detail::strip_query(q.V, "tilted_laplace_oracle", zs, vv);
  if (zs.empty() || q.u == 0.0) return 1.0;
  int n = static_cast<int>(zs.size());

  std::vector<double> Gt(static_cast<size_t>(n) * static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    FieldMap h;
    h[zs[static_cast<size_t>(j)]] = 1.0;
    for (int i = 0; i < n; ++i)
      Gt[static_cast<size_t>(i * n + j)] =
          tilted_resolvent(profile, h, zs[static_cast<size_t>(i)], green);
  }
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j)
      s += Gt[static_cast<size_t>(i * n + j)] * std::fabs(vv[static_cast<size_t>(j)]);
    if (s >= 1.0)
      throw error(errc::numeric,
                  "tilted_laplace_oracle: gauge hypothesis violated (sup G~|V| = " +
                      std::to_string(s) + " >= 1)");
  }

  std::vector<double> A(Gt.size());
  std::vector<double> s(static_cast<size_t>(n), 1.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      A[static_cast<size_t>(i * n + j)] =
          (i == j ? 1.0 : 0.0) - Gt[static_cast<size_t>(i * n + j)] * vv[static_cast<size_t>(j)];
  detail::Lu lu = detail::lu_factor(std::move(A), n, "tilted_laplace_oracle");
  detail::lu_solve(lu, s);

  double expo = 0.0;
  for (int i = 0; i < n; ++i)
    expo += profile.lambda(zs[static_cast<size_t>(i)]) * vv[static_cast<size_t>(i)] *
            s[static_cast<size_t>(i)];
  return std::exp(q.u * expo);
}

// Tilted field in a domain U~ containing {f~ != 1} with a 2-buffer to the
// internal boundary. Entries follow the standard-walk equilibrium measure
// of U~ (the soup hits U~ with intensity u cap(U~)); inside, trajectories
// evolve as the tilted walk. Outside U~ the buffer makes the tilted walk
// literally the standard one, so on exit a single uniform decides death
// versus re-entry from the standard hitting law, exactly.
inline OccupationField sample_tilted_field(double u, const TiltedProfile& profile,
                                           const SiteSet& domain, const GreenTable& green,
                                           uint64_t seed, uint64_t max_jumps = 1000000) {
  if (!(u >= 0.0) || !std::isfinite(u))
    throw error(errc::bad_argument, "sample_tilted_field: u must be finite and >= 0");
  if (profile.dim() != domain.dim())
    throw error(errc::bad_argument, "sample_tilted_field: dimension mismatch");
  const SiteSet& supp = profile.support();
  std::vector<int> bd = domain.internal_boundary();
  for (size_t i = 0; i < supp.size(); ++i) {
    if (!domain.contains(supp[i]))
      throw error(errc::bad_argument, "sample_tilted_field: {f~ != 1} not contained in the domain");
    for (int bi : bd) {
      const Site& b = domain[static_cast<size_t>(bi)];
      int l1 = 0;
      for (int k = 0; k < domain.dim(); ++k) {
        int dk = supp[i][static_cast<size_t>(k)] - b[static_cast<size_t>(k)];
        l1 += dk < 0 ? -dk : dk;
      }
      if (l1 < 2)
        throw error(errc::bad_argument,
                    "sample_tilted_field: {f~ != 1} within distance 1 of the domain boundary "
                    "(buffer of 2 required)");
    }
  }
  RestrictedGreen rg(domain, green);

  OccupationField f;
  f.window = domain;
  f.visits.assign(domain.size(), 0);
  f.time.assign(domain.size(), 0.0);
  f.level_u = u;
  f.seed = seed;
  if (u == 0.0) return f;

  double cap = rg.cap();
  const std::vector<double>& e = rg.equilibrium();
  uint64_t n_traj = Rng(seed, 0).poisson(u * cap);
  for (uint64_t t = 0; t < n_traj; ++t) {
    Rng r(seed, 1 + t);
    Site x = domain[static_cast<size_t>(detail::sample_index(e, cap, r))];
    ++f.trajectories;
    for (uint64_t leg = 0;; ++leg) {
      if (leg >= 1000000)
        throw error(errc::numeric, "sample_tilted_field: re-entry loop exceeded 10^6 legs");
      WalkPath p = simulate_tilted(x, profile, stop_on_exit(domain), r, max_jumps);
      for (size_t i = 0; i + 1 < p.visits(); ++i) {
        int j = domain.index_of(p.sites[i]);
        ++f.visits[static_cast<size_t>(j)];
        f.time[static_cast<size_t>(j)] += p.holding[i];
      }
      std::vector<double> w = rg.hitting_from(p.sites.back());
      double mass = 0.0;
      for (double wi : w) mass += wi;
      double v = r.uniform();
      if (v >= mass) break;  // never returns to U~
      double acc = 0.0;
      size_t pick = w.size() - 1;
      for (size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (v < acc) {
          pick = i;
          break;
        }
      }
      x = domain[pick];
    }
  }
  return f;
}

}  // namespace ri
