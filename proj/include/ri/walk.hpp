#pragma once

// Trajectory-level simulation: rate-1 continuous-time SRW, guarded window
// simulation with exact re-entry, excursion decomposition between concentric
// boxes, and the tilted walk with jump rates (1/2d) f~(y)/f~(x).
//
// Guarded walks are exact in law for statistics measurable from the window
// occupation: when the walk leaves the guard box at x it is killed with
// probability 1 - h_A(x) (A = the window), otherwise teleported to its first
// re-entry site of A drawn from the conditioned hitting distribution.  By the
// strong Markov property the recorded visits to A have exactly the law of the
// full transient trajectory's visits; sites skipped by a teleport all lie
// outside A, so any region contained in the window keeps exact statistics.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ri/common.hpp"
#include "ri/dense.hpp"
#include "ri/green.hpp"
#include "ri/potential.hpp"
#include "ri/rng.hpp"

namespace ri {

// ---------------------------------------------------------------------------
// Stopping rules.

struct StopRule {
  enum class Kind { exit_set, fixed_time, jump_count };
  Kind kind = Kind::jump_count;
  const SiteSet* region = nullptr;  // exit_set: stop on first arrival outside
  double horizon = 0.0;             // fixed_time
  uint64_t jumps = 0;               // jump_count
};

inline StopRule stop_on_exit(const SiteSet& region) {
  if (region.size() == 0) throw error(errc::bad_argument, "stop_on_exit: empty region");
  StopRule r;
  r.kind = StopRule::Kind::exit_set;
  r.region = &region;
  return r;
}

inline StopRule stop_at_time(double horizon) {
  if (!std::isfinite(horizon) || horizon <= 0)
    throw error(errc::bad_argument, "stop_at_time: horizon must be positive and finite");
  StopRule r;
  r.kind = StopRule::Kind::fixed_time;
  r.horizon = horizon;
  return r;
}

inline StopRule stop_after_jumps(uint64_t n) {
  StopRule r;
  r.kind = StopRule::Kind::jump_count;
  r.jumps = n;
  return r;
}

// ---------------------------------------------------------------------------
// Paths.
//
// Holding times are lazy: indicator functionals need only the jump chain, and
// for the rate-1 walk the holding times given the jump chain are iid Exp(1),
// so they can be attached after the fact.  Fixed-time paths always carry
// times (the rule depends on them); their final entry is the truncated
// remainder of the horizon.  For exit- and count-stopped paths the stop
// happens on arrival at the final site, so occupation functionals "up to the
// stop" must exclude the final visit's holding; the excursion machinery below
// does this by construction.

struct WalkPath {
  int d = 0;
  std::vector<Site> sites;
  std::vector<double> holding;      // one entry per visit once filled
  std::vector<uint8_t> teleport;    // 1 when the visit was entered by a guard teleport
  bool has_times() const { return holding.size() == sites.size() && !sites.empty(); }
  size_t visits() const { return sites.size(); }
  size_t jumps() const { return sites.empty() ? 0 : sites.size() - 1; }
  double total_time() const {
    double t = 0.0;
    for (double h : holding) t += h;
    return t;
  }
};

inline void fill_holding_times(WalkPath& path, Rng& rng) {
  if (path.has_times()) return;
  path.holding.resize(path.sites.size());
  for (double& h : path.holding) h = rng.exponential();
}

namespace detail {

inline void srw_step(Site& x, int d, Rng& rng) {
  uint64_t k = rng.below(2u * static_cast<uint32_t>(d));
  int axis = static_cast<int>(k >> 1);
  x[static_cast<size_t>(axis)] += (k & 1) ? 1 : -1;
}

[[noreturn]] inline void jump_budget_exhausted(const char* what, uint64_t max_jumps) {
  throw error(errc::numeric, std::string(what) + ": exceeded " + std::to_string(max_jumps) +
                                 " jumps without stopping");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain SRW.

inline WalkPath simulate_srw(const Site& start, int d, const StopRule& stop, Rng& rng,
                             uint64_t max_jumps = 1000000) {
  if (d < 3 || d > kMaxDim) throw error(errc::bad_argument, "simulate_srw: d out of range");
  if (stop.kind == StopRule::Kind::exit_set && stop.region->dim() != d)
    throw error(errc::bad_argument, "simulate_srw: stop region dimension mismatch");
  WalkPath path;
  path.d = d;
  Site x = start;
  path.sites.push_back(x);
  double clock = 0.0;
  for (uint64_t step = 0;; ++step) {
    switch (stop.kind) {
      case StopRule::Kind::exit_set:
        if (!stop.region->contains(x)) {
          path.teleport.assign(path.sites.size(), 0);
          return path;
        }
        break;
      case StopRule::Kind::jump_count:
        if (step >= stop.jumps) {
          path.teleport.assign(path.sites.size(), 0);
          return path;
        }
        break;
      case StopRule::Kind::fixed_time: {
        double h = rng.exponential();
        if (clock + h >= stop.horizon) {
          path.holding.push_back(stop.horizon - clock);
          path.teleport.assign(path.sites.size(), 0);
          return path;
        }
        path.holding.push_back(h);
        clock += h;
        break;
      }
    }
    if (step >= max_jumps) detail::jump_budget_exhausted("simulate_srw", max_jumps);
    detail::srw_step(x, d, rng);
    path.sites.push_back(x);
  }
}

// ---------------------------------------------------------------------------
// Guarded walk.
//
// The window is handed over as a factorized RestrictedGreen so field samplers
// amortize the Cholesky across trajectories.  `visit(site, teleported)` is
// called for every visit in order, including the start and the final killing
// site (which lies outside the guard).  Returns the number of teleports.

inline Box guard_box(const SiteSet& window, int guard_radius) {
  Box b = window.bounding_box();
  for (int k = 0; k < b.d; ++k) {
    b.lo[static_cast<size_t>(k)] -= guard_radius;
    b.hi[static_cast<size_t>(k)] += guard_radius;
  }
  return b;
}

inline int default_guard_radius(const SiteSet& window) {
  Box b = window.bounding_box();
  int span = 1;
  for (int k = 0; k < b.d; ++k)
    span = std::max(span, b.hi[static_cast<size_t>(k)] - b.lo[static_cast<size_t>(k)]);
  return 3 * span;
}

namespace detail {

inline void check_guard(const RestrictedGreen& window, int guard_radius) {
  if (guard_radius < 1)
    throw error(errc::bad_argument, "guarded walk: guard_radius must be >= 1 so the re-entry "
                                    "set stays clear of the guard boundary");
  Box b = window.set().bounding_box();
  int span = 1;
  for (int k = 0; k < b.d; ++k)
    span = std::max(span, b.hi[static_cast<size_t>(k)] - b.lo[static_cast<size_t>(k)]);
  // A guard exit site sits at most guard_radius past the window's bounding
  // box, so h and the re-entry law need Green values out to span+guard_radius.
  if (span + guard_radius > window.green().extent())
    throw error(errc::out_of_range, "guarded walk: guard exit sites exceed the Green table "
                                    "extent; enlarge the table or shrink the guard");
}

}  // namespace detail

template <class Visit>
uint64_t walk_with_guard(const Site& start, const RestrictedGreen& window, int guard_radius,
                         Rng& rng, Visit&& visit, uint64_t max_jumps = 100000000) {
  detail::check_guard(window, guard_radius);
  const Box guard = guard_box(window.set(), guard_radius);
  const SiteSet& target = window.set();
  const int d = guard.d;
  uint64_t teleports = 0;
  Site x = start;
  bool teleported = false;
  for (uint64_t step = 0;; ++step) {
    visit(static_cast<const Site&>(x), teleported);
    teleported = false;
    if (!guard.contains(x)) {
      std::vector<double> w = window.hitting_from(x);
      double mass = 0.0;
      for (double v : w) mass += v;
      double v = rng.uniform();
      if (v >= mass) return teleports;  // escapes to infinity without re-entering
      double acc = 0.0;
      int pick = static_cast<int>(target.size()) - 1;
      for (int i = 0; i < static_cast<int>(target.size()); ++i) {
        acc += w[static_cast<size_t>(i)];
        if (v < acc) {
          pick = i;
          break;
        }
      }
      x = target[pick];
      teleported = true;
      ++teleports;
      continue;
    }
    if (step >= max_jumps) detail::jump_budget_exhausted("walk_with_guard", max_jumps);
    detail::srw_step(x, d, rng);
  }
}

inline WalkPath simulate_with_guard(const Site& start, const RestrictedGreen& window,
                                    int guard_radius, Rng& rng,
                                    uint64_t max_jumps = 1000000) {
  WalkPath path;
  path.d = window.set().dim();
  walk_with_guard(start, window, guard_radius, rng,
                  [&](const Site& x, bool tp) {
                    path.sites.push_back(x);
                    path.teleport.push_back(tp ? 1 : 0);
                  },
                  max_jumps);
  return path;
}

inline WalkPath simulate_with_guard(const Site& start, const SiteSet& window, int guard_radius,
                                    const GreenTable& green, Rng& rng,
                                    uint64_t max_jumps = 1000000) {
  RestrictedGreen rg(window, green);
  return simulate_with_guard(start, rg, guard_radius, rng, max_jumps);
}

// ---------------------------------------------------------------------------
// Excursions between concentric boxes: maximal segments from a visit of B to
// the first subsequent exit of U.  sites[begin] is the B-entry, sites[end] the
// first site outside U; everything in between stays in U.  A trailing segment
// that never exits U is not an excursion and is dropped.

struct Excursion {
  size_t begin = 0;
  size_t end = 0;  // index of the exit site; occupation inside U runs over [begin, end)
};

inline std::vector<Excursion> excursion_decompose(const WalkPath& path, const Box& B,
                                                  const Box& U) {
  if (B.d != U.d || (path.d != 0 && path.d != B.d))
    throw error(errc::bad_argument, "excursion_decompose: dimension mismatch");
  if (B.volume() == 0) throw error(errc::bad_argument, "excursion_decompose: B is empty");
  for (int k = 0; k < B.d; ++k)
    if (B.lo[static_cast<size_t>(k)] < U.lo[static_cast<size_t>(k)] ||
        B.hi[static_cast<size_t>(k)] > U.hi[static_cast<size_t>(k)])
      throw error(errc::bad_argument, "excursion_decompose: B not contained in U");
  std::vector<Excursion> out;
  bool active = false;
  size_t begin = 0;
  for (size_t i = 0; i < path.sites.size(); ++i) {
    const Site& s = path.sites[i];
    if (!active) {
      if (B.contains(s)) {
        active = true;
        begin = i;
      }
    } else if (!U.contains(s)) {
      out.push_back({begin, i});
      active = false;  // the exit site is outside U superset B, so it cannot re-open
    }
  }
  return out;
}

// Occupation of the first floor(a) excursions: time spent at each site by the
// excursion segments [begin, end), i.e. up to but excluding the exit of U.
// Identically zero when a < 1.
inline FieldMap truncated_occupation(const WalkPath& path, const std::vector<Excursion>& exc,
                                     double a) {
  if (!path.has_times())
    throw error(errc::bad_argument, "truncated_occupation: path has no holding times");
  FieldMap occ;
  if (a < 1.0) return occ;
  size_t m = exc.size();
  if (a < static_cast<double>(m)) m = static_cast<size_t>(std::floor(a));
  for (size_t e = 0; e < m; ++e)
    for (size_t i = exc[e].begin; i < exc[e].end; ++i)
      occ[path.sites[i]] += path.holding[i];
  return occ;
}

// ---------------------------------------------------------------------------
// Equilibrium time functional tau = int_0^infty e_B(X_s) ds with X started
// from the normalized equilibrium measure of B; its law is Exp(1).  The
// truncated variant stops the integral at the first exit of U and is
// stochastically dominated by the full one.

namespace detail {

inline int sample_index(const std::vector<double>& w, double total, Rng& rng) {
  double v = rng.uniform() * total;
  double acc = 0.0;
  for (size_t i = 0; i + 1 < w.size(); ++i) {
    acc += w[i];
    if (v < acc) return static_cast<int>(i);
  }
  return static_cast<int>(w.size()) - 1;
}

}  // namespace detail

inline std::vector<double> equilibrium_time_sample(const Box& B, const GreenTable& green,
                                                   Rng& rng, int n, int guard_radius = 0,
                                                   uint64_t max_jumps = 1000000) {
  if (n < 1) throw error(errc::bad_argument, "equilibrium_time_sample: n must be >= 1");
  SiteSet sB = SiteSet::from_box(B);
  RestrictedGreen rg(sB, green);
  const std::vector<double>& e = rg.equilibrium();
  if (guard_radius == 0) guard_radius = default_guard_radius(sB);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Site start = sB[detail::sample_index(e, rg.cap(), rng)];
    double tau = 0.0;
    walk_with_guard(start, rg, guard_radius, rng,
                    [&](const Site& x, bool) {
                      int idx = sB.index_of(x);
                      double h = rng.exponential();
                      if (idx >= 0) tau += e[static_cast<size_t>(idx)] * h;
                    },
                    max_jumps);
    out.push_back(tau);
  }
  return out;
}

inline std::vector<double> equilibrium_time_sample(const Box& B, const Box& U,
                                                   const GreenTable& green, Rng& rng, int n,
                                                   uint64_t max_jumps = 1000000) {
  if (n < 1) throw error(errc::bad_argument, "equilibrium_time_sample: n must be >= 1");
  if (B.d != U.d) throw error(errc::bad_argument, "equilibrium_time_sample: dimension mismatch");
  for (int k = 0; k < B.d; ++k)
    if (B.lo[static_cast<size_t>(k)] < U.lo[static_cast<size_t>(k)] ||
        B.hi[static_cast<size_t>(k)] > U.hi[static_cast<size_t>(k)])
      throw error(errc::bad_argument, "equilibrium_time_sample: B not contained in U");
  SiteSet sB = SiteSet::from_box(B);
  RestrictedGreen rg(sB, green);
  const std::vector<double>& e = rg.equilibrium();
  const int d = B.d;
  std::vector<double> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Site x = sB[detail::sample_index(e, rg.cap(), rng)];
    double tau = 0.0;
    for (uint64_t step = 0;; ++step) {
      if (!U.contains(x)) break;  // integral truncated at the exit of U
      int idx = sB.index_of(x);
      double h = rng.exponential();
      if (idx >= 0) tau += e[static_cast<size_t>(idx)] * h;
      if (step >= max_jumps) detail::jump_budget_exhausted("equilibrium_time_sample", max_jumps);
      detail::srw_step(x, d, rng);
    }
    out.push_back(tau);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tilted walk.  f~ > 0 everywhere, equal to 1 off a finite set; jump rate
// along x -> y is (1/2d) f~(y)/f~(x), reversible for lambda = f~^2, and the
// derived potential is V~ = -(L f~)/f~.

class TiltedProfile {
 public:
  TiltedProfile(int d, const FieldMap& f_values) : d_(d), support_(d), active_(d) {
    if (d < 3 || d > kMaxDim) throw error(errc::bad_argument, "TiltedProfile: d out of range");
    for (const auto& [site, v] : f_values) {
      if (!std::isfinite(v) || v <= 0)
        throw error(errc::bad_argument, "TiltedProfile: f~ must be positive and finite");
      if (v != 1.0) f_.emplace(site, v);
    }
    for (const auto& [site, v] : f_) {
      (void)v;
      support_.push(site);
      active_.push(site);
      for (int k = 0; k < d_; ++k) {
        Site y = site;
        y[static_cast<size_t>(k)] += 1;
        active_.push(y);
        y[static_cast<size_t>(k)] -= 2;
        active_.push(y);
      }
    }
  }

  int dim() const { return d_; }
  const SiteSet& support() const { return support_; }  // where f~ differs from 1
  const SiteSet& active() const { return active_; }    // where the dynamics can differ from SRW

  double f(const Site& x) const {
    auto it = f_.find(x);
    return it == f_.end() ? 1.0 : it->second;
  }
  double lambda(const Site& x) const {
    double v = f(x);
    return v * v;
  }
  // (L f~)(x); nonzero only on the active set.
  double laplacian_f(const Site& x) const {
    if (!active_.size() || !active_.contains(x)) return 0.0;
    double fx = f(x), s = 0.0;
    for (int k = 0; k < d_; ++k) {
      Site y = x;
      y[static_cast<size_t>(k)] += 1;
      s += f(y) - fx;
      y[static_cast<size_t>(k)] -= 2;
      s += f(y) - fx;
    }
    return s / (2.0 * d_);
  }
  double potential(const Site& x) const { return -laplacian_f(x) / f(x); }

 private:
  int d_ = 3;
  FieldMap f_;
  SiteSet support_;
  SiteSet active_;
};

inline WalkPath simulate_tilted(const Site& start, const TiltedProfile& profile,
                                const StopRule& stop, Rng& rng,
                                uint64_t max_jumps = 1000000) {
  const int d = profile.dim();
  if (stop.kind == StopRule::Kind::exit_set && stop.region->dim() != d)
    throw error(errc::bad_argument, "simulate_tilted: stop region dimension mismatch");
  WalkPath path;
  path.d = d;
  Site x = start;
  path.sites.push_back(x);
  double clock = 0.0;
  std::vector<double> w(static_cast<size_t>(2 * d));
  for (uint64_t step = 0;; ++step) {
    bool stop_now = false;
    switch (stop.kind) {
      case StopRule::Kind::exit_set:
        stop_now = !stop.region->contains(x);
        break;
      case StopRule::Kind::jump_count:
        stop_now = step >= stop.jumps;
        break;
      case StopRule::Kind::fixed_time:
        break;
    }
    // Away from the active set every rate is 1/2d: Exp(1) holding, uniform
    // neighbor, in the same draw order as simulate_srw.
    bool plain = !profile.active().size() || !profile.active().contains(x);
    double fx = plain ? 1.0 : profile.f(x);
    double total = 0.0;
    if (plain) {
      total = 1.0;
    } else {
      for (int k = 0; k < d; ++k) {
        Site y = x;
        y[static_cast<size_t>(k)] += 1;
        w[static_cast<size_t>(2 * k)] = profile.f(y);
        y[static_cast<size_t>(k)] -= 2;
        w[static_cast<size_t>(2 * k + 1)] = profile.f(y);
        total += w[static_cast<size_t>(2 * k)] + w[static_cast<size_t>(2 * k + 1)];
      }
      total /= 2.0 * d * fx;
    }
    double h = rng.exponential() / total;
    if (stop.kind == StopRule::Kind::fixed_time && clock + h >= stop.horizon) {
      path.holding.push_back(stop.horizon - clock);
      break;
    }
    path.holding.push_back(h);
    if (stop_now) break;
    clock += h;
    if (step >= max_jumps) detail::jump_budget_exhausted("simulate_tilted", max_jumps);
    if (plain) {
      detail::srw_step(x, d, rng);
    } else {
      uint64_t pick = 0;
      double v = rng.uniform() * total * 2.0 * d * fx;
      double acc = 0.0;
      for (size_t k = 0; k < w.size(); ++k) {
        acc += w[k];
        if (v < acc || k + 1 == w.size()) {
          pick = k;
          break;
        }
      }
      int axis = static_cast<int>(pick >> 1);
      x[static_cast<size_t>(axis)] += (pick & 1) ? -1 : 1;
    }
    path.sites.push_back(x);
  }
  path.teleport.assign(path.sites.size(), 0);
  return path;
}

// ---------------------------------------------------------------------------
// Tilted Green operator G~h(x) = E~_x int_0^infty h(X_s) ds.  With w = f~ u
// and W = (L f~)/f~ the equation (-L~) u = h becomes (-L + W) w = f~ h, and W
// is finitely supported, so w = G(f~ h) - G(W w) closes into a dense solve on
// supp W against the Green table; no truncation domain is involved.  The
// solved values are checked against the defining equation, so an ill-posed
// tilt (gauge at or past criticality) surfaces as a numeric error.

namespace detail {

class TiltedResolvent {
 public:
  TiltedResolvent(const TiltedProfile& profile, const FieldMap& h, const GreenTable& green)
      : profile_(profile), green_(green) {
    if (green.dim() != profile.dim())
      throw error(errc::bad_argument, "tilted_resolvent: profile/green dimension mismatch");
    for (const auto& [site, v] : h)
      if (v != 0.0) rhs_.emplace_back(site, profile.f(site) * v);
    for (int i = 0; i < static_cast<int>(profile.active().size()); ++i) {
      const Site& z = profile.active()[i];
      double wz = profile.laplacian_f(z) / profile.f(z);
      if (wz != 0.0) s_.emplace_back(z, wz);
    }
    int m = static_cast<int>(s_.size());
    if (m == 0) return;
    std::vector<double> mat(static_cast<size_t>(m) * m);
    std::vector<double> b(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < m; ++j)
        mat[static_cast<size_t>(i) * m + j] =
            (i == j ? 1.0 : 0.0) + green_.at(s_[i].first, s_[j].first) * s_[j].second;
      b[static_cast<size_t>(i)] = gfh(s_[i].first);
    }
    Lu lu = lu_factor(std::move(mat), m, "tilted_resolvent");
    lu_solve(lu, b);
    ws_ = std::move(b);
  }

  double u(const Site& x) const {
    double w = gfh(x);
    for (size_t j = 0; j < s_.size(); ++j)
      w -= green_.at(x, s_[j].first) * s_[j].second * ws_[j];
    return w / profile_.f(x);
  }

  // Residual of (-L~)u = h at x, for the a-posteriori check.
  double residual(const Site& x, const FieldMap& h) const {
    double fx = profile_.f(x), ux = u(x);
    double lap = 0.0;
    for (int k = 0; k < profile_.dim(); ++k) {
      Site y = x;
      y[static_cast<size_t>(k)] += 1;
      lap += profile_.f(y) / fx * (u(y) - ux);
      y[static_cast<size_t>(k)] -= 2;
      lap += profile_.f(y) / fx * (u(y) - ux);
    }
    lap /= 2.0 * profile_.dim();
    auto it = h.find(x);
    double hx = it == h.end() ? 0.0 : it->second;
    return -lap - hx;
  }

  const std::vector<std::pair<Site, double>>& coupling() const { return s_; }

 private:
  double gfh(const Site& x) const {
    double s = 0.0;
    for (const auto& [site, v] : rhs_) s += green_.at(x, site) * v;
    return s;
  }

  const TiltedProfile& profile_;
  const GreenTable& green_;
  std::vector<std::pair<Site, double>> rhs_;  // (site, f~ h) over supp h
  std::vector<std::pair<Site, double>> s_;    // (site, W) over supp W
  std::vector<double> ws_;
};

}  // namespace detail

inline double tilted_resolvent(const TiltedProfile& profile, const FieldMap& h, const Site& x,
                               const GreenTable& green) {
  detail::TiltedResolvent solver(profile, h, green);
  double scale = 0.0;
  for (const auto& [site, v] : h) {
    (void)site;
    scale = std::max(scale, std::fabs(v));
  }
  int checked = 0;
  for (const auto& [site, w] : solver.coupling()) {
    (void)w;
    if (checked++ >= 8) break;
    double r = solver.residual(site, h);
    if (std::fabs(r) > 1e-8 * std::max(scale, 1.0))
      throw error(errc::numeric, "tilted_resolvent: residual " + std::to_string(r) +
                                     " exceeds tolerance (tilt at or past gauge criticality)");
  }
  return solver.u(x);
}

}  // namespace ri
