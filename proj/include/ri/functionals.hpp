#pragma once

// Local functionals F of occupation fields (occupation itself, site
// indicator, ball hitting, disconnection), their curves
// theta(u) = E[F((L^u_y)_{|y|_inf <= R})], spatial ergodic averages, and a
// good-box diagnostic built on excursion-truncated fields: the box B sits
// inside U, the soup is decomposed into successive excursions from B to
// the exit of U, and the first floor(a) of them make the truncated field.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ri/common.hpp"
#include "ri/field.hpp"

namespace ri {

enum class FunctionalKind { linear, site_indicator, ball_hit, disconnect, custom };

inline const char* to_string(FunctionalKind k) {
  switch (k) {
    case FunctionalKind::linear: return "linear";
    case FunctionalKind::site_indicator: return "site_indicator";
    case FunctionalKind::ball_hit: return "ball_hit";
    case FunctionalKind::disconnect: return "disconnect";
    case FunctionalKind::custom: return "custom";
  }
  return "?";
}

inline FunctionalKind functional_kind_from(const std::string& s) {
  if (s == "linear") return FunctionalKind::linear;
  if (s == "site_indicator") return FunctionalKind::site_indicator;
  if (s == "ball_hit") return FunctionalKind::ball_hit;
  if (s == "disconnect") return FunctionalKind::disconnect;
  if (s == "custom") return FunctionalKind::custom;
  throw error(errc::bad_argument, "unknown functional kind: " + s);
}

// Local functional of the field restricted to B(0,R): F(0) = 0,
// non-decreasing in each coordinate, F(l+l') <= F(l) + c_f (1 + sum l').
// Bounded kinds have sup F = theta_sup, the limit of their theta curve.
struct LocalFunctional {
  FunctionalKind kind = FunctionalKind::linear;
  int r = 0;  // disconnect only: radius of the source ball B(0,r)
  int R = 0;  // range; disconnect: radius of the target sphere S(0,R)
  double c_f = 1.0;
  bool monotone = true;
  double theta_sup = std::numeric_limits<double>::infinity();
  // custom rule over the (2R+1)^d values of B(0,R), row-major with the
  // last coordinate fastest (Box::for_each order)
  std::function<double(const std::vector<double>&)> fn;

  int range() const { return R; }
};

inline LocalFunctional lf_linear() {
  LocalFunctional f;
  f.kind = FunctionalKind::linear;
  return f;
}

inline LocalFunctional lf_site_indicator() {
  LocalFunctional f;
  f.kind = FunctionalKind::site_indicator;
  f.theta_sup = 1.0;
  return f;
}

inline LocalFunctional lf_ball_hit(int R) {
  if (R < 0) throw error(errc::bad_argument, "ball_hit: radius must be >= 0");
  LocalFunctional f;
  f.kind = FunctionalKind::ball_hit;
  f.R = R;
  f.theta_sup = 1.0;
  return f;
}

inline LocalFunctional lf_disconnect(int r, int R) {
  if (r < 0 || R <= r)
    throw error(errc::bad_argument, "disconnect: need 0 <= r < R");
  LocalFunctional f;
  f.kind = FunctionalKind::disconnect;
  f.r = r;
  f.R = R;
  f.theta_sup = 1.0;
  return f;
}

inline LocalFunctional lf_custom(int R, double c_f, bool monotone, double theta_sup,
                                 std::function<double(const std::vector<double>&)> fn) {
  if (R < 0) throw error(errc::bad_argument, "custom functional: range must be >= 0");
  if (!(c_f > 0.0) || !std::isfinite(c_f))
    throw error(errc::bad_argument, "custom functional: c_f must be finite and > 0");
  if (!(theta_sup > 0.0)) throw error(errc::bad_argument, "custom functional: theta_sup must be > 0");
  if (!fn) throw error(errc::bad_argument, "custom functional: evaluation rule missing");
  LocalFunctional f;
  f.kind = FunctionalKind::custom;
  f.R = R;
  f.c_f = c_f;
  f.monotone = monotone;
  f.theta_sup = theta_sup;
  f.fn = std::move(fn);
  return f;
}

namespace detail {

inline size_t block_volume(int d, int R) {
  size_t v = 1;
  for (int i = 0; i < d; ++i) v *= static_cast<size_t>(2 * R + 1);
  return v;
}

// F at the center of a gathered B(x,R) block (row-major, last fastest).
inline double eval_block(const LocalFunctional& F, int d, const std::vector<double>& block) {
  const int R = F.range();
  const int side = 2 * R + 1;
  switch (F.kind) {
    case FunctionalKind::linear:
    case FunctionalKind::site_indicator: {
      size_t c = 0;
      for (int i = 0; i < d; ++i) c = c * static_cast<size_t>(side) + static_cast<size_t>(R);
      return F.kind == FunctionalKind::linear ? block[c] : (block[c] > 0.0 ? 1.0 : 0.0);
    }
    case FunctionalKind::ball_hit: {
      for (double v : block)
        if (v > 0.0) return 1.0;
      return 0.0;
    }
    case FunctionalKind::disconnect: {
      // 1 iff no nearest-neighbor path of vacant sites inside B(0,R) joins
      // a vacant site of B(0,r) to the sphere S(0,R)
      const size_t n = block.size();
      std::vector<char> seen(n, 0);
      std::vector<size_t> stack;
      auto supnorm = [&](size_t idx) {
        int s = 0;
        for (int i = d - 1; i >= 0; --i) {
          int c = static_cast<int>(idx % static_cast<size_t>(side));
          idx /= static_cast<size_t>(side);
          s = std::max(s, std::abs(c - R));
        }
        return s;
      };
      for (size_t i = 0; i < n; ++i)
        if (block[i] == 0.0 && supnorm(i) <= F.r) {
          seen[i] = 1;
          stack.push_back(i);
        }
      std::vector<size_t> stride(static_cast<size_t>(d));
      stride[static_cast<size_t>(d) - 1] = 1;
      for (int i = d - 2; i >= 0; --i)
        stride[static_cast<size_t>(i)] = stride[static_cast<size_t>(i) + 1] * static_cast<size_t>(side);
      while (!stack.empty()) {
        size_t i = stack.back();
        stack.pop_back();
        if (supnorm(i) == R) return 0.0;
        size_t rest = i;
        for (int k = d - 1; k >= 0; --k) {
          int c = static_cast<int>(rest % static_cast<size_t>(side));
          rest /= static_cast<size_t>(side);
          if (c > 0) {
            size_t j = i - stride[static_cast<size_t>(k)];
            if (block[j] == 0.0 && !seen[j]) { seen[j] = 1; stack.push_back(j); }
          }
          if (c + 1 < side) {
            size_t j = i + stride[static_cast<size_t>(k)];
            if (block[j] == 0.0 && !seen[j]) { seen[j] = 1; stack.push_back(j); }
          }
        }
      }
      return 1.0;
    }
    case FunctionalKind::custom:
      return F.fn(block);
  }
  throw error(errc::bad_argument, "eval_block: unknown kind");
}

}  // namespace detail

// F applied to the field around x; B(x,R) must lie inside the window.
inline double evaluate(const LocalFunctional& F, const OccupationField& field, const Site& x) {
  const int d = field.window.dim();
  const int R = F.range();
  std::vector<double> block;
  block.reserve(detail::block_volume(d, R));
  bool inside = true;
  sup_ball(d, x, R).for_each([&](const Site& y) {
    int i = field.window.index_of(y);
    if (i < 0) { inside = false; return; }
    block.push_back(field.time[static_cast<size_t>(i)]);
  });
  if (!inside)
    throw error(errc::bad_argument, "evaluate: local window B(x,R) leaves the field window");
  return detail::eval_block(F, d, block);
}

// theta(u) for the kinds with a closed form: the site indicator gives
// 1 - e^{-u/g(0,0)}, the ball hit 1 - e^{-u cap(B(0,R))}.
inline double theta_closed_form(const LocalFunctional& F, double u, const GreenTable& green) {
  if (!(u >= 0.0) || !std::isfinite(u))
    throw error(errc::bad_argument, "theta_closed_form: level u must be finite and >= 0");
  switch (F.kind) {
    case FunctionalKind::site_indicator:
      return -std::expm1(-u / green.at(Site{}));
    case FunctionalKind::ball_hit: {
      double cap = RestrictedGreen(SiteSet::from_box(sup_ball(green.dim(), Site{}, F.R)), green).cap();
      return -std::expm1(-u * cap);
    }
    default:
      throw error(errc::bad_argument,
                  std::string("theta_closed_form: no closed form for kind ") + to_string(F.kind) +
                      "; use estimate_theta");
  }
}

// Monte Carlo theta curve over a level grid.  n_samples = 0 marks a
// closed-form curve (zero half-widths).
struct ThetaCurve {
  int d = 3;
  FunctionalKind kind = FunctionalKind::site_indicator;
  int r = 0;
  int R = 0;
  uint64_t seed = 0;
  uint64_t n_samples = 0;
  std::vector<double> u_grid;
  std::vector<double> values;
  std::vector<double> ci_halfwidth;
  double theta_inf = 1.0;
  bool isotonic = false;
};

inline void validate_theta_curve(const ThetaCurve& c) {
  size_t m = c.u_grid.size();
  if (m == 0 || c.values.size() != m || c.ci_halfwidth.size() != m)
    throw error(errc::bad_argument, "theta curve: grid, values and half-widths must align");
  for (size_t i = 0; i < m; ++i) {
    if (!std::isfinite(c.u_grid[i]) || c.u_grid[i] < 0.0)
      throw error(errc::bad_argument, "theta curve: levels must be finite and >= 0");
    if (i > 0 && !(c.u_grid[i] > c.u_grid[i - 1]))
      throw error(errc::bad_argument, "theta curve: levels must increase strictly");
    if (!std::isfinite(c.values[i]) || c.values[i] < 0.0)
      throw error(errc::bad_argument, "theta curve: values must be finite and >= 0");
    if (!(c.ci_halfwidth[i] >= 0.0))
      throw error(errc::bad_argument, "theta curve: half-widths must be >= 0");
    if (c.values[i] > c.theta_inf + c.ci_halfwidth[i] + 1e-12)
      throw error(errc::bad_argument, "theta curve: value exceeds theta_inf beyond CI slack");
    if (i > 0 && c.values[i] < c.values[i - 1] - (c.ci_halfwidth[i] + c.ci_halfwidth[i - 1]) - 1e-12)
      throw error(errc::bad_argument, "theta curve: values decrease beyond CI slack");
  }
  if (c.u_grid[0] == 0.0 && std::fabs(c.values[0]) > 1e-15)
    throw error(errc::bad_argument, "theta curve: value at u = 0 must vanish");
}

inline void write_theta_csv(const ThetaCurve& c, std::ostream& os) {
  validate_theta_curve(c);
  os << "u,theta,ci_halfwidth,n_samples,kind,r,R,seed\n";
  char buf[128];
  for (size_t i = 0; i < c.u_grid.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%llu,", c.u_grid[i], c.values[i],
                  c.ci_halfwidth[i], static_cast<unsigned long long>(c.n_samples));
    os << buf << to_string(c.kind) << ',' << c.r << ',' << c.R << ','
       << static_cast<unsigned long long>(c.seed) << '\n';
  }
}

namespace detail {

inline double csv_number(const std::string& cell, const char* what) {
  try {
    size_t pos = 0;
    double v = std::stod(cell, &pos);
    if (pos != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw error(errc::io, std::string("theta curve csv: bad ") + what + " value '" + cell + "'");
  }
}

inline uint64_t csv_count(const std::string& cell, const char* what) {
  try {
    size_t pos = 0;
    unsigned long long v = std::stoull(cell, &pos);
    if (pos != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw error(errc::io, std::string("theta curve csv: bad ") + what + " value '" + cell + "'");
  }
}

}  // namespace detail

inline ThetaCurve read_theta_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "u,theta,ci_halfwidth,n_samples,kind,r,R,seed")
    throw error(errc::io, "theta curve csv: missing or wrong header");
  ThetaCurve c;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream row(line);
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw error(errc::io, "theta curve csv: expected 8 columns");
    c.u_grid.push_back(detail::csv_number(cells[0], "u"));
    c.values.push_back(detail::csv_number(cells[1], "theta"));
    c.ci_halfwidth.push_back(detail::csv_number(cells[2], "ci_halfwidth"));
    uint64_t n = detail::csv_count(cells[3], "n_samples");
    FunctionalKind k = functional_kind_from(cells[4]);
    int rr = static_cast<int>(detail::csv_number(cells[5], "r"));
    int RR = static_cast<int>(detail::csv_number(cells[6], "R"));
    uint64_t sd = detail::csv_count(cells[7], "seed");
    if (first) {
      c.n_samples = n;
      c.kind = k;
      c.r = rr;
      c.R = RR;
      c.seed = sd;
      first = false;
    } else if (n != c.n_samples || k != c.kind || rr != c.r || RR != c.R || sd != c.seed) {
      throw error(errc::io, "theta curve csv: provenance columns must be constant");
    }
  }
  if (first) throw error(errc::io, "theta curve csv: no data rows");
  c.theta_inf = (c.kind == FunctionalKind::linear || c.kind == FunctionalKind::custom)
                    ? std::numeric_limits<double>::infinity()
                    : 1.0;
  validate_theta_curve(c);
  return c;
}

namespace detail {

inline constexpr double kZ95 = 1.959963984540054;

// Pool-adjacent-violators, equal weights, non-decreasing fit.
inline void pava_nondecreasing(std::vector<double>& v) {
  std::vector<double> val;
  std::vector<long> w;
  for (double x : v) {
    val.push_back(x);
    w.push_back(1);
    while (val.size() > 1 && val[val.size() - 2] > val.back()) {
      double merged = (val[val.size() - 2] * static_cast<double>(w[w.size() - 2]) +
                       val.back() * static_cast<double>(w.back())) /
                      static_cast<double>(w[w.size() - 2] + w.back());
      w[w.size() - 2] += w.back();
      val[val.size() - 2] = merged;
      val.pop_back();
      w.pop_back();
    }
  }
  size_t k = 0;
  for (size_t b = 0; b < val.size(); ++b)
    for (long i = 0; i < w[b]; ++i) v[k++] = val[b];
}

}  // namespace detail

// Coupled-level Monte Carlo curve: every replica draws one soup at the top
// level and thins it to the whole grid, so for monotone F the raw curve is
// non-decreasing sample by sample, not only in the mean.
inline ThetaCurve estimate_theta(const LocalFunctional& F, const std::vector<double>& u_grid,
                                 long n_samples, const GreenTable& green, uint64_t seed,
                                 bool isotonic = false) {
  if (u_grid.empty()) throw error(errc::bad_argument, "estimate_theta: empty level grid");
  for (size_t i = 0; i < u_grid.size(); ++i) {
    if (!std::isfinite(u_grid[i]) || u_grid[i] < 0.0)
      throw error(errc::bad_argument, "estimate_theta: levels must be finite and >= 0");
    if (i > 0 && !(u_grid[i] > u_grid[i - 1]))
      throw error(errc::bad_argument, "estimate_theta: levels must increase strictly");
  }
  if (n_samples < 100)
    throw error(errc::bad_argument, "estimate_theta: need at least 100 samples");
  const int d = green.dim();
  const int R = F.range();
  SiteSet window = SiteSet::from_box(sup_ball(d, Site{}, R));
  int guard = std::min(4, green.extent() - (2 * R + 1));
  if (guard < 1)
    throw error(errc::bad_argument, "estimate_theta: green table extent too small for the range");

  const size_t m = u_grid.size();
  std::vector<double> sum(m, 0.0), sumsq(m, 0.0);
  for (long i = 0; i < n_samples; ++i) {
    uint64_t si = seed ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(i + 1));
    std::vector<OccupationField> fs = sample_field_coupled(u_grid, window, green, si, guard);
    for (size_t k = 0; k < m; ++k) {
      double v = evaluate(F, fs[k], Site{});
      sum[k] += v;
      sumsq[k] += v * v;
    }
  }

  ThetaCurve c;
  c.d = d;
  c.kind = F.kind;
  c.r = F.r;
  c.R = R;
  c.seed = seed;
  c.n_samples = static_cast<uint64_t>(n_samples);
  c.u_grid = u_grid;
  c.values.resize(m);
  c.ci_halfwidth.resize(m);
  bool indicator = F.kind == FunctionalKind::site_indicator ||
                   F.kind == FunctionalKind::ball_hit || F.kind == FunctionalKind::disconnect;
  double n = static_cast<double>(n_samples);
  for (size_t k = 0; k < m; ++k) {
    double mean = sum[k] / n;
    double var = indicator ? mean * (1.0 - mean)
                           : std::max(0.0, (sumsq[k] - n * mean * mean) / (n - 1.0));
    c.values[k] = mean;
    c.ci_halfwidth[k] = detail::kZ95 * std::sqrt(var / n);
  }
  if (isotonic) {
    detail::pava_nondecreasing(c.values);
    c.isotonic = true;
  }
  c.theta_inf = indicator ? 1.0 : F.theta_sup;
  return c;
}

// Scaled domain D_N = {x : x/N in D} for the spatial averages of the
// ergodic theorem.
struct Shape {
  enum Kind { cube, ball } kind = cube;  // cube: scale*[-1,1]^d; ball: Euclidean radius scale
  double scale = 1.0;
};

inline SiteSet shape_sites(const Shape& D, int N, int d) {
  if (!(D.scale > 0.0) || !std::isfinite(D.scale))
    throw error(errc::bad_argument, "shape: scale must be finite and > 0");
  if (N < 1) throw error(errc::bad_argument, "shape: N must be >= 1");
  double rad = D.scale * N;
  int m = static_cast<int>(std::floor(rad + 1e-9));
  SiteSet out(d);
  sup_ball(d, Site{}, m).for_each([&](const Site& x) {
    if (D.kind == Shape::cube) {
      out.push(x);
    } else {
      double q = 0.0;
      for (int i = 0; i < d; ++i)
        q += static_cast<double>(x[static_cast<size_t>(i)]) * x[static_cast<size_t>(i)];
      if (q <= rad * rad + 1e-9) out.push(x);
    }
  });
  return out;
}

// |D_N|^{-1} sum_{x in D_N} F((L^u_{x+.})) on one sampled field.
inline double ergodic_average(const LocalFunctional& F, double u, int N, const Shape& D,
                              const GreenTable& green, uint64_t seed) {
  const int d = green.dim();
  SiteSet dn = shape_sites(D, N, d);
  SiteSet window = dn.enlarged(F.range());
  if (window.size() > 32768)
    throw error(errc::bad_argument, "ergodic_average: window of " + std::to_string(window.size()) +
                                        " sites exceeds the memory budget (32768)");
  Box bb = window.bounding_box();
  int span = 1;
  for (int i = 0; i < d; ++i)
    span = std::max(span, bb.hi[static_cast<size_t>(i)] - bb.lo[static_cast<size_t>(i)]);
  int guard = std::min(4, green.extent() - span);
  if (guard < 1)
    throw error(errc::bad_argument, "ergodic_average: green table extent too small for the window");
  OccupationField f = sample_field(u, window, green, seed, guard);
  double s = 0.0;
  for (const Site& x : dn.sites()) s += evaluate(F, f, x);
  return s / static_cast<double>(dn.size());
}

// Good-box parameters: levels Sigma, band width kappa, functional slack mu,
// box side L and separation K of B = [0,L)^d inside U = [-KL+1, KL-1)^d.
struct GoodBoxSpec {
  std::vector<double> Sigma;
  double kappa = 0.3;
  double mu = 0.1;
  int L = 4;
  int K = 8;
};

struct GoodBoxAlphaReport {
  double alpha = 0.0;
  long a = 0;  // floor(alpha cap(B)) excursions in the truncated field
  long bad_count = 0;
  double bad_frequency = 0.0;
  long sandwich_checks = 0;
  long sandwich_violations = 0;
  double mean_eq_pairing = 0.0;  // <e_bar_B, L^B_a> across replicas
  double se_eq_pairing = 0.0;
};

struct GoodBoxReport {
  double cap_B = 0.0;
  long replicas = 0;
  long good_count = 0;
  double mean_excursions_u = 0.0;  // N_u(B) across replicas
  double mean_eq_u = 0.0;          // <e_bar_B, L^u> across replicas, mean u exactly
  double se_eq_u = 0.0;
  std::vector<GoodBoxAlphaReport> per_alpha;
};

namespace detail {

struct BoxStats {
  double eq = 0.0;      // <e_bar_B, field>
  double m = 0.0;       // <m_B, field>
  double favg = 0.0;    // |B|^{-1} sum_{x in B} F
  double favg_in = 0.0; // |B|^{-1} sum over the R-deflated inner box
};

}  // namespace detail

// Replicated excursion experiment for the bad-box event.  Only soup
// trajectories meeting B matter; they arrive label-ordered as a Poisson
// stream of rate cap(B) starting from the normalized equilibrium of B, and
// after each exit of U the next return to B is teleported with the exact
// hitting law, so excursion prefixes and N_u(B) have the right joint law.
// The three clauses per alpha are the equilibrium pairing band, the
// uniform pairing band (the F_0 part of the bad event, slack-free) and the
// theta band for F; the sandwich checks replay the deterministic
// implication between N_u(B)/cap(B) and the full-field quantities, so
// their violation count must come out zero.
inline GoodBoxReport good_box_diagnostic(const GoodBoxSpec& spec, const LocalFunctional& F,
                                         double u, long replicas,
                                         const std::function<double(double)>& theta,
                                         const GreenTable& green, uint64_t seed) {
  const int d = green.dim();
  if (spec.L < 2) throw error(errc::bad_argument, "good_box: box side L must be >= 2");
  if (spec.K < 2) throw error(errc::bad_argument, "good_box: separation K must be >= 2");
  if (!(spec.kappa > 0.0) || !(spec.kappa < 1.0))
    throw error(errc::bad_argument, "good_box: kappa must lie in (0,1)");
  if (!(spec.mu >= 0.0)) throw error(errc::bad_argument, "good_box: mu must be >= 0");
  if (spec.Sigma.empty()) throw error(errc::bad_argument, "good_box: Sigma must be non-empty");
  for (double a : spec.Sigma)
    if (!(a > 0.0) || !std::isfinite(a))
      throw error(errc::bad_argument, "good_box: Sigma levels must be finite and > 0");
  for (double a : spec.Sigma)
    for (double b : spec.Sigma)
      if (b != a && b > (1.0 - spec.kappa) * a && b < (1.0 + spec.kappa) * a)
        throw error(errc::bad_argument,
                    "good_box: spacing condition fails, Sigma meets ((1-kappa)a, (1+kappa)a) "
                    "beyond a itself");
  if (replicas < 1) throw error(errc::bad_argument, "good_box: need at least one replica");
  if (!(u > 0.0) || !std::isfinite(u))
    throw error(errc::bad_argument, "good_box: level u must be finite and > 0");
  const int R = F.range();
  if (R > (spec.K - 1) * spec.L - 1)
    throw error(errc::bad_argument, "good_box: functional range must keep B(.,R) inside U");
  int need = (spec.K + 1) * spec.L - 1;
  if (green.extent() < need)
    throw error(errc::bad_argument, "good_box: green table extent " +
                                        std::to_string(green.extent()) + " below required " +
                                        std::to_string(need));

  std::function<double(double)> th = theta;
  if (!th) {
    switch (F.kind) {
      case FunctionalKind::linear:
        th = [](double v) { return v; };
        break;
      case FunctionalKind::site_indicator: {
        double g00 = green.at(Site{});
        th = [g00](double v) { return -std::expm1(-v / g00); };
        break;
      }
      case FunctionalKind::ball_hit: {
        double cap = RestrictedGreen(SiteSet::from_box(sup_ball(d, Site{}, R)), green).cap();
        th = [cap](double v) { return -std::expm1(-v * cap); };
        break;
      }
      default:
        throw error(errc::bad_argument,
                    "good_box: no closed-form theta for this kind; pass a theta callable");
    }
  }

  Box bbox;
  bbox.d = d;
  for (int i = 0; i < d; ++i) {
    bbox.lo[static_cast<size_t>(i)] = 0;
    bbox.hi[static_cast<size_t>(i)] = spec.L;
  }
  SiteSet sB = SiteSet::from_box(bbox);
  RestrictedGreen rgB(sB, green);
  const double capB = rgB.cap();
  const std::vector<double>& e = rgB.equilibrium();
  std::vector<double> ebar(e.size());
  for (size_t i = 0; i < e.size(); ++i) ebar[i] = e[i] / capB;

  Box ubox;
  ubox.d = d;
  Box wbox;
  wbox.d = d;
  for (int i = 0; i < d; ++i) {
    ubox.lo[static_cast<size_t>(i)] = -spec.K * spec.L + 1;
    ubox.hi[static_cast<size_t>(i)] = spec.K * spec.L - 1;
    wbox.lo[static_cast<size_t>(i)] = -R;
    wbox.hi[static_cast<size_t>(i)] = spec.L + R;
  }
  std::vector<size_t> wstride(static_cast<size_t>(d));
  wstride[static_cast<size_t>(d) - 1] = 1;
  for (int i = d - 2; i >= 0; --i)
    wstride[static_cast<size_t>(i)] =
        wstride[static_cast<size_t>(i) + 1] *
        static_cast<size_t>(wbox.hi[static_cast<size_t>(i) + 1] - wbox.lo[static_cast<size_t>(i) + 1]);
  auto widx = [&](const Site& x) {
    size_t idx = 0;
    for (int i = 0; i < d; ++i)
      idx += static_cast<size_t>(x[static_cast<size_t>(i)] - wbox.lo[static_cast<size_t>(i)]) *
             wstride[static_cast<size_t>(i)];
    return idx;
  };
  std::vector<double> occ(static_cast<size_t>(wbox.volume()), 0.0);

  const size_t nA = spec.Sigma.size();
  std::vector<long> a_of(nA);
  std::vector<double> th_lo(nA), th_hi(nA);
  long a_max = 0;
  double alpha_max = 0.0;
  for (size_t i = 0; i < nA; ++i) {
    a_of[i] = static_cast<long>(std::floor(spec.Sigma[i] * capB));
    a_max = std::max(a_max, a_of[i]);
    alpha_max = std::max(alpha_max, spec.Sigma[i]);
    th_lo[i] = th((1.0 - spec.kappa) * spec.Sigma[i]);
    th_hi[i] = th((1.0 + spec.kappa) * spec.Sigma[i]);
  }
  // runaway guard: the stream runs to max(a_max, label u), each trajectory
  // bringing a geometric number of excursions, so budget both contributions
  const long cap_exc =
      1000 + 50 * static_cast<long>(std::ceil(alpha_max * capB + u * capB));

  auto snapshot = [&]() {
    detail::BoxStats s;
    for (size_t i = 0; i < sB.size(); ++i) {
      double t = occ[widx(sB[i])];
      s.eq += ebar[i] * t;
      s.m += t;
    }
    s.m /= static_cast<double>(sB.size());
    std::vector<double> block(detail::block_volume(d, R));
    for (size_t i = 0; i < sB.size(); ++i) {
      const Site& z = sB[i];
      size_t k = 0;
      sup_ball(d, z, R).for_each([&](const Site& y) { block[k++] = occ[widx(y)]; });
      double v = detail::eval_block(F, d, block);
      s.favg += v;
      bool inner = true;
      for (int j = 0; j < d; ++j) {
        int c = z[static_cast<size_t>(j)];
        if (c < R || c >= spec.L - R) { inner = false; break; }
      }
      if (inner) s.favg_in += v;
    }
    s.favg /= static_cast<double>(sB.size());
    s.favg_in /= static_cast<double>(sB.size());
    return s;
  };

  GoodBoxReport rep;
  rep.cap_B = capB;
  rep.replicas = replicas;
  rep.per_alpha.resize(nA);
  for (size_t i = 0; i < nA; ++i) {
    rep.per_alpha[i].alpha = spec.Sigma[i];
    rep.per_alpha[i].a = a_of[i];
  }
  std::vector<double> eqsum(nA, 0.0), eqsumsq(nA, 0.0);
  double nu_sum = 0.0, equ_sum = 0.0, equ_sq = 0.0;

  for (long repl = 0; repl < replicas; ++repl) {
    Rng r(seed, 1 + static_cast<uint64_t>(repl));
    std::fill(occ.begin(), occ.end(), 0.0);
    std::vector<detail::BoxStats> snapA(nA);
    std::vector<char> have(nA, 0);
    detail::BoxStats snapU;
    long Nu = -1;
    long ell = 0;
    double label = 0.0;
    for (size_t i = 0; i < nA; ++i)
      if (a_of[i] == 0) { snapA[i] = snapshot(); have[i] = 1; }

    bool done = false;
    while (!done && (ell < a_max || label <= u)) {
      label += r.exponential() / capB;
      if (Nu < 0 && label > u) {
        Nu = ell;
        snapU = snapshot();
        if (ell >= a_max) break;
      }
      Site pos = sB[static_cast<size_t>(detail::sample_index(e, capB, r))];
      bool alive = true;
      while (alive) {
        // one excursion: record holding times on B(., R) until U is left
        Site x = pos;
        uint64_t steps = 0;
        while (true) {
          if (wbox.contains(x)) occ[widx(x)] += r.exponential();
          detail::srw_step(x, d, r);
          if (!ubox.contains(x)) break;
          if (++steps >= 10000000ULL)
            throw error(errc::numeric, "good_box: excursion exceeded 10^7 steps");
        }
        ++ell;
        if (ell > cap_exc)
          throw error(errc::numeric, "good_box: excursion count guard reached");
        for (size_t i = 0; i < nA; ++i)
          if (!have[i] && a_of[i] == ell) { snapA[i] = snapshot(); have[i] = 1; }
        if (ell >= a_max && Nu >= 0) { done = true; break; }
        std::vector<double> w = rgB.hitting_from(x);
        double mass = 0.0;
        for (double v : w) mass += v;
        double pick = r.uniform();
        if (pick >= mass) {
          alive = false;  // the trajectory never returns to B
        } else {
          double acc = 0.0;
          size_t j = 0;
          for (; j + 1 < w.size(); ++j) {
            acc += w[j];
            if (pick < acc) break;
          }
          pos = sB[j];
        }
      }
    }

    nu_sum += static_cast<double>(Nu);
    equ_sum += snapU.eq;
    equ_sq += snapU.eq * snapU.eq;
    bool good = true;
    for (size_t i = 0; i < nA; ++i) {
      double lo = (1.0 - spec.kappa) * spec.Sigma[i];
      double hi = (1.0 + spec.kappa) * spec.Sigma[i];
      const detail::BoxStats& s = snapA[i];
      bool eq_out = !(s.eq > lo && s.eq < hi);
      bool m_out = !(s.m > lo && s.m < hi);
      bool f_out = !(s.favg > th_lo[i] - spec.mu && s.favg < th_hi[i] + spec.mu);
      if (eq_out || m_out || f_out) {
        ++rep.per_alpha[i].bad_count;
        good = false;
      }
      eqsum[i] += s.eq;
      eqsumsq[i] += s.eq * s.eq;
    }
    if (good) {
      ++rep.good_count;
      double t = static_cast<double>(Nu) / capB;
      for (size_t i = 0; i < nA; ++i) {
        double lo = (1.0 - spec.kappa) * spec.Sigma[i];
        double hi = (1.0 + spec.kappa) * spec.Sigma[i];
        if (t <= spec.Sigma[i]) {
          rep.per_alpha[i].sandwich_checks += 3;
          if (!(snapU.eq < hi)) ++rep.per_alpha[i].sandwich_violations;
          if (!(snapU.m < hi)) ++rep.per_alpha[i].sandwich_violations;
          if (!(snapU.favg_in < th_hi[i] + spec.mu)) ++rep.per_alpha[i].sandwich_violations;
        }
        if (t >= spec.Sigma[i]) {
          rep.per_alpha[i].sandwich_checks += 3;
          if (!(snapU.eq > lo)) ++rep.per_alpha[i].sandwich_violations;
          if (!(snapU.m > lo)) ++rep.per_alpha[i].sandwich_violations;
          if (!(snapU.favg > th_lo[i] - spec.mu)) ++rep.per_alpha[i].sandwich_violations;
        }
      }
    }
  }

  double n = static_cast<double>(replicas);
  rep.mean_excursions_u = nu_sum / n;
  rep.mean_eq_u = equ_sum / n;
  double vu = replicas > 1
                  ? std::max(0.0, (equ_sq - n * rep.mean_eq_u * rep.mean_eq_u) / (n - 1.0))
                  : 0.0;
  rep.se_eq_u = std::sqrt(vu / n);
  for (size_t i = 0; i < nA; ++i) {
    GoodBoxAlphaReport& a = rep.per_alpha[i];
    a.bad_frequency = static_cast<double>(a.bad_count) / n;
    a.mean_eq_pairing = eqsum[i] / n;
    double var = replicas > 1 ? std::max(0.0, (eqsumsq[i] - n * a.mean_eq_pairing * a.mean_eq_pairing) / (n - 1.0))
                              : 0.0;
    a.se_eq_pairing = std::sqrt(var / n);
  }
  return rep;
}

}  // namespace ri
