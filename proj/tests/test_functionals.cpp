#include <algorithm>
#include <bit>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "ri/functionals.hpp"

using namespace ri;

namespace {

const double kG00 = 1.5163860591519780;
const double kZ = 1.959963984540054;

const GreenTable& tab() {
  static GreenTable t = build_green_table(3, 14, 1e-12);
  return t;
}

Site site(int x, int y, int z) { return Site{x, y, z}; }

// Field on the closed sup ball B(0,rad) with the given sites occupied.
OccupationField shell_field(int rad, const std::vector<Site>& occupied, double t = 1.0) {
  OccupationField f;
  f.window = SiteSet::from_box(sup_ball(3, Site{}, rad));
  f.visits.assign(f.window.size(), 0);
  f.time.assign(f.window.size(), 0.0);
  for (const Site& x : occupied) {
    int i = f.window.index_of(x);
    REQUIRE(i >= 0);
    f.visits[static_cast<size_t>(i)] = 1;
    f.time[static_cast<size_t>(i)] = t;
  }
  return f;
}

std::vector<Site> sup_sphere(int rad) {
  std::vector<Site> out;
  sup_ball(3, Site{}, rad).for_each([&](const Site& x) {
    if (sup_norm(x, 3) == rad) out.push_back(x);
  });
  return out;
}

std::vector<Site> full_ball(int rad) {
  std::vector<Site> out;
  sup_ball(3, Site{}, rad).for_each([&](const Site& x) { out.push_back(x); });
  return out;
}

// Random field pair on B(0,2) with f2 = f1 + nonnegative increments.
std::pair<OccupationField, OccupationField> random_pair(Rng& r, double p_occ, double p_inc) {
  OccupationField f1 = shell_field(2, {});
  OccupationField f2 = shell_field(2, {});
  for (size_t i = 0; i < f1.window.size(); ++i) {
    if (r.uniform() < p_occ) {
      f1.time[i] = r.exponential();
      f1.visits[i] = 1;
    }
    f2.time[i] = f1.time[i];
    f2.visits[i] = f1.visits[i];
    if (r.uniform() < p_inc) {
      f2.time[i] += r.exponential();
      f2.visits[i] += 1;
    }
  }
  return {f1, f2};
}

double theta_site(double u) { return -std::expm1(-u / kG00); }

// Exact theta for disconnect(0,1): the origin is cut from S(0,1) iff it is
// occupied or all six lattice neighbors are, and the pattern probabilities
// reduce to capacities through P[A in vacant set] = e^{-u cap(A)}.
double disconnect01_oracle(double u) {
  std::vector<Site> nb = {site(1, 0, 0), site(-1, 0, 0), site(0, 1, 0),
                          site(0, -1, 0), site(0, 0, 1), site(0, 0, -1)};
  double origin_occ = -std::expm1(-u / kG00);
  double origin_vac_ring_occ = 0.0;
  for (unsigned mask = 0; mask < 64; ++mask) {
    SiteSet a(3);
    a.push(Site{});
    for (int b = 0; b < 6; ++b)
      if (mask & (1u << b)) a.push(nb[static_cast<size_t>(b)]);
    double cap = RestrictedGreen(a, tab()).cap();
    double sign = (std::popcount(mask) % 2 == 0) ? 1.0 : -1.0;
    origin_vac_ring_occ += sign * std::exp(-u * cap);
  }
  return origin_occ + origin_vac_ring_occ;
}

}  // namespace

TEST_CASE("functional factories validate their arguments") {
  CHECK_THROWS_AS(lf_ball_hit(-1), error);
  CHECK_THROWS_AS(lf_disconnect(2, 2), error);
  CHECK_THROWS_AS(lf_disconnect(-1, 3), error);
  CHECK_THROWS_AS(lf_disconnect(3, 1), error);
  auto sum_rule = [](const std::vector<double>& b) {
    double s = 0.0;
    for (double v : b) s += v;
    return s;
  };
  CHECK_THROWS_AS(lf_custom(-1, 1.0, true, 1.0, sum_rule), error);
  CHECK_THROWS_AS(lf_custom(1, 0.0, true, 1.0, sum_rule), error);
  CHECK_THROWS_AS(lf_custom(1, 1.0, true, 0.0, sum_rule), error);
  CHECK_THROWS_AS(lf_custom(1, 1.0, true, 1.0, nullptr), error);

  for (FunctionalKind k : {FunctionalKind::linear, FunctionalKind::site_indicator,
                           FunctionalKind::ball_hit, FunctionalKind::disconnect,
                           FunctionalKind::custom})
    CHECK(functional_kind_from(to_string(k)) == k);
  CHECK_THROWS_AS(functional_kind_from("bogus"), error);
}

TEST_CASE("evaluate reproduces the hand-checkable configurations") {
  OccupationField zero = shell_field(2, {});
  auto sum_rule = [](const std::vector<double>& b) {
    double s = 0.0;
    for (double v : b) s += v;
    return s;
  };
  LocalFunctional cus = lf_custom(1, 1.0, true, 125.0, sum_rule);

  // F(0) = 0 for every kind (the all vacant ball is connected to its shell)
  CHECK(evaluate(lf_linear(), zero, Site{}) == 0.0);
  CHECK(evaluate(lf_site_indicator(), zero, Site{}) == 0.0);
  CHECK(evaluate(lf_ball_hit(1), zero, Site{}) == 0.0);
  CHECK(evaluate(lf_ball_hit(2), zero, Site{}) == 0.0);
  CHECK(evaluate(lf_disconnect(0, 2), zero, Site{}) == 0.0);
  CHECK(evaluate(lf_disconnect(1, 2), zero, Site{}) == 0.0);
  CHECK(evaluate(cus, zero, Site{}) == 0.0);

  // occupation and indicator read the center site
  OccupationField one = shell_field(2, {site(1, 1, 0)}, 2.5);
  CHECK(evaluate(lf_linear(), one, site(1, 1, 0)) == 2.5);
  CHECK(evaluate(lf_linear(), one, Site{}) == 0.0);
  CHECK(evaluate(lf_site_indicator(), one, site(1, 1, 0)) == 1.0);
  CHECK(evaluate(lf_site_indicator(), one, Site{}) == 0.0);

  // ball hit sees occupation anywhere in B(0,R)
  OccupationField corner = shell_field(2, {site(2, 2, 2)});
  CHECK(evaluate(lf_ball_hit(2), corner, Site{}) == 1.0);
  CHECK(evaluate(lf_ball_hit(1), corner, Site{}) == 0.0);

  // fully occupied ball: no vacant path at all
  OccupationField full = shell_field(2, full_ball(2));
  CHECK(evaluate(lf_disconnect(0, 2), full, Site{}) == 1.0);
  CHECK(evaluate(lf_disconnect(1, 2), full, Site{}) == 1.0);

  // occupied shell S(0,1) around a vacant center cuts it from S(0,2);
  // with the shell vacant the straight ray connects
  OccupationField ring = shell_field(2, sup_sphere(1));
  CHECK(evaluate(lf_disconnect(0, 2), ring, Site{}) == 1.0);
  CHECK(evaluate(lf_disconnect(0, 1), ring, Site{}) == 1.0);
  CHECK(evaluate(lf_disconnect(0, 2), zero, Site{}) == 0.0);

  // an occupied outer sphere blocks every path endpoint
  OccupationField rim = shell_field(2, sup_sphere(2));
  CHECK(evaluate(lf_disconnect(0, 2), rim, Site{}) == 1.0);
  CHECK(evaluate(lf_disconnect(1, 2), rim, Site{}) == 1.0);

  // the custom rule sees the block values
  CHECK(evaluate(cus, one, site(1, 1, 0)) == 2.5);
  CHECK(evaluate(cus, one, Site{}) == 2.5);  // (1,1,0) lies in B(0,1)

  // the local window must fit inside the field window
  CHECK_THROWS_AS(evaluate(lf_disconnect(0, 2), ring, site(1, 0, 0)), error);
  CHECK_THROWS_AS(evaluate(lf_ball_hit(1), ring, site(2, 2, 2)), error);
}

TEST_CASE("disconnection is monotone in the annulus radii") {
  // source growth can only help the connection: F_r >= F_r' for r <= r'
  OccupationField center_only = shell_field(2, {Site{}});
  CHECK(evaluate(lf_disconnect(0, 2), center_only, Site{}) == 1.0);
  CHECK(evaluate(lf_disconnect(1, 2), center_only, Site{}) == 0.0);

  Rng r(401, 0);
  for (int trial = 0; trial < 300; ++trial) {
    OccupationField f = shell_field(2, {});
    for (size_t i = 0; i < f.window.size(); ++i)
      if (r.uniform() < 0.45) {
        f.time[i] = 1.0;
        f.visits[i] = 1;
      }
    double d01 = evaluate(lf_disconnect(0, 1), f, Site{});
    double d02 = evaluate(lf_disconnect(0, 2), f, Site{});
    double d12 = evaluate(lf_disconnect(1, 2), f, Site{});
    CHECK(d02 >= d12);  // r grows, disconnection can only fail
    CHECK(d02 >= d01);  // R grows, disconnection can only appear
  }
}

TEST_CASE("evaluate is monotone and sub-linear on coupled field pairs") {
  auto sum_rule = [](const std::vector<double>& b) {
    double s = 0.0;
    for (double v : b) s += v;
    return s;
  };
  std::vector<LocalFunctional> kinds = {
      lf_linear(),         lf_site_indicator(),          lf_ball_hit(1),
      lf_disconnect(0, 2), lf_disconnect(1, 2),          lf_custom(1, 7.0, true, 1e9, sum_rule)};
  Rng r(402, 0);
  for (int trial = 0; trial < 200; ++trial) {
    auto [f1, f2] = random_pair(r, 0.4, 0.3);
    double extra = 0.0;  // increment mass over the largest range block B(0,2)
    for (size_t i = 0; i < f1.window.size(); ++i) extra += f2.time[i] - f1.time[i];
    for (const LocalFunctional& F : kinds) {
      double v1 = evaluate(F, f1, Site{});
      double v2 = evaluate(F, f2, Site{});
      CHECK(v2 >= v1 - 1e-12);
      CHECK(v2 <= v1 + F.c_f * (1.0 + extra) + 1e-9);
    }
  }
}

TEST_CASE("theta closed forms come from the green and capacity oracles") {
  CHECK(theta_closed_form(lf_site_indicator(), 1.0, tab()) ==
        Catch::Approx(theta_site(1.0)).epsilon(1e-12));
  CHECK(theta_closed_form(lf_site_indicator(), 0.0, tab()) == 0.0);

  // a radius zero ball is the single site
  for (double u : {0.5, 1.7})
    CHECK(theta_closed_form(lf_ball_hit(0), u, tab()) ==
          Catch::Approx(theta_closed_form(lf_site_indicator(), u, tab())).epsilon(1e-14));

  // small u slope is the capacity
  double cap1 = RestrictedGreen(SiteSet::from_box(sup_ball(3, Site{}, 1)), tab()).cap();
  CHECK(theta_closed_form(lf_ball_hit(1), 1e-6, tab()) / 1e-6 ==
        Catch::Approx(cap1).epsilon(1e-5));

  CHECK_THROWS_WITH(theta_closed_form(lf_linear(), 1.0, tab()),
                    Catch::Matchers::ContainsSubstring("estimate_theta"));
  CHECK_THROWS_WITH(theta_closed_form(lf_disconnect(0, 1), 1.0, tab()),
                    Catch::Matchers::ContainsSubstring("estimate_theta"));
  CHECK_THROWS_AS(theta_closed_form(lf_site_indicator(), -1.0, tab()), error);
}

TEST_CASE("estimate_theta validates input and yields exactly monotone curves") {
  CHECK_THROWS_AS(estimate_theta(lf_site_indicator(), {}, 200, tab(), 403), error);
  CHECK_THROWS_AS(estimate_theta(lf_site_indicator(), {0.5, 0.5}, 200, tab(), 403), error);
  CHECK_THROWS_AS(estimate_theta(lf_site_indicator(), {-0.5, 1.0}, 200, tab(), 403), error);
  CHECK_THROWS_AS(estimate_theta(lf_site_indicator(), {0.5, 1.0}, 99, tab(), 403), error);

  ThetaCurve c = estimate_theta(lf_site_indicator(), {0.0, 0.3, 0.6, 1.0, 1.5}, 400, tab(), 404);
  CHECK(c.values[0] == 0.0);  // empty soup at u = 0, not a small number
  for (size_t i = 1; i < c.values.size(); ++i) CHECK(c.values[i] >= c.values[i - 1]);
  for (size_t i = 1; i < c.values.size(); ++i) CHECK(c.ci_halfwidth[i] > 0.0);
  validate_theta_curve(c);

  ThetaCurve again = estimate_theta(lf_site_indicator(), {0.0, 0.3, 0.6, 1.0, 1.5}, 400, tab(), 404);
  CHECK(again.values == c.values);
  ThetaCurve other = estimate_theta(lf_site_indicator(), {0.0, 0.3, 0.6, 1.0, 1.5}, 400, tab(), 405);
  CHECK(other.values != c.values);

  // shared soup keeps even the disconnection curve monotone sample by sample
  ThetaCurve dc = estimate_theta(lf_disconnect(0, 1), {0.5, 1.0, 2.0}, 200, tab(), 406);
  for (size_t i = 1; i < dc.values.size(); ++i) CHECK(dc.values[i] >= dc.values[i - 1]);

  // isotonic projection is a no-op on an already monotone curve
  ThetaCurve iso = estimate_theta(lf_site_indicator(), {0.0, 0.3, 0.6, 1.0, 1.5}, 400, tab(), 404, true);
  CHECK(iso.isotonic);
  CHECK(iso.values == c.values);
}

TEST_CASE("estimate_theta agrees with the closed forms") {
  ThetaCurve c = estimate_theta(lf_site_indicator(), {0.5, 1.0}, 4000, tab(), 407);
  for (size_t i = 0; i < c.u_grid.size(); ++i) {
    double se = c.ci_halfwidth[i] / kZ;
    CHECK(std::fabs(c.values[i] - theta_site(c.u_grid[i])) <= 3.0 * se);
  }
  ThetaCurve b = estimate_theta(lf_ball_hit(1), {0.8}, 1500, tab(), 408);
  double closed = theta_closed_form(lf_ball_hit(1), 0.8, tab());
  CHECK(std::fabs(b.values[0] - closed) <= 3.0 * (b.ci_halfwidth[0] / kZ));
}

TEST_CASE("disconnect(0,1) theta matches the inclusion-exclusion oracle") {
  // the oracle dominates the site indicator and stays below one
  for (double u : {0.7, 1.4}) {
    double v = disconnect01_oracle(u);
    CHECK(v > theta_site(u));
    CHECK(v < 1.0);
  }
  ThetaCurve c = estimate_theta(lf_disconnect(0, 1), {0.7, 1.4}, 4000, tab(), 409);
  for (size_t i = 0; i < c.u_grid.size(); ++i) {
    double se = c.ci_halfwidth[i] / kZ;
    CHECK(std::fabs(c.values[i] - disconnect01_oracle(c.u_grid[i])) <= 3.0 * se);
  }
}

TEST_CASE("theta curves round trip through csv and reject malformed input") {
  ThetaCurve c = estimate_theta(lf_disconnect(0, 1), {0.0, 0.5, 1.0}, 200, tab(), 410);
  std::stringstream ss;
  write_theta_csv(c, ss);
  ThetaCurve back = read_theta_csv(ss);
  CHECK(back.u_grid == c.u_grid);
  CHECK(back.values == c.values);
  CHECK(back.ci_halfwidth == c.ci_halfwidth);
  CHECK(back.kind == c.kind);
  CHECK(back.r == c.r);
  CHECK(back.R == c.R);
  CHECK(back.seed == c.seed);
  CHECK(back.n_samples == c.n_samples);
  CHECK(back.theta_inf == 1.0);

  auto reject = [](const std::string& text) {
    std::stringstream in(text);
    CHECK_THROWS_AS(read_theta_csv(in), error);
  };
  reject("u,theta\n0,0\n");
  reject("u,theta,ci_halfwidth,n_samples,kind,r,R,seed\n");
  reject("u,theta,ci_halfwidth,n_samples,kind,r,R,seed\n0,0,0,100,site_indicator,0\n");
  reject("u,theta,ci_halfwidth,n_samples,kind,r,R,seed\n0,zero,0,100,site_indicator,0,0,1\n");
  reject("u,theta,ci_halfwidth,n_samples,kind,r,R,seed\n0,0,0,100,bogus_kind,0,0,1\n");
  reject(
      "u,theta,ci_halfwidth,n_samples,kind,r,R,seed\n"
      "0,0,0,100,site_indicator,0,0,1\n"
      "1,0.4,0,200,site_indicator,0,0,1\n");  // provenance drifts
  reject(
      "u,theta,ci_halfwidth,n_samples,kind,r,R,seed\n"
      "1,0.4,0,100,site_indicator,0,0,1\n"
      "0.5,0.2,0,100,site_indicator,0,0,1\n");  // levels out of order

  ThetaCurve bad = c;
  bad.values[0] = 0.5;  // nonzero at u = 0
  CHECK_THROWS_AS(validate_theta_curve(bad), error);
  bad = c;
  bad.values.pop_back();
  CHECK_THROWS_AS(validate_theta_curve(bad), error);
  bad = c;
  bad.values[1] = 0.9;
  bad.values[2] = 0.2;  // drops far beyond the half-widths
  CHECK_THROWS_AS(validate_theta_curve(bad), error);
}

TEST_CASE("ergodic averages recover the closed per-site means") {
  Shape cube{Shape::cube, 0.125};

  // an empty soup averages to zero exactly
  CHECK(ergodic_average(lf_site_indicator(), 0.0, 8, cube, tab(), 411) == 0.0);

  // F_0 has theta(u) = u
  double sum = 0.0, sumsq = 0.0;
  const int seeds = 8;
  for (int s = 0; s < seeds; ++s) {
    double v = ergodic_average(lf_linear(), 0.7, 16, cube, tab(), 4110 + static_cast<uint64_t>(s));
    sum += v;
    sumsq += v * v;
  }
  double mean = sum / seeds;
  double sd = std::sqrt(std::max(0.0, (sumsq - seeds * mean * mean) / (seeds - 1.0)));
  CHECK(std::fabs(mean - 0.7) <= 3.0 * sd / std::sqrt(static_cast<double>(seeds)));

  // resource guards: window volume cap and the green table extent
  CHECK_THROWS_WITH(ergodic_average(lf_site_indicator(), 1.0, 1000, cube, tab(), 412),
                    Catch::Matchers::ContainsSubstring("memory budget"));
  Shape wide{Shape::cube, 1.0};
  CHECK_THROWS_WITH(ergodic_average(lf_site_indicator(), 1.0, 8, wide, tab(), 412),
                    Catch::Matchers::ContainsSubstring("extent"));

  // a Euclidean ball shape keeps only the sites inside the radius
  SiteSet ball = shape_sites(Shape{Shape::ball, 0.125}, 16, 3);
  CHECK(ball.size() < shape_sites(cube, 16, 3).size());
  CHECK(ball.contains(site(2, 0, 0)));
  CHECK(!ball.contains(site(2, 1, 1)));  // |x| > 2 after scaling
}

TEST_CASE("ergodic average deviations shrink as the window grows") {
  Shape cube{Shape::cube, 0.125};
  double th = theta_site(1.0);
  const int seeds = 12;
  double v16 = 0.0, v32 = 0.0;
  for (int s = 0; s < seeds; ++s) {
    double d16 = ergodic_average(lf_site_indicator(), 1.0, 16, cube, tab(), 4130 + static_cast<uint64_t>(s)) - th;
    double d32 = ergodic_average(lf_site_indicator(), 1.0, 32, cube, tab(), 4160 + static_cast<uint64_t>(s)) - th;
    v16 += d16 * d16;
    v32 += d32 * d32;
  }
  CHECK(v16 / seeds > v32 / seeds);
}

TEST_CASE("good box diagnostic validates its parameters") {
  GoodBoxSpec s;
  s.Sigma = {1.0};
  s.kappa = 0.3;
  s.mu = 0.1;
  s.L = 2;
  s.K = 2;
  LocalFunctional F = lf_site_indicator();

  GoodBoxSpec bad = s;
  bad.Sigma = {1.0, 1.2};  // 1.2 lies in (0.7, 1.3)
  CHECK_THROWS_WITH(good_box_diagnostic(bad, F, 1.0, 4, {}, tab(), 414),
                    Catch::Matchers::ContainsSubstring("spacing"));
  bad = s;
  bad.K = 1;
  CHECK_THROWS_AS(good_box_diagnostic(bad, F, 1.0, 4, {}, tab(), 414), error);
  bad = s;
  bad.kappa = 1.0;
  CHECK_THROWS_AS(good_box_diagnostic(bad, F, 1.0, 4, {}, tab(), 414), error);
  bad = s;
  bad.Sigma = {};
  CHECK_THROWS_AS(good_box_diagnostic(bad, F, 1.0, 4, {}, tab(), 414), error);
  bad = s;
  bad.Sigma = {-0.5};
  CHECK_THROWS_AS(good_box_diagnostic(bad, F, 1.0, 4, {}, tab(), 414), error);
  CHECK_THROWS_AS(good_box_diagnostic(s, F, 0.0, 4, {}, tab(), 414), error);
  CHECK_THROWS_AS(good_box_diagnostic(s, F, 1.0, 0, {}, tab(), 414), error);

  // the functional range must keep B(., R) inside U
  CHECK_THROWS_WITH(good_box_diagnostic(s, lf_ball_hit(2), 1.0, 4, {}, tab(), 414),
                    Catch::Matchers::ContainsSubstring("inside U"));

  // the table must reach from the far side of U into B
  GoodBoxSpec big = s;
  big.L = 4;
  big.K = 16;
  CHECK_THROWS_WITH(good_box_diagnostic(big, F, 1.0, 4, {}, tab(), 414),
                    Catch::Matchers::ContainsSubstring("below required"));

  // no closed-form theta for disconnection without a supplied curve
  CHECK_THROWS_WITH(good_box_diagnostic(s, lf_disconnect(0, 1), 1.0, 4, {}, tab(), 414),
                    Catch::Matchers::ContainsSubstring("theta callable"));
}

TEST_CASE("good box zero truncation is trivially bad and runs are reproducible") {
  GoodBoxSpec s;
  s.Sigma = {0.1};
  s.kappa = 0.3;
  s.mu = 0.5;
  s.L = 2;
  s.K = 2;
  GoodBoxReport r = good_box_diagnostic(s, lf_site_indicator(), 0.5, 6, {}, tab(), 415);
  REQUIRE(r.per_alpha.size() == 1);
  CHECK(r.per_alpha[0].a == 0);  // 0.1 cap(B) < 1 keeps no excursion
  CHECK(r.per_alpha[0].bad_frequency == 1.0);
  CHECK(r.good_count == 0);
  CHECK(r.per_alpha[0].mean_eq_pairing == 0.0);

  GoodBoxSpec t;
  t.Sigma = {0.6};
  t.kappa = 0.3;
  t.mu = 0.5;
  t.L = 2;
  t.K = 2;
  GoodBoxReport a = good_box_diagnostic(t, lf_site_indicator(), 0.8, 40, {}, tab(), 416);
  GoodBoxReport b = good_box_diagnostic(t, lf_site_indicator(), 0.8, 40, {}, tab(), 416);
  CHECK(a.per_alpha[0].mean_eq_pairing == b.per_alpha[0].mean_eq_pairing);
  CHECK(a.mean_excursions_u == b.mean_excursions_u);
  CHECK(a.per_alpha[0].bad_count == b.per_alpha[0].bad_count);
  GoodBoxReport c = good_box_diagnostic(t, lf_site_indicator(), 0.8, 40, {}, tab(), 417);
  CHECK(a.per_alpha[0].mean_eq_pairing != c.per_alpha[0].mean_eq_pairing);
}

namespace {
const GreenTable& bigtab() {
  static GreenTable t = build_green_table(3, 67, 1e-12);
  return t;
}
double cap_of_cube(int L, const GreenTable& g) {
  Box b;
  b.d = 3;
  for (int k = 0; k < 3; ++k) {
    b.lo[static_cast<size_t>(k)] = 0;
    b.hi[static_cast<size_t>(k)] = L;
  }
  return RestrictedGreen(SiteSet::from_box(b), g).cap();
}
}  // namespace

TEST_CASE("good box pairing mean tracks alpha and the sandwich holds") {
  // wide separation makes later excursion entries nearly equilibrium, so
  // each of the a = floor(alpha cap(B)) excursions pairs to mean about
  // 1/cap(B); the level-u field is excursion complete, so <e_bar, L^u>
  // has mean u exactly
  double capB = cap_of_cube(4, bigtab());

  GoodBoxSpec s;
  s.Sigma = {4.02 / capB};  // four excursions, alpha just past a/cap(B)
  s.kappa = 0.35;
  s.mu = 0.25;
  s.L = 4;
  s.K = 16;
  GoodBoxReport r = good_box_diagnostic(s, lf_site_indicator(), 1.0, 250, {}, bigtab(), 500);
  REQUIRE(r.per_alpha.size() == 1);
  const GoodBoxAlphaReport& a = r.per_alpha[0];
  CHECK(a.a == 4);
  CHECK(r.cap_B == Catch::Approx(capB).epsilon(1e-12));
  CHECK(std::fabs(r.mean_eq_u - 1.0) <= 3.0 * r.se_eq_u);
  // truncating at the U exit drops the later returns, a bias below
  // cap(B) g(dist(B, dU)) of order 4 percent here
  CHECK(std::fabs(a.mean_eq_pairing - s.Sigma[0]) <= 3.0 * a.se_eq_pairing + 0.05 * s.Sigma[0]);
  CHECK(r.good_count >= 50);
  CHECK(a.sandwich_checks > 0);
  CHECK(a.sandwich_violations == 0);
  CHECK(r.mean_excursions_u > 0.0);
}

TEST_CASE("good box bands nest: widening kappa or mu cannot add bad boxes") {
  double capB = cap_of_cube(4, bigtab());
  GoodBoxSpec s;
  s.Sigma = {12.5 / capB};
  s.mu = 0.15;
  s.L = 4;
  s.K = 4;
  long prev = -1;
  for (double kap : {0.2, 0.35, 0.5}) {
    s.kappa = kap;
    GoodBoxReport r = good_box_diagnostic(s, lf_site_indicator(), 1.0, 200, {}, bigtab(), 420);
    if (prev >= 0) CHECK(r.per_alpha[0].bad_count <= prev);
    prev = r.per_alpha[0].bad_count;
  }
  s.kappa = 0.35;
  prev = -1;
  for (double mu : {0.02, 0.15, 0.4}) {
    s.mu = mu;
    GoodBoxReport r = good_box_diagnostic(s, lf_site_indicator(), 1.0, 200, {}, bigtab(), 420);
    if (prev >= 0) CHECK(r.per_alpha[0].bad_count <= prev);
    prev = r.per_alpha[0].bad_count;
  }
}

TEST_CASE("good box bad frequency falls as the box grows at fixed alpha") {
  // alpha tuned so alpha cap(B_L) sits just above an integer for each L,
  // keeping the truncation floor aligned across the sweep
  GoodBoxSpec s;
  s.Sigma = {0.972};
  s.kappa = 0.35;
  s.mu = 0.15;
  s.K = 4;
  std::vector<double> freq;
  std::vector<long> want_a = {3, 7, 15};
  std::vector<int> Ls = {3, 6, 12};
  for (size_t i = 0; i < Ls.size(); ++i) {
    s.L = Ls[i];
    GoodBoxReport r = good_box_diagnostic(s, lf_site_indicator(), 1.0, 400, {}, bigtab(), 419);
    REQUIRE(r.per_alpha.size() == 1);
    CHECK(r.per_alpha[0].a == want_a[i]);
    CHECK(r.per_alpha[0].sandwich_violations == 0);
    CHECK(std::fabs(r.mean_eq_u - 1.0) <= 4.0 * r.se_eq_u);
    freq.push_back(r.per_alpha[0].bad_frequency);
  }
  CHECK(freq[0] > freq[1] + 0.05);
  CHECK(freq[1] > freq[2] + 0.05);
}
