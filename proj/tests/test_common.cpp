#include <catch2/catch_amalgamated.hpp>

#include "ri/common.hpp"

using namespace ri;

TEST_CASE("site arithmetic and sup norm") {
  Site a = make_site({3, -2, 5});
  Site b = make_site({1, 1, 1});
  CHECK(sub(a, b) == make_site({2, -3, 4}));
  CHECK(add(a, b) == make_site({4, -1, 6}));
  CHECK(sup_norm(a, 3) == 5);
  CHECK(sup_norm(make_site({0, 0, 0}), 3) == 0);
  // coordinates beyond d are ignored
  CHECK(sup_norm(make_site({1, 0, 0, 9}), 3) == 1);
}

TEST_CASE("box volume, membership, enumeration order") {
  Box b;
  b.d = 3;
  b.lo = make_site({0, 0, 0});
  b.hi = make_site({2, 3, 2});
  CHECK(b.volume() == 12);
  CHECK(b.contains(make_site({1, 2, 1})));
  CHECK_FALSE(b.contains(make_site({2, 0, 0})));
  CHECK_FALSE(b.contains(make_site({0, -1, 0})));

  std::vector<Site> seen;
  b.for_each([&](const Site& x) { seen.push_back(x); });
  REQUIRE(seen.size() == 12);
  CHECK(seen.front() == make_site({0, 0, 0}));
  CHECK(seen[1] == make_site({0, 0, 1}));  // last coordinate fastest
  CHECK(seen.back() == make_site({1, 2, 1}));

  Box empty;
  empty.d = 3;
  empty.lo = make_site({0, 0, 0});
  empty.hi = make_site({0, 5, 5});
  int n = 0;
  empty.for_each([&](const Site&) { ++n; });
  CHECK(n == 0);
}

TEST_CASE("sup ball extents") {
  Box b = sup_ball(3, make_site({1, 0, -2}), 2);
  CHECK(b.volume() == 125);
  CHECK(b.contains(make_site({3, 2, 0})));
  CHECK_FALSE(b.contains(make_site({4, 0, -2})));
  CHECK(sup_ball(4, origin(), 1).volume() == 81);
}

TEST_CASE("site set indexing and membership") {
  Box b = sup_ball(3, origin(), 1);
  SiteSet s = SiteSet::from_box(b);
  REQUIRE(s.size() == 27);
  for (size_t i = 0; i < s.size(); ++i) CHECK(s.index_of(s[i]) == static_cast<int>(i));
  CHECK(s.contains(origin()));
  CHECK(s.index_of(make_site({2, 0, 0})) == -1);
  s.push(origin());  // duplicate push is a no-op
  CHECK(s.size() == 27);
}

TEST_CASE("enlargement matches brute force") {
  SiteSet s(3);
  s.push(origin());
  s.push(make_site({3, 0, 0}));
  SiteSet e = s.enlarged(1);
  // two 3^3 cubes, disjoint
  CHECK(e.size() == 54);
  for (size_t i = 0; i < e.size(); ++i) {
    bool near = sup_norm(e[i], 3) <= 1 || sup_norm(sub(e[i], make_site({3, 0, 0})), 3) <= 1;
    CHECK(near);
  }
  // overlapping case dedupes
  SiteSet t(3);
  t.push(origin());
  t.push(make_site({1, 0, 0}));
  CHECK(t.enlarged(1).size() == 36);
}

TEST_CASE("internal boundary of a cube") {
  Box b;
  b.d = 3;
  b.lo = make_site({0, 0, 0});
  b.hi = make_site({4, 4, 4});
  SiteSet s = SiteSet::from_box(b);
  auto bd = s.internal_boundary();
  CHECK(bd.size() == 64 - 8);  // all but the 2^3 interior sites
  for (int i : bd) {
    const Site& x = s[static_cast<size_t>(i)];
    bool face = false;
    for (int k = 0; k < 3; ++k)
      if (x[static_cast<size_t>(k)] == 0 || x[static_cast<size_t>(k)] == 3) face = true;
    CHECK(face);
  }
}

TEST_CASE("bounding box") {
  SiteSet s(3);
  s.push(make_site({-1, 2, 0}));
  s.push(make_site({4, -3, 1}));
  Box b = s.bounding_box();
  CHECK(b.lo == make_site({-1, -3, 0}));
  CHECK(b.hi == make_site({5, 3, 2}));
  CHECK(b.contains(make_site({0, 0, 0})));
}

TEST_CASE("error carries its code") {
  try {
    throw error(errc::out_of_range, "beyond extent");
  } catch (const error& e) {
    CHECK(e.code == errc::out_of_range);
    CHECK(std::string(e.what()) == "beyond extent");
  }
}
