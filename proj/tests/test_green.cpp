#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "ri/green.hpp"

using namespace ri;

// Reference values computed independently at high precision (Watson's closed
// form for the d=3 origin value, arbitrary-precision quadrature elsewhere).
namespace {
constexpr double kG3_000 = 1.5163860591519780;
constexpr double kG3_211 = 0.1917916506462824;
constexpr double kG3_532 = 0.0773149665627464;
constexpr double kG4_0 = 1.2394671218484817;
constexpr double kG4_2110 = 0.0334570989947361;
constexpr double kG5_0 = 1.1563081248402312;
constexpr double kG6_0 = 1.1169633732266718;

const GreenTable& table3() {
  static GreenTable t = build_green_table(3, 8, 1e-12);
  return t;
}
}  // namespace

TEST_CASE("d=3 origin value and first neighbor") {
  const GreenTable& t = table3();
  CHECK(std::fabs(t.g00() - kG3_000) < 1e-12);
  CHECK(std::fabs(t.at(make_site({1, 0, 0})) - (kG3_000 - 1.0)) < 1e-12);
  CHECK(std::fabs(t.at(make_site({2, 1, 1})) - kG3_211) < 1e-12);
  CHECK(std::fabs(t.at(make_site({5, 3, 2})) - kG3_532) < 1e-12);
}

TEST_CASE("harmonicity residual under 1e-10") {
  CHECK(table3().harmonicity_residual() < 1e-10);
}

TEST_CASE("symmetry under permutations and sign flips") {
  const GreenTable& t = table3();
  double v = t.at(make_site({2, 1, 1}));
  CHECK(t.at(make_site({1, 2, 1})) == v);
  CHECK(t.at(make_site({1, 1, 2})) == v);
  CHECK(t.at(make_site({-2, 1, -1})) == v);
  CHECK(t.at(make_site({1, -2, -1})) == v);
  // two-argument form is translation invariant
  CHECK(t.at(make_site({3, 0, 1}), make_site({1, -1, 0})) == v);
}

TEST_CASE("positive and strictly decreasing along a coordinate ray") {
  const GreenTable& t = table3();
  double prev = t.g00();
  for (int n = 1; n <= 8; ++n) {
    double v = t.at(make_site({n, 0, 0}));
    CHECK(v > 0.0);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("fourier representation cross-check") {
  const GreenTable& t = table3();
  for (Site x : {make_site({0, 0, 0}), make_site({1, 0, 0}), make_site({2, 1, 1}),
                 make_site({4, 2, 0})}) {
    double f = fourier_green(3, x, 1e-8);
    CHECK(std::fabs(f - t.at(x)) < 1e-6);
  }
}

TEST_CASE("higher dimensions match references") {
  GreenTable t4 = build_green_table(4, 4, 1e-12);
  CHECK(std::fabs(t4.g00() - kG4_0) < 1e-12);
  CHECK(std::fabs(t4.at(make_site({2, 1, 1, 0})) - kG4_2110) < 1e-12);
  CHECK(std::fabs(t4.at(make_site({1, 0, 0, 0})) - (kG4_0 - 1.0)) < 1e-12);
  CHECK(t4.harmonicity_residual() < 1e-10);
  CHECK(std::fabs(fourier_green(4, make_site({2, 1, 1, 0}), 1e-7) - kG4_2110) < 1e-6);

  GreenTable t5 = build_green_table(5, 2, 1e-12);
  CHECK(std::fabs(t5.g00() - kG5_0) < 1e-12);
  CHECK(t5.harmonicity_residual() < 1e-10);

  GreenTable t6 = build_green_table(6, 2, 1e-12);
  CHECK(std::fabs(t6.g00() - kG6_0) < 1e-12);
  CHECK(t6.harmonicity_residual() < 1e-10);
}

TEST_CASE("extent coverage and range errors") {
  const GreenTable& t = table3();
  CHECK(t.covers(make_site({8, 8, 8})));
  CHECK_FALSE(t.covers(make_site({9, 0, 0})));
  CHECK_THROWS_AS(t.at(make_site({9, 0, 0})), error);
  try {
    t.at(make_site({0, 0, 9}));
    FAIL("expected out_of_range");
  } catch (const error& e) {
    CHECK(e.code == errc::out_of_range);
  }
}

TEST_CASE("constructor rejects bad arguments") {
  CHECK_THROWS_AS(build_green_table(2, 4, 1e-10), error);
  CHECK_THROWS_AS(build_green_table(7, 4, 1e-10), error);
  CHECK_THROWS_AS(build_green_table(3, 0, 1e-10), error);
  CHECK_THROWS_AS(build_green_table(3, 4, -1.0), error);
}

TEST_CASE("cache roundtrip preserves every value") {
  std::string path = "green_cache_test.bin";
  const GreenTable& t = table3();
  save_green_table(t, path);
  GreenTable u = load_green_table(path);
  CHECK(u.dim() == 3);
  CHECK(u.extent() == 8);
  CHECK(u.g00() == t.g00());
  CHECK(u.at(make_site({5, 3, 2})) == t.at(make_site({5, 3, 2})));
  CHECK(u.harmonicity_residual() < 1e-10);
  std::remove(path.c_str());
}

TEST_CASE("cache rejects corruption") {
  std::string path = "green_cache_corrupt.bin";
  save_green_table(table3(), path);

  // flip one payload byte: CRC must catch it
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    char c;
    f.seekg(40);
    f.get(c);
    f.seekp(40);
    f.put(static_cast<char>(c ^ 0x01));
  }
  CHECK_THROWS_AS(load_green_table(path), error);

  // wrong magic
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write("NOPE", 4);
  }
  CHECK_THROWS_AS(load_green_table(path), error);

  CHECK_THROWS_AS(load_green_table("no_such_file.bin"), error);
  std::remove(path.c_str());
}
