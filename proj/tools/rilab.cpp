// rilab: command-line front end. Subcommands are added as the library grows;
// see the verify suite for the acceptance checks.

#include <cstdio>

#include <CLI11.hpp>

#include "ri/green.hpp"

int main(int argc, char** argv) {
  CLI::App app{"random-interlacement laboratory"};
  app.require_subcommand(1);

  int d = 3, extent = 10;
  double tol = 1e-10;
  std::string cache;
  auto* green = app.add_subcommand("green", "build a Green function table");
  green->add_option("--d", d, "dimension (>= 3)");
  green->add_option("--extent", extent, "table half-width");
  green->add_option("--tol", tol, "quadrature tolerance");
  green->add_option("--cache", cache, "write the table to this file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (green->parsed()) {
      ri::GreenTable t = ri::build_green_table(d, extent, tol);
      std::printf("g(0,0) = %.15f\n", t.g00());
      std::printf("harmonicity = %.3e\n", t.harmonicity_residual());
      if (!cache.empty()) {
        ri::save_green_table(t, cache);
        std::printf("cache -> %s\n", cache.c_str());
      }
    }
  } catch (const ri::error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code == ri::errc::numeric ? 3 : 2;
  }
  return 0;
}
