#pragma once

// Green function g(0,x) of the continuous-time, rate-1 simple random walk
// on Z^d, d >= 3, tabulated over a sup-norm box of offsets.
//
// Primary route: the time integral
//   g(0,x) = int_0^inf prod_i e^{-t/d} I_{x_i}(t/d) dt,
// evaluated on shared quadrature nodes (one scaled-Bessel array per node
// serves every offset) with an analytic power-law tail.
//
// Independent cross-check: the Fourier representation
//   g(0,x) = (2 pi)^{-d} int_{[-pi,pi]^d} cos(k.x) / (1 - (1/d) sum_i cos k_i) dk,
// with one coordinate integrated out in closed form and the rest done by
// nested adaptive quadrature. No Bessel functions anywhere on that path.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "ri/common.hpp"
#include "ri/special.hpp"

namespace ri {

class GreenTable {
 public:
  GreenTable() = default;

  int dim() const { return d_; }
  int extent() const { return extent_; }
  double tol() const { return tol_; }
  const std::vector<double>& values() const { return val_; }
  uint32_t payload_crc() const { return crc32(val_.data(), val_.size() * sizeof(double)); }

  double g00() const { return val_.empty() ? 0.0 : val_[0]; }

  // g(0, delta); symmetry lets us fold the offset into the canonical octant.
  double at(const Site& delta) const {
    uint64_t key = canonical_key(delta);
    auto it = rank_.find(key);
    if (it == rank_.end()) {
      throw error(errc::out_of_range, "green table: offset beyond extent " + std::to_string(extent_));
    }
    return val_[static_cast<size_t>(it->second)];
  }
  double at(const Site& x, const Site& y) const { return at(sub(x, y)); }

  bool covers(const Site& delta) const { return sup_norm(delta, d_) <= extent_; }

  // Max over interior canonical offsets of |(1/2d) sum_nb g - g + 1{x=0}|.
  double harmonicity_residual() const {
    double worst = 0.0;
    for (size_t r = 0; r < off_.size(); ++r) {
      const Site& x = off_[r];
      if (sup_norm(x, d_) >= extent_) continue;
      double s = 0.0;
      for (int i = 0; i < d_; ++i) {
        Site y = x;
        y[static_cast<size_t>(i)] += 1;
        s += at(y);
        y[static_cast<size_t>(i)] -= 2;
        s += at(y);
      }
      double res = s / (2.0 * d_) - val_[r];
      bool is_origin = (sup_norm(x, d_) == 0);
      if (is_origin) res += 1.0;
      worst = std::max(worst, std::fabs(res));
    }
    return worst;
  }

  friend GreenTable build_green_table(int d, int extent, double tol);
  friend GreenTable load_green_table(const std::string& path);

 private:
  uint64_t canonical_key(const Site& delta) const {
    std::array<int, kMaxDim> a{};
    for (int i = 0; i < d_; ++i) {
      int v = delta[static_cast<size_t>(i)];
      a[static_cast<size_t>(i)] = v < 0 ? -v : v;
    }
    std::sort(a.begin(), a.begin() + d_, std::greater<int>());
    if (a[0] > extent_) {
      throw error(errc::out_of_range, "green table: offset beyond extent " + std::to_string(extent_));
    }
    uint64_t key = 0;
    for (int i = 0; i < d_; ++i) key = (key << 10) | static_cast<uint64_t>(a[static_cast<size_t>(i)]);
    return key;
  }

  int d_ = 0;
  int extent_ = 0;
  double tol_ = 0.0;
  std::vector<Site> off_;  // canonical offsets, non-increasing coordinates, row-major
  std::vector<double> val_;
  std::unordered_map<uint64_t, int> rank_;
};

namespace detail {

// Enumerate non-increasing nonnegative tuples up to `extent`, row-major.
inline void enumerate_octant(int d, int extent, std::vector<Site>& out) {
  Site x{};
  // Row-major over (x1, x2, ..., xd) with x1 outermost.
  std::function<void(int)> rec2 = [&](int pos) {
    int bound = pos == 0 ? extent : x[static_cast<size_t>(pos) - 1];
    if (pos == d) {
      out.push_back(x);
      return;
    }
    for (int v = 0; v <= bound; ++v) {
      x[static_cast<size_t>(pos)] = v;
      rec2(pos + 1);
    }
    x[static_cast<size_t>(pos)] = 0;
  };
  rec2(0);
}

// One pass of the shared-node time integral at a given panel density.
// lin_panels unit panels cover [0, t_lin]; per_decade log panels continue
// to t_max; the tail beyond t_max is the two-term asymptotic integral.
inline void time_integral_pass(int d, const std::vector<Site>& off, int nmax, int lin_panels,
                               int per_decade, std::vector<double>& acc) {
  const double t_lin = 20.0;
  const double t_max = 1e10;
  const GaussLegendre gl(16);
  acc.assign(off.size(), 0.0);
  std::vector<double> bess(static_cast<size_t>(nmax) + 1);

  auto add_panel = [&](double a, double b) {
    double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    for (size_t q = 0; q < gl.x.size(); ++q) {
      double t = mid + half * gl.x[q];
      double wt = half * gl.w[q];
      scaled_bessel_i(t / d, nmax, bess.data());
      for (size_t r = 0; r < off.size(); ++r) {
        double p = wt;
        for (int i = 0; i < d; ++i) p *= bess[static_cast<size_t>(off[r][static_cast<size_t>(i)])];
        acc[r] += p;
      }
    }
  };

  for (int j = 0; j < lin_panels; ++j) {
    add_panel(t_lin * j / lin_panels, t_lin * (j + 1) / lin_panels);
  }
  double decades = std::log10(t_max / t_lin);
  int nlog = static_cast<int>(std::ceil(decades * per_decade));
  for (int j = 0; j < nlog; ++j) {
    double a = t_lin * std::pow(10.0, decades * j / nlog);
    double b = t_lin * std::pow(10.0, decades * (j + 1) / nlog);
    add_panel(a, b);
  }

  // Tail: prod_i i_{x_i}(t/d) ~ (d/(2 pi t))^{d/2} (1 - (d/(8t)) sum_i (4 x_i^2 - 1)).
  const double pi = 3.14159265358979323846;
  double pref = std::pow(d / (2.0 * pi), 0.5 * d);
  double hd = 0.5 * d;
  for (size_t r = 0; r < off.size(); ++r) {
    double s1 = 0.0;
    for (int i = 0; i < d; ++i) {
      double xi = off[r][static_cast<size_t>(i)];
      s1 += 4.0 * xi * xi - 1.0;
    }
    double lead = std::pow(t_max, 1.0 - hd) / (hd - 1.0);
    double corr = -(d / 8.0) * s1 * std::pow(t_max, -hd) / hd;
    acc[r] += pref * (lead + corr);
  }
}

}  // namespace detail

inline GreenTable build_green_table(int d, int extent, double tol) {
  if (d < 3) throw error(errc::bad_argument, "green table requires d >= 3 (walk must be transient)");
  if (d > kMaxDim) throw error(errc::bad_argument, "green table: d exceeds compiled cap");
  if (extent < 1 || extent > 1000) throw error(errc::bad_argument, "green table: extent out of range");
  if (!(tol > 0.0)) throw error(errc::bad_argument, "green table: tol must be positive");

  GreenTable t;
  t.d_ = d;
  t.extent_ = extent;
  t.tol_ = tol;
  detail::enumerate_octant(d, extent, t.off_);
  t.rank_.reserve(t.off_.size() * 2);
  for (size_t r = 0; r < t.off_.size(); ++r) {
    uint64_t key = 0;
    for (int i = 0; i < d; ++i) key = (key << 10) | static_cast<uint64_t>(t.off_[r][static_cast<size_t>(i)]);
    t.rank_.emplace(key, static_cast<int>(r));
  }

  // Double panel density until successive passes agree within tol everywhere.
  std::vector<double> coarse, fine;
  int lin = 20, dec = 4;
  detail::time_integral_pass(d, t.off_, extent, lin, dec, coarse);
  bool ok = false;
  for (int round = 0; round < 3; ++round) {
    detail::time_integral_pass(d, t.off_, extent, lin * 2, dec * 2, fine);
    double worst = 0.0;
    size_t worst_r = 0;
    for (size_t r = 0; r < coarse.size(); ++r) {
      double diff = std::fabs(fine[r] - coarse[r]);
      if (diff > worst) {
        worst = diff;
        worst_r = r;
      }
    }
    if (worst <= tol) {
      ok = true;
      break;
    }
    coarse.swap(fine);
    lin *= 2;
    dec *= 2;
    if (round == 2) {
      const Site& w = t.off_[worst_r];
      throw error(errc::numeric, "green table quadrature did not converge at offset (" +
                                     std::to_string(w[0]) + "," + std::to_string(w[1]) + "," +
                                     std::to_string(w[2]) + "), diff " + std::to_string(worst));
    }
  }
  (void)ok;
  t.val_ = std::move(fine);
  return t;
}

// Fourier route. One coordinate (the largest |x_i|; the geometric factor
// rho^n then damps the integrand away from the origin) is integrated in
// closed form via
//   (1/2pi) int_{-pi}^{pi} cos(n q) / (a - b cos q) dq = rho^n / sqrt(a^2-b^2),
//   rho = (a - sqrt(a^2-b^2)) / b,  a > b > 0,
// leaving a (d-1)-fold integral handled by nested adaptive quadrature.
inline double fourier_green(int d, const Site& x_in, double tol) {
  if (d < 3 || d > kMaxDim) throw error(errc::bad_argument, "fourier_green: bad dimension");
  std::array<int, kMaxDim> x{};
  for (int i = 0; i < d; ++i) {
    int v = x_in[static_cast<size_t>(i)];
    x[static_cast<size_t>(i)] = v < 0 ? -v : v;
  }
  std::sort(x.begin(), x.begin() + d);  // ascending; reduce the last (largest)
  int n_red = x[static_cast<size_t>(d) - 1];
  int m = d - 1;  // remaining coordinates
  double b = 1.0 / d;

  std::array<double, kMaxDim> k{};
  std::function<double(int, double)> level = [&](int pos, double lvl_tol) -> double {
    if (pos == m) {
      // a - b = (2/d) sum_i sin^2(k_i/2) exactly (no cancellation near the
      // corner), and rho = (a - s)/b = b/(a + s) in its stable form.
      double amb = 0.0;
      for (int i = 0; i < m; ++i) {
        double sn = std::sin(0.5 * k[static_cast<size_t>(i)]);
        amb += sn * sn;
      }
      amb *= 2.0 / d;
      double apb = 2.0 / d + amb;
      double s2 = amb * apb;
      if (s2 <= 0.0) return 0.0;  // exact corner; quadrature nodes never land here
      double s = std::sqrt(s2);
      double a = amb + b;
      double rho = b / (a + s);
      double p = 1.0;
      for (int j = 0; j < n_red; ++j) p *= rho;
      double c = 1.0;
      for (int i = 0; i < m; ++i) c *= std::cos(k[static_cast<size_t>(i)] * x[static_cast<size_t>(i)]);
      return c * p / s;
    }
    return integrate_adaptive(
        [&](double q) {
          k[static_cast<size_t>(pos)] = q;
          return level(pos + 1, lvl_tol * 0.2);
        },
        0.0, 3.14159265358979323846, lvl_tol);
  };
  double pi = 3.14159265358979323846;
  double raw = level(0, tol * std::pow(pi, m) * 0.5);
  return raw / std::pow(pi, m);
}

// Binary cache: "GRNT" | u32 version | u32 d | u32 extent | f64 tol |
// f64 payload (row-major canonical octant) | u32 crc32(payload).
inline void save_green_table(const GreenTable& t, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw error(errc::io, "cannot open green cache for writing: " + path);
  auto put = [&](const void* p, size_t n) {
    if (std::fwrite(p, 1, n, f) != n) {
      std::fclose(f);
      throw error(errc::io, "short write on green cache: " + path);
    }
  };
  const uint32_t version = 1;
  uint32_t d32 = static_cast<uint32_t>(t.dim());
  uint32_t e32 = static_cast<uint32_t>(t.extent());
  double tol = t.tol();
  put("GRNT", 4);
  put(&version, 4);
  put(&d32, 4);
  put(&e32, 4);
  put(&tol, 8);
  put(t.values().data(), t.values().size() * sizeof(double));
  uint32_t crc = t.payload_crc();
  put(&crc, 4);
  std::fclose(f);
}

inline GreenTable load_green_table(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw error(errc::io, "cannot open green cache: " + path);
  auto get = [&](void* p, size_t n) {
    if (std::fread(p, 1, n, f) != n) {
      std::fclose(f);
      throw error(errc::io, "truncated green cache: " + path);
    }
  };
  char magic[4];
  get(magic, 4);
  if (std::memcmp(magic, "GRNT", 4) != 0) {
    std::fclose(f);
    throw error(errc::io, "not a green cache (bad magic): " + path);
  }
  uint32_t version, d32, e32;
  double tol;
  get(&version, 4);
  if (version != 1) {
    std::fclose(f);
    throw error(errc::io, "green cache version " + std::to_string(version) + " unsupported");
  }
  get(&d32, 4);
  get(&e32, 4);
  get(&tol, 8);
  GreenTable t;
  t.d_ = static_cast<int>(d32);
  t.extent_ = static_cast<int>(e32);
  t.tol_ = tol;
  if (t.d_ < 3 || t.d_ > kMaxDim || t.extent_ < 1 || t.extent_ > 1000) {
    std::fclose(f);
    throw error(errc::io, "green cache header out of range: " + path);
  }
  detail::enumerate_octant(t.d_, t.extent_, t.off_);
  t.val_.resize(t.off_.size());
  get(t.val_.data(), t.val_.size() * sizeof(double));
  uint32_t crc_stored;
  get(&crc_stored, 4);
  std::fclose(f);
  if (crc_stored != t.payload_crc()) {
    throw error(errc::io, "green cache payload CRC mismatch: " + path);
  }
  t.rank_.reserve(t.off_.size() * 2);
  for (size_t r = 0; r < t.off_.size(); ++r) {
    uint64_t key = 0;
    for (int i = 0; i < t.d_; ++i) key = (key << 10) | static_cast<uint64_t>(t.off_[r][static_cast<size_t>(i)]);
    t.rank_.emplace(key, static_cast<int>(r));
  }
  return t;
}

}  // namespace ri
