#pragma once

// Shared lattice plumbing: sites of Z^d (runtime d, compile-time cap),
// axis boxes, site sets with O(1) membership, and the error type every
// module throws through.

#include <array>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ri {

inline constexpr int kMaxDim = 6;

// A lattice site. Coordinates beyond the runtime dimension stay zero so
// hashing and comparison can ignore d.
using Site = std::array<int32_t, kMaxDim>;

inline Site make_site(std::initializer_list<int32_t> cs) {
  Site s{};
  int i = 0;
  for (int32_t c : cs) s[static_cast<size_t>(i++)] = c;
  return s;
}

inline Site origin() { return Site{}; }

struct SiteHash {
  size_t operator()(const Site& s) const noexcept {
    uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (int i = 0; i < kMaxDim; ++i) {
      h ^= static_cast<uint64_t>(static_cast<uint32_t>(s[static_cast<size_t>(i)]));
      h *= 0xbf58476d1ce4e5b9ULL;
      h ^= h >> 29;
    }
    return static_cast<size_t>(h);
  }
};

inline int sup_norm(const Site& s, int d) {
  int m = 0;
  for (int i = 0; i < d; ++i) {
    int a = s[static_cast<size_t>(i)] < 0 ? -s[static_cast<size_t>(i)] : s[static_cast<size_t>(i)];
    if (a > m) m = a;
  }
  return m;
}

inline Site sub(const Site& a, const Site& b) {
  Site r{};
  for (int i = 0; i < kMaxDim; ++i) r[static_cast<size_t>(i)] = a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)];
  return r;
}

inline Site add(const Site& a, const Site& b) {
  Site r{};
  for (int i = 0; i < kMaxDim; ++i) r[static_cast<size_t>(i)] = a[static_cast<size_t>(i)] + b[static_cast<size_t>(i)];
  return r;
}

// Half-open axis box [lo, hi).
struct Box {
  int d = 3;
  Site lo{};
  Site hi{};

  bool contains(const Site& x) const {
    for (int i = 0; i < d; ++i) {
      if (x[static_cast<size_t>(i)] < lo[static_cast<size_t>(i)] || x[static_cast<size_t>(i)] >= hi[static_cast<size_t>(i)]) return false;
    }
    return true;
  }
  int64_t volume() const {
    int64_t v = 1;
    for (int i = 0; i < d; ++i) v *= (hi[static_cast<size_t>(i)] - lo[static_cast<size_t>(i)]);
    return v;
  }
  // Enumerates sites in row-major (last coordinate fastest) order.
  template <class F>
  void for_each(F&& f) const {
    Site x = lo;
    if (volume() <= 0) return;
    while (true) {
      f(static_cast<const Site&>(x));
      int i = d - 1;
      while (i >= 0) {
        if (++x[static_cast<size_t>(i)] < hi[static_cast<size_t>(i)]) break;
        x[static_cast<size_t>(i)] = lo[static_cast<size_t>(i)];
        --i;
      }
      if (i < 0) break;
    }
  }
};

// Closed sup-norm ball B(c, r) as a box.
inline Box sup_ball(int d, const Site& c, int r) {
  Box b;
  b.d = d;
  for (int i = 0; i < d; ++i) {
    b.lo[static_cast<size_t>(i)] = c[static_cast<size_t>(i)] - r;
    b.hi[static_cast<size_t>(i)] = c[static_cast<size_t>(i)] + r + 1;
  }
  return b;
}

// Finite set of sites with stable ordering and O(1) membership lookup.
class SiteSet {
 public:
  SiteSet() = default;
  explicit SiteSet(int d) : d_(d) {}

  static SiteSet from_box(const Box& b) {
    SiteSet s(b.d);
    s.sites_.reserve(static_cast<size_t>(b.volume()));
    b.for_each([&](const Site& x) { s.push(x); });
    return s;
  }

  void push(const Site& x) {
    auto [it, inserted] = index_.emplace(x, static_cast<int>(sites_.size()));
    if (inserted) sites_.push_back(x);
  }
  bool contains(const Site& x) const { return index_.find(x) != index_.end(); }
  int index_of(const Site& x) const {
    auto it = index_.find(x);
    return it == index_.end() ? -1 : it->second;
  }
  size_t size() const { return sites_.size(); }
  bool empty() const { return sites_.empty(); }
  const Site& operator[](size_t i) const { return sites_[i]; }
  const std::vector<Site>& sites() const { return sites_; }
  int dim() const { return d_; }

  // Enlarge by the closed sup-norm ball of radius r.
  SiteSet enlarged(int r) const {
    if (r <= 0) return *this;
    SiteSet out(d_);
    Box nb = sup_ball(d_, origin(), r);
    for (const Site& x : sites_) nb.for_each([&](const Site& o) { out.push(add(x, o)); });
    return out;
  }

  // Sites of the set with at least one neighbor outside (internal boundary).
  std::vector<int> internal_boundary() const {
    std::vector<int> idx;
    for (size_t i = 0; i < sites_.size(); ++i) {
      Site x = sites_[i];
      bool bd = false;
      for (int k = 0; k < d_ && !bd; ++k) {
        for (int sgn = -1; sgn <= 1 && !bd; sgn += 2) {
          Site y = x;
          y[static_cast<size_t>(k)] += sgn;
          if (!contains(y)) bd = true;
        }
      }
      if (bd) idx.push_back(static_cast<int>(i));
    }
    return idx;
  }

  Box bounding_box() const {
    Box b;
    b.d = d_;
    if (sites_.empty()) return b;
    for (int i = 0; i < d_; ++i) {
      int32_t mn = sites_[0][static_cast<size_t>(i)], mx = mn;
      for (const Site& x : sites_) {
        mn = std::min(mn, x[static_cast<size_t>(i)]);
        mx = std::max(mx, x[static_cast<size_t>(i)]);
      }
      b.lo[static_cast<size_t>(i)] = mn;
      b.hi[static_cast<size_t>(i)] = mx + 1;
    }
    return b;
  }

 private:
  int d_ = 3;
  std::vector<Site> sites_;
  std::unordered_map<Site, int, SiteHash> index_;
};

enum class errc {
  bad_argument,     // misuse of an interface / malformed input
  out_of_range,     // table extent, size caps
  numeric,          // non-convergence, singular systems
  io,               // file format / cache problems
};

struct error : std::runtime_error {
  errc code;
  error(errc c, const std::string& what) : std::runtime_error(what), code(c) {}
};

}  // namespace ri
