#pragma once

// Brute-force reference implementations of the metrics. Quadratic on
// purpose; nothing here calls into the metrics header.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "asymseg/mask.hpp"

namespace asymseg::oracle {

struct Overlap {
  double dsc, jaccard, precision, recall;
};

inline Overlap overlap(const BinaryMask& a, const BinaryMask& b) {
  double na = 0, nb = 0, inter = 0, uni = 0;
  for (int r = 0; r < a.height(); ++r) {
    for (int c = 0; c < a.width(); ++c) {
      const bool x = a(r, c), y = b(r, c);
      na += x;
      nb += y;
      inter += x && y;
      uni += x || y;
    }
  }
  if (na == 0 && nb == 0) return {1, 1, 1, 1};
  if (na == 0 || nb == 0) return {0, 0, 0, 0};
  return {2 * inter / (na + nb), inter / uni, inter / na, inter / nb};
}

/// Nearest set pixel by exhaustive scan.
inline std::vector<double> distance_transform(const BinaryMask& m) {
  std::vector<double> out(std::size_t(m.height()) * m.width(), std::numeric_limits<double>::infinity());
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      long best = -1;
      for (int r2 = 0; r2 < m.height(); ++r2) {
        for (int c2 = 0; c2 < m.width(); ++c2) {
          if (!m(r2, c2)) continue;
          const long d = long(r - r2) * (r - r2) + long(c - c2) * (c - c2);
          if (best < 0 || d < best) best = d;
        }
      }
      if (best >= 0) out[std::size_t(r) * m.width() + c] = std::sqrt(double(best));
    }
  }
  return out;
}

inline std::vector<std::pair<int, int>> boundary_points(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  auto fg = [&](int r, int c) { return r >= 0 && c >= 0 && r < m.height() && c < m.width() && m(r, c); };
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      if (m(r, c) && (!fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1))) out.push_back({r, c});
    }
  }
  return out;
}

inline double min_distance(std::pair<int, int> p, const std::vector<std::pair<int, int>>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (auto q : set) {
    const long dr = p.first - q.first, dc = p.second - q.second;
    best = std::min(best, std::sqrt(double(dr * dr + dc * dc)));
  }
  return best;
}

// Same estimator as the library: order statistic at rank 0.95 (n - 1) with
// linear interpolation between neighbours.
inline double percentile95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double rank = 0.95 * double(v.size() - 1);
  const std::size_t below = std::size_t(rank);
  if (below + 1 >= v.size()) return v.back();
  return v[below] + (rank - double(below)) * (v[below + 1] - v[below]);
}

struct Surface {
  double asd, hd95;
};

inline Surface surface(const BinaryMask& pred, const BinaryMask& gt) {
  const auto a = boundary_points(pred), b = boundary_points(gt);
  if (a.empty() && b.empty()) return {0, 0};
  if (a.empty() || b.empty()) {
    const double diag = std::hypot(double(pred.height()), double(pred.width()));
    return {diag, diag};
  }
  std::vector<double> all;
  double sum = 0;
  for (auto p : a) {
    const double d = min_distance(p, b);
    sum += d;
    all.push_back(d);
  }
  for (auto q : b) all.push_back(min_distance(q, a));
  return {sum / double(a.size()), percentile95(all)};
}

}  // namespace asymseg::oracle
