#pragma once

// Shared generators and brute-force oracles for the test suites.

#include <cmath>
#include <numbers>
#include <random>

#include "asymseg/geometry.hpp"
#include "asymseg/mask.hpp"

namespace asymseg::test_support {

/// Random annotation fully inside a size x size grid. Axes cross at interior
/// points of both segments; `skew_deg` bounds the deviation from perpendicular.
inline AspectAnnotation random_annotation(std::mt19937_64& rng, int size, double skew_deg = 0.0) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (;;) {
    const double len_major = 6.0 + unit(rng) * (0.8 * size - 6.0);
    const double len_minor = 2.5 + unit(rng) * (len_major - 2.5);
    const double theta = unit(rng) * 2.0 * std::numbers::pi;
    const double skew = (2.0 * unit(rng) - 1.0) * skew_deg * std::numbers::pi / 180.0;
    const double t = 0.15 + 0.7 * unit(rng);
    const double s = 0.15 + 0.7 * unit(rng);
    const Point2 c{unit(rng) * size, unit(rng) * size};
    const Point2 u{std::cos(theta), std::sin(theta)};
    const Point2 v{std::cos(theta + std::numbers::pi / 2 + skew),
                   std::sin(theta + std::numbers::pi / 2 + skew)};
    AspectAnnotation ann{{c - t * len_major * u, c + (1 - t) * len_major * u},
                         {c - s * len_minor * v, c + (1 - s) * len_minor * v}};
    bool inside = true;
    for (Point2 p : ann.endpoints()) {
      inside &= p.x >= 0.0 && p.y >= 0.0 && p.x < size && p.y < size;
    }
    if (inside) return ann;
  }
}

inline BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double density) {
  std::bernoulli_distribution on(density);
  BinaryMask m(h, w);
  for (auto& b : m.bits()) b = on(rng) ? 1 : 0;
  return m;
}

/// Random blob-ish mask: union of a few random discs, possibly empty.
inline BinaryMask random_blobs(std::mt19937_64& rng, int h, int w, int max_blobs) {
  std::uniform_int_distribution<int> nb(0, max_blobs);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  BinaryMask m(h, w);
  const int k = nb(rng);
  for (int i = 0; i < k; ++i) {
    const double cy = unit(rng) * h, cx = unit(rng) * w, rad = 0.5 + unit(rng) * 0.3 * std::min(h, w);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        if (std::hypot(r + 0.5 - cy, c + 0.5 - cx) <= rad) m(r, c) = 1;
      }
    }
  }
  return m;
}

inline int chebyshev_to_set(const BinaryMask& m, int r0, int c0) {
  int best = 1 << 30;
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      if (m(r, c)) best = std::min(best, std::max(std::abs(r - r0), std::abs(c - c0)));
    }
  }
  return best;
}

}  // namespace asymseg::test_support
