#pragma once

// Aspect-ratio annotations and the geometric pseudo-labels derived from them.
//
// Coordinates are continuous pixel units with the origin at the top-left
// corner of the image: x runs along columns, y along rows, and pixel (r, c)
// covers [c, c+1) x [r, r+1) with its center at (c + 0.5, r + 0.5). A shape
// rasterizes to every pixel whose center lies inside it or on its boundary.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asymseg/error.hpp"
#include "asymseg/mask.hpp"

namespace asymseg {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
  friend bool operator==(const Point2&, const Point2&) = default;
};

inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 a) { return std::hypot(a.x, a.y); }
inline Point2 perp(Point2 a) { return {-a.y, a.x}; }

struct Segment {
  Point2 a;
  Point2 b;

  double length() const { return norm(b - a); }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Clinical aspect-ratio annotation: the length axis and the width axis.
struct AspectAnnotation {
  Segment major;
  Segment minor;

  std::array<Point2, 4> endpoints() const { return {major.a, major.b, minor.a, minor.b}; }
  friend bool operator==(const AspectAnnotation&, const AspectAnnotation&) = default;
};

enum class ShapeKind { Quadrilateral, Concavity, Box, RotatedRect, Circle, IrregularEllipse };

inline constexpr std::array<ShapeKind, 6> kAllShapeKinds = {
    ShapeKind::Quadrilateral, ShapeKind::Concavity,   ShapeKind::Box,
    ShapeKind::RotatedRect,   ShapeKind::Circle,      ShapeKind::IrregularEllipse};

/// Conservative shapes under-segment the lesion; the rest over-segment it.
constexpr bool is_conservative(ShapeKind k) {
  return k == ShapeKind::Quadrilateral || k == ShapeKind::Concavity;
}

inline std::string_view name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Quadrilateral: return "quadrilateral";
    case ShapeKind::Concavity: return "concavity";
    case ShapeKind::Box: return "box";
    case ShapeKind::RotatedRect: return "rotrect";
    case ShapeKind::Circle: return "circle";
    case ShapeKind::IrregularEllipse: return "ellipse";
  }
  return "?";
}

inline std::optional<ShapeKind> parse_shape_kind(std::string_view s) {
  for (ShapeKind k : kAllShapeKinds) {
    if (name(k) == s) return k;
  }
  return std::nullopt;
}

struct ValidationLimits {
  double max_angle_deviation_deg = 15.0;
  double intersection_tolerance_px = 0.5;
  double min_axis_length_px = 2.0;
};

namespace detail {

// Parameter of the intersection along `s` (0 at s.a, 1 at s.b) of the lines
// through `s` and `t`; nullopt for parallel lines.
inline std::optional<std::pair<double, double>> line_params(const Segment& s, const Segment& t) {
  const Point2 d1 = s.b - s.a;
  const Point2 d2 = t.b - t.a;
  const double den = cross(d1, d2);
  if (std::abs(den) <= 1e-12 * norm(d1) * norm(d2)) return std::nullopt;
  const Point2 w = t.a - s.a;
  return std::pair{cross(w, d2) / den, cross(w, d1) / den};
}

inline double overshoot(double param, double length) {
  return std::max({0.0, -param, param - 1.0}) * length;
}

}  // namespace detail

/// Intersection of the two (infinite) axis lines.
inline Point2 axes_intersection(const AspectAnnotation& ann) {
  auto p = detail::line_params(ann.major, ann.minor);
  if (!p) throw Error(ErrorCode::NonIntersecting, "annotation axes are parallel");
  return ann.major.a + p->first * (ann.major.b - ann.major.a);
}

/// Acute angle between the axis lines in degrees, in [0, 90].
inline double axes_angle_deg(const AspectAnnotation& ann) {
  const Point2 d1 = ann.major.b - ann.major.a;
  const Point2 d2 = ann.minor.b - ann.minor.a;
  const double c = std::abs(dot(d1, d2)) / (norm(d1) * norm(d2));
  return std::acos(std::clamp(c, 0.0, 1.0)) * 180.0 / std::numbers::pi;
}

/// Checks the annotation invariants and returns it with the longer axis as
/// `major`.
inline AspectAnnotation validate_annotation(AspectAnnotation ann, const ValidationLimits& lim = {}) {
  for (Point2 p : ann.endpoints()) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      throw Error(ErrorCode::Degenerate, "annotation endpoint is not finite");
    }
  }
  if (ann.major.length() < ann.minor.length()) std::swap(ann.major, ann.minor);
  if (ann.minor.length() < lim.min_axis_length_px) {
    throw Error(ErrorCode::Degenerate,
                "axis shorter than " + std::to_string(lim.min_axis_length_px) + " px");
  }
  const double angle = axes_angle_deg(ann);
  if (90.0 - angle > lim.max_angle_deviation_deg) {
    throw Error(ErrorCode::AngleOutOfRange,
                "axes cross at " + std::to_string(angle) + " degrees");
  }
  auto p = detail::line_params(ann.major, ann.minor);
  if (!p || detail::overshoot(p->first, ann.major.length()) > lim.intersection_tolerance_px ||
      detail::overshoot(p->second, ann.minor.length()) > lim.intersection_tolerance_px) {
    throw Error(ErrorCode::NonIntersecting, "annotation axes do not cross");
  }
  return ann;
}

/// Rigid rotation of both axes about their intersection point. `direction`
/// is +1 or -1; positive angles rotate from +x towards +y.
inline AspectAnnotation perturb_annotation(const AspectAnnotation& ann, double degrees,
                                           int direction, const ValidationLimits& lim = {}) {
  if (direction != 1 && direction != -1) {
    throw Error(ErrorCode::ConfigError, "perturbation direction must be +1 or -1");
  }
  if (degrees == 0.0) return validate_annotation(ann, lim);
  const Point2 c = axes_intersection(ann);
  const double th = direction * degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th);
  const double sn = std::sin(th);
  auto rot = [&](Point2 p) {
    const Point2 d = p - c;
    return Point2{c.x + cs * d.x - sn * d.y, c.y + sn * d.x + cs * d.y};
  };
  AspectAnnotation out{{rot(ann.major.a), rot(ann.major.b)}, {rot(ann.minor.a), rot(ann.minor.b)}};
  try {
    return validate_annotation(out, lim);
  } catch (const Error& e) {
    throw Error(ErrorCode::AngleOutOfRange, std::string("perturbed annotation invalid: ") + e.what());
  }
}

struct Circle {
  Point2 center;
  double radius = 0.0;
};

/// Smallest circle containing every point, by exhaustive enumeration of the
/// two-point and three-point candidate circles.
inline Circle min_enclosing_circle(std::span<const Point2> pts) {
  if (pts.empty()) throw Error(ErrorCode::EmptyInput, "min_enclosing_circle of no points");
  auto covers = [&](const Circle& c) {
    const double tol = 1e-9 * std::max(1.0, c.radius);
    return std::all_of(pts.begin(), pts.end(),
                       [&](Point2 p) { return norm(p - c.center) <= c.radius + tol; });
  };
  std::optional<Circle> best;
  auto consider = [&](const Circle& c) {
    if ((!best || c.radius < best->radius) && covers(c)) best = c;
  };
  const std::size_t n = pts.size();
  if (n == 1) return {pts[0], 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      consider({0.5 * (pts[i] + pts[j]), 0.5 * norm(pts[j] - pts[i])});
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      for (std::size_t k = j + 1; k < n; ++k) {
        const Point2 a = pts[i], b = pts[j] - a, c = pts[k] - a;
        const double d = 2.0 * cross(b, c);
        if (std::abs(d) < 1e-12) continue;
        const double bb = dot(b, b), cc = dot(c, c);
        const Point2 u{(c.y * bb - b.y * cc) / d, (b.x * cc - c.x * bb) / d};
        consider({a + u, norm(u)});
      }
    }
  }
  // All points coincide.
  if (!best) return {pts[0], 0.0};
  return *best;
}

namespace detail {

inline constexpr double kEdgeEps = 1e-9;
inline constexpr int kArcSamples = 32;

inline int floor_px(double v) { return static_cast<int>(std::floor(v)); }

// Marks pixels whose centers lie within kEdgeEps of the horizontal line y on
// the closed x-interval [x0, x1].
inline void fill_span(BinaryMask& m, int r, double x0, double x1) {
  int c0 = static_cast<int>(std::ceil(x0 - kEdgeEps - 0.5));
  int c1 = static_cast<int>(std::floor(x1 + kEdgeEps - 0.5));
  c0 = std::max(c0, 0);
  c1 = std::min(c1, m.width() - 1);
  for (int c = c0; c <= c1; ++c) m(r, c) = 1;
}

/// Even-odd scanline fill of a closed polygon; centers on an edge count as
/// inside.
inline void fill_polygon(std::span<const Point2> poly, BinaryMask& m) {
  const std::size_t n = poly.size();
  if (n < 3) return;
  std::vector<double> xs;
  for (int r = 0; r < m.height(); ++r) {
    const double y = r + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point2 p = poly[i];
      const Point2 q = poly[(i + 1) % n];
      const double ylo = std::min(p.y, q.y);
      const double yhi = std::max(p.y, q.y);
      if (std::abs(q.y - p.y) <= kEdgeEps) {
        if (std::abs(y - p.y) <= kEdgeEps) fill_span(m, r, std::min(p.x, q.x), std::max(p.x, q.x));
        continue;
      }
      if (y < ylo - kEdgeEps || y > yhi + kEdgeEps) continue;
      const double x = p.x + (std::clamp(y, ylo, yhi) - p.y) * (q.x - p.x) / (q.y - p.y);
      if (y >= ylo && y < yhi) xs.push_back(x);
      // Boundary pixels: a center lying on the edge itself.
      fill_span(m, r, x, x);
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2) fill_span(m, r, xs[i], xs[i + 1]);
  }
}

inline bool outside_grid(Point2 p, GridSize g) {
  return p.x < 0.0 || p.y < 0.0 || p.x > g.width || p.y > g.height;
}

// Endpoints sorted by angle about the axes' intersection point.
inline std::array<Point2, 4> angular_order(const AspectAnnotation& ann, Point2 c) {
  auto pts = ann.endpoints();
  std::sort(pts.begin(), pts.end(), [&](Point2 a, Point2 b) {
    return std::atan2(a.y - c.y, a.x - c.x) < std::atan2(b.y - c.y, b.x - c.x);
  });
  return pts;
}

// Closed curve made of one quarter-arc per adjacent endpoint pair. `bulge`
// selects the outward arc c + cos t (a - c) + sin t (b - c); otherwise the
// inward arc, its point reflection through the chord midpoint.
inline std::vector<Point2> arc_polygon(const std::array<Point2, 4>& ordered, Point2 c, bool bulge) {
  std::vector<Point2> poly;
  poly.reserve(4 * kArcSamples);
  for (std::size_t i = 0; i < 4; ++i) {
    const Point2 a = ordered[i];
    const Point2 b = ordered[(i + 1) % 4];
    poly.push_back(a);
    for (int j = 1; j < kArcSamples; ++j) {
      const double t = 0.5 * std::numbers::pi * j / kArcSamples;
      const double ca = bulge ? std::cos(t) : 1.0 - std::sin(t);
      const double cb = bulge ? std::sin(t) : 1.0 - std::cos(t);
      poly.push_back(c + ca * (a - c) + cb * (b - c));
    }
  }
  return poly;
}

}  // namespace detail

struct PseudoLabel {
  BinaryMask mask;
  /// Some boundary point of the shape fell outside the grid; the mask is
  /// clipped.
  bool out_of_bounds = false;
};

/// Rasterizes the `kind` pseudo-label of a validated annotation. Every mask
/// also contains the pixels holding the four annotated endpoints.
inline PseudoLabel generate_pseudo_label_checked(const AspectAnnotation& ann, ShapeKind kind,
                                                 GridSize grid) {
  PseudoLabel out{BinaryMask(grid), false};
  BinaryMask& m = out.mask;
  const Point2 c = axes_intersection(ann);
  const auto ends = ann.endpoints();
  auto flag = [&](Point2 p) { out.out_of_bounds |= detail::outside_grid(p, grid); };
  for (Point2 p : ends) flag(p);

  switch (kind) {
    case ShapeKind::Quadrilateral: {
      const auto poly = detail::angular_order(ann, c);
      detail::fill_polygon(poly, m);
      break;
    }
    case ShapeKind::IrregularEllipse:
    case ShapeKind::Concavity: {
      const auto poly = detail::arc_polygon(detail::angular_order(ann, c), c,
                                            kind == ShapeKind::IrregularEllipse);
      for (Point2 p : poly) flag(p);
      detail::fill_polygon(poly, m);
      break;
    }
    case ShapeKind::Box: {
      // Bounding box of the rasterized annotation pixels.
      int r0 = grid.height, r1 = -1, c0 = grid.width, c1 = -1;
      for (Point2 p : ends) {
        r0 = std::min(r0, detail::floor_px(p.y));
        r1 = std::max(r1, detail::floor_px(p.y));
        c0 = std::min(c0, detail::floor_px(p.x));
        c1 = std::max(c1, detail::floor_px(p.x));
      }
      for (int r = std::max(r0, 0); r <= std::min(r1, grid.height - 1); ++r) {
        for (int col = std::max(c0, 0); col <= std::min(c1, grid.width - 1); ++col) m(r, col) = 1;
      }
      break;
    }
    case ShapeKind::RotatedRect: {
      const Point2 u = (1.0 / ann.major.length()) * (ann.major.b - ann.major.a);
      const Point2 v = perp(u);
      double u0 = 0, u1 = 0, v0 = 0, v1 = 0;
      for (Point2 p : ends) {
        u0 = std::min(u0, dot(p - c, u));
        u1 = std::max(u1, dot(p - c, u));
        v0 = std::min(v0, dot(p - c, v));
        v1 = std::max(v1, dot(p - c, v));
      }
      for (double a : {u0, u1}) {
        for (double b : {v0, v1}) flag(c + a * u + b * v);
      }
      const double e = detail::kEdgeEps;
      for (int r = 0; r < grid.height; ++r) {
        for (int col = 0; col < grid.width; ++col) {
          const Point2 d = Point2{col + 0.5, r + 0.5} - c;
          const double pu = dot(d, u), pv = dot(d, v);
          if (pu >= u0 - e && pu <= u1 + e && pv >= v0 - e && pv <= v1 + e) m(r, col) = 1;
        }
      }
      break;
    }
    case ShapeKind::Circle: {
      const Circle circ = min_enclosing_circle(ends);
      flag(circ.center - Point2{circ.radius, circ.radius});
      flag(circ.center + Point2{circ.radius, circ.radius});
      const double lim = circ.radius * circ.radius * (1.0 + detail::kEdgeEps) + detail::kEdgeEps;
      for (int r = 0; r < grid.height; ++r) {
        for (int col = 0; col < grid.width; ++col) {
          const Point2 d = Point2{col + 0.5, r + 0.5} - circ.center;
          if (dot(d, d) <= lim) m(r, col) = 1;
        }
      }
      break;
    }
  }
  for (Point2 p : ends) m.set_clipped(detail::floor_px(p.y), detail::floor_px(p.x));
  return out;
}

inline BinaryMask generate_pseudo_label(const AspectAnnotation& ann, ShapeKind kind, GridSize grid) {
  return generate_pseudo_label_checked(ann, kind, grid).mask;
}

/// Integer line walk (Bresenham) between the pixels holding `a` and `b`.
inline void draw_line(BinaryMask& m, Point2 a, Point2 b) {
  int x0 = detail::floor_px(a.x), y0 = detail::floor_px(a.y);
  const int x1 = detail::floor_px(b.x), y1 = detail::floor_px(b.y);
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    m.set_clipped(y0, x0);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) { err += dy; x0 += sx; }
    if (e2 <= dx) { err += dx; y0 += sy; }
  }
}

/// 1-px union of both annotation axes, clipped to the grid.
inline BinaryMask rasterize_cross(const AspectAnnotation& ann, GridSize grid) {
  BinaryMask m(grid);
  draw_line(m, ann.major.a, ann.major.b);
  draw_line(m, ann.minor.a, ann.minor.b);
  return m;
}

/// Foreground pixels 4-adjacent to background or to the image border.
inline std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      if (!m(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r == m.height() - 1 || c == m.width() - 1 ||
                        !m(r - 1, c) || !m(r + 1, c) || !m(r, c - 1) || !m(r, c + 1);
      if (edge) out.emplace_back(r, c);
    }
  }
  return out;
}

namespace detail {

inline bool segment_inside(const BinaryMask& m, Point2 a, Point2 b) {
  const int steps = std::max(1, static_cast<int>(std::ceil(norm(b - a) / 0.25)));
  for (int i = 0; i <= steps; ++i) {
    const Point2 p = a + (static_cast<double>(i) / steps) * (b - a);
    const int r = floor_px(p.y), c = floor_px(p.x);
    if (!m.in_bounds(r, c) || !m(r, c)) return false;
  }
  return true;
}

// Walks from `p` along unit direction `d` through consecutive mask pixels and
// returns the point just before the ray leaves the last one. `p` is returned
// unchanged if its own pixel is not set.
inline Point2 edge_point(const BinaryMask& m, Point2 p, Point2 d) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  int r = floor_px(p.y), c = floor_px(p.x);
  if (!m.in_bounds(r, c) || !m(r, c)) return p;
  for (int guard = 0; guard < m.height() + m.width() + 2; ++guard) {
    const double tx = d.x > 0 ? (c + 1 - p.x) / d.x : d.x < 0 ? (c - p.x) / d.x : inf;
    const double ty = d.y > 0 ? (r + 1 - p.y) / d.y : d.y < 0 ? (r - p.y) / d.y : inf;
    const double t = std::min(tx, ty);
    const Point2 beyond = p + (t + 1e-7) * d;
    const int nr = floor_px(beyond.y), nc = floor_px(beyond.x);
    if (!m.in_bounds(nr, nc) || !m(nr, nc)) return p + std::max(0.0, t - 1e-7) * d;
    p = beyond;
    r = nr;
    c = nc;
  }
  return p;
}

}  // namespace detail

/// Measurement rule for deriving an annotation from a ground-truth mask.
struct AxisSearch {
  /// Angular tolerance for a width chord to count as perpendicular.
  double perpendicular_tolerance_deg = 1.0;
  /// Lateral slack along the length axis absorbing pixel-lattice quantization.
  double lattice_slack_px = 0.75;
  /// Chords within this much of the longest are treated as ties; the length
  /// axis then prefers the chord hugging the mask's principal axis and the
  /// width axis the chord crossing nearest the length axis midpoint.
  double near_max_slack_px = 1.0;
  /// Move each endpoint outward along its axis to the edge of the mask's
  /// pixel squares (caliper on the lesion border) instead of the boundary
  /// pixel's center.
  bool extend_to_edge = true;
};

/// Clinical measurement on a mask: the length axis is the longest in-mask
/// chord between boundary pixels; the width axis is the longest in-mask
/// boundary chord perpendicular to it and crossing it. The width axis is
/// snapped to exact perpendicularity; endpoints are then pushed out to the
/// mask edge unless `extend_to_edge` is off.
inline AspectAnnotation annotation_from_mask(const BinaryMask& gt, const AxisSearch& opt = {}) {
  if (gt.empty() || gt.count() == 0) throw Error(ErrorCode::EmptyMask, "ground-truth mask is empty");
  const auto bnd = boundary_pixels(gt);
  std::vector<Point2> pts;
  pts.reserve(bnd.size());
  for (auto [r, c] : bnd) pts.push_back({c + 0.5, r + 0.5});
  const std::size_t n = pts.size();

  struct Pair {
    double len2;
    std::uint32_t i, j;
  };
  auto by_length = [](const Pair& a, const Pair& b) {
    if (a.len2 != b.len2) return a.len2 > b.len2;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  };

  std::vector<Pair> pairs;
  pairs.reserve(n * (n - 1) / 2);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = i + 1; j < n; ++j) {
      const Point2 d = pts[j] - pts[i];
      pairs.push_back({dot(d, d), i, j});
    }
  }
  std::sort(pairs.begin(), pairs.end(), by_length);
  // Principal axis of the mask (centroid plus dominant second-moment direction).
  Point2 centroid{0, 0};
  double sxx = 0, syy = 0, sxy = 0, cnt = 0;
  for (int r = 0; r < gt.height(); ++r) {
    for (int c = 0; c < gt.width(); ++c) {
      if (!gt(r, c)) continue;
      centroid = centroid + Point2{c + 0.5, r + 0.5};
      cnt += 1;
    }
  }
  centroid = (1.0 / cnt) * centroid;
  for (int r = 0; r < gt.height(); ++r) {
    for (int c = 0; c < gt.width(); ++c) {
      if (!gt(r, c)) continue;
      const Point2 d = Point2{c + 0.5, r + 0.5} - centroid;
      sxx += d.x * d.x;
      syy += d.y * d.y;
      sxy += d.x * d.y;
    }
  }
  const double phi = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
  const Point2 principal{std::cos(phi), std::sin(phi)};
  auto deviation = [&](Point2 p) { return std::abs(cross(principal, p - centroid)); };

  std::optional<Segment> major;
  double longest = 0.0, best_dev = 0.0;
  for (const Pair& p : pairs) {
    const double len = std::sqrt(p.len2);
    if (len < 2.0 || (major && len < longest - opt.near_max_slack_px)) break;
    if (!detail::segment_inside(gt, pts[p.i], pts[p.j])) continue;
    const double dev = std::max(deviation(pts[p.i]), deviation(pts[p.j]));
    if (!major) longest = len;
    if (!major || dev < best_dev - 1e-9) {
      major = Segment{pts[p.i], pts[p.j]};
      best_dev = dev;
    }
  }
  if (!major) throw Error(ErrorCode::TooThin, "no in-mask chord of length >= 2");

  const double len = major->length();
  const Point2 u = (1.0 / len) * (major->b - major->a);
  const Point2 v = perp(u);
  std::vector<double> along(n), across(n);
  for (std::size_t i = 0; i < n; ++i) {
    along[i] = dot(pts[i] - major->a, u);
    across[i] = dot(pts[i] - major->a, v);
  }
  const double tan_tol = std::tan(opt.perpendicular_tolerance_deg * std::numbers::pi / 180.0);
  pairs.clear();
  for (std::uint32_t i = 0; i < n; ++i) {
    if (across[i] >= 0.0) continue;
    for (std::uint32_t j = 0; j < n; ++j) {
      if (across[j] <= 0.0) continue;
      const double extent = across[j] - across[i];
      if (std::abs(along[j] - along[i]) > std::max(tan_tol * extent, opt.lattice_slack_px)) continue;
      const double t = along[i] + (along[j] - along[i]) * (-across[i]) / extent;
      if (t < 0.0 || t > len) continue;
      pairs.push_back({extent * extent, i, j});
    }
  }
  std::sort(pairs.begin(), pairs.end(), by_length);
  std::optional<AspectAnnotation> best;
  double widest = 0.0, best_shift = 0.0;
  for (const Pair& p : pairs) {
    const double extent = std::sqrt(p.len2);
    if (extent < 2.0 || (best && extent < widest - opt.near_max_slack_px)) break;
    if (!detail::segment_inside(gt, pts[p.i], pts[p.j])) continue;
    const double t = along[p.i] + (along[p.j] - along[p.i]) * (-across[p.i]) / extent;
    const double shift = std::abs(t - 0.5 * len);
    if (!best) widest = extent;
    if (!best || shift < best_shift - 1e-12) {
      const Point2 foot = major->a + t * u;
      best = AspectAnnotation{*major, {foot + across[p.i] * v, foot + across[p.j] * v}};
      best_shift = shift;
    }
  }
  if (!best) throw Error(ErrorCode::TooThin, "no perpendicular chord of length >= 2");
  if (opt.extend_to_edge) {
    best->major = {detail::edge_point(gt, best->major.a, -1.0 * u), detail::edge_point(gt, best->major.b, u)};
    best->minor = {detail::edge_point(gt, best->minor.a, -1.0 * v), detail::edge_point(gt, best->minor.b, v)};
  }
  return *best;
}

}  // namespace asymseg
