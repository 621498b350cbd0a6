#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "asymseg/error.hpp"
#include "asymseg/geometry.hpp"
#include "asymseg/mask.hpp"

namespace asymseg {

struct OverlapMetrics {
  double dsc = 0;
  double jaccard = 0;
  double precision = 0;
  double recall = 0;
};

/// A = pred, B = gt. Both empty: all ones. Exactly one empty: all zeros.
inline OverlapMetrics overlap_metrics(const BinaryMask& pred, const BinaryMask& gt) {
  pred.require_same_shape(gt);
  std::size_t a = 0, b = 0, both = 0;
  const auto pa = pred.bits(), pb = gt.bits();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    a += pa[i] != 0;
    b += pb[i] != 0;
    both += pa[i] && pb[i];
  }
  if (a == 0 && b == 0) return {1, 1, 1, 1};
  if (a == 0 || b == 0) return {0, 0, 0, 0};
  const double i = double(both);
  return {2 * i / double(a + b), i / double(a + b - both), i / double(a), i / double(b)};
}

namespace detail {

inline constexpr std::int64_t kInfSq = std::numeric_limits<std::int64_t>::max() / 4;

// Felzenszwalb-Huttenlocher 1-D squared distance transform; entries of `f`
// at kInfSq are empty sites.
inline void edt_1d(const std::int64_t* f, std::int64_t* d, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] >= kInfSq) continue;
    double s = -inf;
    while (k >= 0) {
      const int p = v[k];
      s = (double(f[q] + std::int64_t(q) * q) - double(f[p] + std::int64_t(p) * p)) / (2.0 * (q - p));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -inf : s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(d, d + n, kInfSq);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const std::int64_t dq = q - v[j];
    d[q] = dq * dq + f[v[j]];
  }
}

}  // namespace detail

/// Squared Euclidean distance (pixel-centre metric) from every pixel to the
/// nearest set pixel; `detail::kInfSq` where the mask is empty.
inline std::vector<std::int64_t> squared_distance_transform(const BinaryMask& mask) {
  const int h = mask.height(), w = mask.width();
  std::vector<std::int64_t> g(std::size_t(h) * w);
  std::vector<int> v;
  std::vector<double> z;
  std::vector<std::int64_t> col(h), out(std::max(h, w));
  // Columns first, then rows.
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) col[r] = mask(r, c) ? 0 : detail::kInfSq;
    detail::edt_1d(col.data(), out.data(), h, v, z);
    for (int r = 0; r < h; ++r) g[std::size_t(r) * w + c] = out[r];
  }
  std::vector<std::int64_t> row(w);
  for (int r = 0; r < h; ++r) {
    std::copy_n(g.data() + std::size_t(r) * w, w, row.data());
    detail::edt_1d(row.data(), out.data(), w, v, z);
    for (int c = 0; c < w; ++c) {
      g[std::size_t(r) * w + c] = out[c] >= detail::kInfSq ? detail::kInfSq : out[c];
    }
  }
  return g;
}

/// Exact Euclidean distance to the nearest foreground pixel; +inf if the
/// mask is empty.
inline std::vector<double> distance_transform(const BinaryMask& mask) {
  const auto sq = squared_distance_transform(mask);
  std::vector<double> out(sq.size());
  for (std::size_t i = 0; i < sq.size(); ++i) {
    out[i] = sq[i] >= detail::kInfSq ? std::numeric_limits<double>::infinity() : std::sqrt(double(sq[i]));
  }
  return out;
}

/// Foreground pixels 4-adjacent to background or to the image border.
inline BinaryMask boundary(const BinaryMask& m) {
  BinaryMask out(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      if (!m(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r == m.height() - 1 || c == m.width() - 1 || !m(r - 1, c) ||
                        !m(r + 1, c) || !m(r, c - 1) || !m(r, c + 1);
      out(r, c) = edge;
    }
  }
  return out;
}

/// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw Error(ErrorCode::EmptyInput, "percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * double(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

struct SurfaceMetrics {
  double asd = 0;
  double hd95 = 0;
};

/// Distances from every set pixel of `from` to the nearest set pixel of `to`.
inline std::vector<double> directed_distances(const BinaryMask& from, const BinaryMask& to) {
  const auto sq = squared_distance_transform(to);
  std::vector<double> d;
  const auto bits = from.bits();
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) d.push_back(std::sqrt(double(sq[i])));
  }
  return d;
}

/// ASD is directed pred -> gt unless `symmetric_asd`; HD95 is the 95th
/// percentile over both directed distance sets. If exactly one boundary is
/// empty both metrics equal the image diagonal; if both are empty, 0.
inline SurfaceMetrics surface_metrics(const BinaryMask& pred, const BinaryMask& gt, bool symmetric_asd = false) {
  pred.require_same_shape(gt);
  const BinaryMask a = boundary(pred), b = boundary(gt);
  const bool ea = a.count() == 0, eb = b.count() == 0;
  if (ea && eb) return {0, 0};
  if (ea || eb) {
    const double diag = std::hypot(double(pred.height()), double(pred.width()));
    return {diag, diag};
  }
  const auto ab = directed_distances(a, b);
  const auto ba = directed_distances(b, a);
  SurfaceMetrics out;
  double s = 0;
  for (double d : ab) s += d;
  if (symmetric_asd) {
    for (double d : ba) s += d;
    out.asd = s / double(ab.size() + ba.size());
  } else {
    out.asd = s / double(ab.size());
  }
  std::vector<double> all = ab;
  all.insert(all.end(), ba.begin(), ba.end());
  out.hd95 = percentile(std::move(all), 95.0);
  return out;
}

struct MetricReport {
  double dsc = 0;
  double jaccard = 0;
  double asd = 0;
  double hd95 = 0;
  double precision = 0;
  double recall = 0;
};

inline MetricReport evaluate_masks(const BinaryMask& pred, const BinaryMask& gt) {
  const auto o = overlap_metrics(pred, gt);
  const auto s = surface_metrics(pred, gt);
  return {o.dsc, o.jaccard, s.asd, s.hd95, o.precision, o.recall};
}

struct ReportRow {
  std::string id;
  MetricReport m;
};

inline constexpr const char* kReportHeader = "id,dsc,jaccard,asd,hd95,precision,recall";

/// Per-field mean and sample standard deviation (0 for a single row).
inline std::pair<MetricReport, MetricReport> aggregate(std::span<const ReportRow> rows) {
  if (rows.empty()) throw Error(ErrorCode::EmptyDataset, "no rows to aggregate");
  auto fields = [](const MetricReport& m) {
    return std::array<double, 6>{m.dsc, m.jaccard, m.asd, m.hd95, m.precision, m.recall};
  };
  std::array<double, 6> mean{}, var{};
  for (const auto& r : rows) {
    const auto f = fields(r.m);
    for (int k = 0; k < 6; ++k) mean[k] += f[k] / double(rows.size());
  }
  for (const auto& r : rows) {
    const auto f = fields(r.m);
    for (int k = 0; k < 6; ++k) var[k] += (f[k] - mean[k]) * (f[k] - mean[k]);
  }
  for (auto& v : var) v = rows.size() > 1 ? std::sqrt(v / double(rows.size() - 1)) : 0.0;
  auto make = [](const std::array<double, 6>& a) { return MetricReport{a[0], a[1], a[2], a[3], a[4], a[5]}; };
  return {make(mean), make(var)};
}

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string report_line(const std::string& id, const MetricReport& m) {
  return id + "," + format_real(m.dsc) + "," + format_real(m.jaccard) + "," + format_real(m.asd) + "," +
         format_real(m.hd95) + "," + format_real(m.precision) + "," + format_real(m.recall);
}

/// CSV with one row per image followed by `mean` and `std` rows.
inline void write_report(const std::filesystem::path& path, std::span<const ReportRow> rows) {
  const auto [mean, sd] = aggregate(rows);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write report " + path.string());
  out << kReportHeader << '\n';
  for (const auto& r : rows) out << report_line(r.id, r.m) << '\n';
  out << report_line("mean", mean) << '\n' << report_line("std", sd) << '\n';
  if (!out) throw Error(ErrorCode::IoError, "failed writing report " + path.string());
}

struct ShapeFidelity {
  ShapeKind kind;
  double precision = 0;
  double recall = 0;
};

/// Mean precision/recall of each pseudo-label kind against ground truth.
/// `Items` is any range of records exposing `.gt` and `.ann`.
template <class Items>
std::vector<ShapeFidelity> shape_fidelity_table(const Items& items, std::span<const ShapeKind> kinds) {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& it : items) ++n;
  if (n == 0) throw Error(ErrorCode::EmptyDataset, "shape fidelity needs at least one record");
  std::vector<ShapeFidelity> out;
  for (ShapeKind k : kinds) {
    ShapeFidelity f{k};
    for (const auto& it : items) {
      const auto o = overlap_metrics(generate_pseudo_label(it.ann, k, it.gt.grid()), it.gt);
      f.precision += o.precision / double(n);
      f.recall += o.recall / double(n);
    }
    out.push_back(f);
  }
  return out;
}

}  // namespace asymseg
