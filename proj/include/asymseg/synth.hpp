#pragma once

// Synthetic hypoechoic-nodule phantoms and the dataset directory format:
//   manifest.json        generator config, ids, train/test split
//   images/<id>.pgm      8-bit grayscale
//   masks/<id>.pgm       ground truth (0/255)
//   annotations.jsonl    {"id", "major": [[x,y],[x,y]], "minor": [[x,y],[x,y]]}

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "asymseg/error.hpp"
#include "asymseg/geometry.hpp"
#include "asymseg/mask.hpp"
#include "asymseg/pgm.hpp"
#include "asymseg/rng.hpp"

namespace asymseg {

struct SynthConfig {
  int size = 64;
  int n = 250;
  std::uint64_t seed = 7;
  bool convex_only = false;
  double star_harmonics = 0.15;  // bound on each harmonic amplitude
  double fg_level = 0.25;
  double bg_level = 0.55;
  double speckle_strength = 0.4;
  double aspect_min = 1.0;
  double aspect_max = 2.2;
  // Axis tilt from the image axes, drawn from U(-max, max). Standard scan
  // planes keep nodule axes close to the image axes.
  double max_rotation_deg = 20.0;
  int net_depth = 2;

  void validate() const {
    if (size < 16) throw Error(ErrorCode::ConfigError, "size must be >= 16");
    if (size % (1 << net_depth) != 0) {
      throw Error(ErrorCode::ConfigError, "size must be divisible by 2^" + std::to_string(net_depth));
    }
    if (n < 0) throw Error(ErrorCode::ConfigError, "n must be >= 0");
    if (!(star_harmonics >= 0 && star_harmonics < 0.3)) {
      throw Error(ErrorCode::ConfigError, "star_harmonics must lie in [0, 0.3)");
    }
    if (!(aspect_min >= 1.0 && aspect_max >= aspect_min)) {
      throw Error(ErrorCode::ConfigError, "aspect range must satisfy 1 <= aspect_min <= aspect_max");
    }
    for (double v : {fg_level, bg_level}) {
      if (!(v >= 0 && v <= 1)) throw Error(ErrorCode::ConfigError, "intensity levels must lie in [0, 1]");
    }
    if (!(max_rotation_deg >= 0 && max_rotation_deg <= 90)) {
      throw Error(ErrorCode::ConfigError, "max_rotation_deg must lie in [0, 90]");
    }
    if (!(speckle_strength >= 0)) throw Error(ErrorCode::ConfigError, "speckle_strength must be >= 0");
  }
};

struct SampleRecord {
  std::string id;
  GrayImage image;
  BinaryMask gt;
  AspectAnnotation ann;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

inline std::string sample_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05d", index);
  return buf;
}

/// Star-convex nodule parameters, exposed for tests.
struct NoduleShape {
  Point2 center;
  double r0 = 0;
  std::array<double, 3> amp{};    // harmonics j = 2, 3, 4
  std::array<double, 3> phase{};
  double aspect = 1;
  double rotation = 0;

  double radius(double theta) const {
    double s = 1.0;
    for (int j = 0; j < 3; ++j) s += amp[j] * std::cos((j + 2) * theta + phase[j]);
    return r0 * s;
  }

  /// Point test in image coordinates (pixel centres at +0.5).
  bool contains(Point2 p) const {
    const Point2 d = p - center;
    const double c = std::cos(rotation), s = std::sin(rotation);
    // Undo rotation, then the area-preserving anisotropic stretch.
    const double x = (c * d.x + s * d.y) / std::sqrt(aspect);
    const double y = (-s * d.x + c * d.y) * std::sqrt(aspect);
    return std::hypot(x, y) < radius(std::atan2(y, x));
  }

  /// Upper bound on the distance from the centre to the boundary.
  double max_extent() const {
    double s = 1.0;
    for (double a : amp) s += std::abs(a);
    return r0 * s * std::sqrt(aspect);
  }
};

namespace detail {

inline NoduleShape draw_nodule(const SynthConfig& cfg, Rng& rng) {
  NoduleShape sh;
  sh.r0 = rng.uniform(0.12, 0.28) * cfg.size;
  for (int j = 0; j < 3; ++j) {
    sh.amp[j] = cfg.convex_only ? 0.0 : rng.uniform(-cfg.star_harmonics, cfg.star_harmonics);
    sh.phase[j] = rng.uniform(0, 2 * std::numbers::pi);
  }
  sh.aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max);
  const double tilt = cfg.max_rotation_deg * std::numbers::pi / 180.0;
  sh.rotation = rng.uniform(-tilt, tilt);
  // Keep the whole nodule inside the frame: shrink if it cannot fit, then
  // clamp the (central-half) centre so the extent clears the border.
  const double limit = 0.5 * cfg.size - 1.0;
  if (sh.max_extent() > limit) sh.r0 *= limit / sh.max_extent();
  const double ext = sh.max_extent();
  const double lo = std::max(0.25 * cfg.size, ext + 1.0), hi = std::min(0.75 * cfg.size, cfg.size - 1.0 - ext);
  sh.center = {std::clamp(rng.uniform(0.25, 0.75) * cfg.size, lo, hi),
               std::clamp(rng.uniform(0.25, 0.75) * cfg.size, lo, hi)};
  return sh;
}

// 3x3 mean filter with edge replication.
inline std::vector<double> box3(const std::vector<double>& in, int h, int w) {
  std::vector<double> out(in.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = std::clamp(r + dr, 0, h - 1), cc = std::clamp(c + dc, 0, w - 1);
          s += in[std::size_t(rr) * w + cc];
        }
      }
      out[std::size_t(r) * w + c] = s / 9.0;
    }
  }
  return out;
}

}  // namespace detail

/// Deterministic in (cfg, index). A sample whose mask has fewer than 16
/// pixels or admits no annotation is redrawn from the next substream.
inline SampleRecord synth_sample(const SynthConfig& cfg, int index) {
  cfg.validate();
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    Rng rng(substream_seed(cfg.seed, std::uint64_t(index)), attempt);
    const NoduleShape sh = detail::draw_nodule(cfg, rng);
    const int n = cfg.size;
    SampleRecord rec{sample_id(index), GrayImage(n, n), BinaryMask(n, n), {}};
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) rec.gt(r, c) = sh.contains({c + 0.5, r + 0.5});
    }
    std::vector<double> img(std::size_t(n) * n);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        const double base = rec.gt(r, c) ? cfg.fg_level : cfg.bg_level;
        img[std::size_t(r) * n + c] = base * (1.0 + cfg.speckle_strength * rng.normal());
      }
    }
    img = detail::box3(detail::box3(img, n, n), n, n);
    for (std::size_t i = 0; i < img.size(); ++i) {
      rec.image.pixels[i] = pgm::quantize(std::clamp(img[i], 0.0, 1.0)) / 255.0;
    }
    if (rec.gt.count() < 16) continue;
    try {
      rec.ann = annotation_from_mask(rec.gt);
    } catch (const Error&) {
      continue;
    }
    return rec;
  }
  throw Error(ErrorCode::DegenerateSample, "no valid sample for index " + std::to_string(index));
}

inline std::vector<SampleRecord> synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<SampleRecord> out;
  out.reserve(cfg.n);
  for (int i = 0; i < cfg.n; ++i) out.push_back(synth_sample(cfg, i));
  return out;
}

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

/// Seeded partition of {0..n-1}; `test_fraction` of the items (rounded) go to
/// test. Both halves are returned in ascending order.
inline Split split_indices(int n, std::uint64_t seed, double test_fraction) {
  if (!(test_fraction >= 0 && test_fraction <= 1)) throw Error(ErrorCode::ConfigError, "test fraction must be in [0, 1]");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed, 0x5B11);
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(std::uint64_t(i) + 1)]);
  const int n_test = static_cast<int>(std::lround(test_fraction * n));
  Split s{{idx.begin() + n_test, idx.end()}, {idx.begin(), idx.begin() + n_test}};
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

struct Dataset {
  std::vector<SampleRecord> records;
  nlohmann::json config = nlohmann::json::object();  // generator settings, informational
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;

  std::vector<const SampleRecord*> select(const std::vector<std::string>& ids) const {
    std::map<std::string, const SampleRecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    std::vector<const SampleRecord*> out;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw Error(ErrorCode::FormatError, "split references unknown id " + id);
      out.push_back(it->second);
    }
    return out;
  }
  std::vector<const SampleRecord*> train() const { return select(train_ids); }
  std::vector<const SampleRecord*> test() const { return select(test_ids); }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"size", c.size},
          {"n", c.n},
          {"seed", c.seed},
          {"convex_only", c.convex_only},
          {"star_harmonics", c.star_harmonics},
          {"fg_level", c.fg_level},
          {"bg_level", c.bg_level},
          {"speckle_strength", c.speckle_strength},
          {"aspect_min", c.aspect_min},
          {"aspect_max", c.aspect_max},
          {"max_rotation_deg", c.max_rotation_deg},
          {"net_depth", c.net_depth}};
}

inline nlohmann::json annotation_json(const std::string& id, const AspectAnnotation& a) {
  return {{"id", id},
          {"major", {{a.major.a.x, a.major.a.y}, {a.major.b.x, a.major.b.y}}},
          {"minor", {{a.minor.a.x, a.minor.a.y}, {a.minor.b.x, a.minor.b.y}}}};
}

inline AspectAnnotation annotation_from_json(const nlohmann::json& j) {
  auto seg = [](const nlohmann::json& s) {
    return Segment{{s.at(0).at(0).get<double>(), s.at(0).at(1).get<double>()},
                   {s.at(1).at(0).get<double>(), s.at(1).at(1).get<double>()}};
  };
  return {seg(j.at("major")), seg(j.at("minor"))};
}

/// Writes (overwriting) a dataset directory.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create dataset directory " + dir.string());
  // Remove stale items from an earlier run in the same directory.
  for (const char* sub : {"images", "masks"}) {
    for (const auto& e : fs::directory_iterator(dir / sub)) {
      if (e.path().extension() == ".pgm") fs::remove(e.path());
    }
  }
  std::ofstream ann(dir / "annotations.jsonl", std::ios::trunc);
  if (!ann) throw Error(ErrorCode::IoError, "cannot write " + (dir / "annotations.jsonl").string());
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& r : ds.records) {
    pgm::write_image(dir / "images" / (r.id + ".pgm"), r.image);
    pgm::write_mask(dir / "masks" / (r.id + ".pgm"), r.gt);
    ann << annotation_json(r.id, r.ann).dump() << '\n';
    ids.push_back(r.id);
  }
  nlohmann::json manifest{{"format", "asymseg-dataset"},
                          {"version", 1},
                          {"config", ds.config},
                          {"ids", ids},
                          {"split", {{"train", ds.train_ids}, {"test", ds.test_ids}}}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

/// Reads a dataset directory. A directory with no manifest and no images is
/// an empty dataset.
inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoError, "dataset directory not found: " + dir.string());
  Dataset ds;
  std::vector<std::string> ids;
  const fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    try {
      const auto m = nlohmann::json::parse(in);
      ds.config = m.value("config", nlohmann::json::object());
      ids = m.at("ids").get<std::vector<std::string>>();
      if (m.contains("split")) {
        ds.train_ids = m["split"].value("train", std::vector<std::string>{});
        ds.test_ids = m["split"].value("test", std::vector<std::string>{});
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::FormatError, "malformed " + manifest_path.string() + ": " + e.what());
    }
  } else if (fs::is_directory(dir / "images")) {
    for (const auto& e : fs::directory_iterator(dir / "images")) {
      if (e.path().extension() == ".pgm") ids.push_back(e.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
  }
  if (ids.empty()) return ds;

  std::map<std::string, AspectAnnotation> anns;
  std::ifstream in(dir / "annotations.jsonl");
  if (!in) throw Error(ErrorCode::FormatError, "missing annotations.jsonl in " + dir.string());
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      anns[j.at("id").get<std::string>()] = annotation_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::FormatError, "annotations.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (const auto& id : ids) {
    auto it = anns.find(id);
    if (it == anns.end()) throw Error(ErrorCode::FormatError, "no annotation for image id " + id);
    SampleRecord r;
    r.id = id;
    r.image = pgm::read_image(dir / "images" / (id + ".pgm"));
    r.gt = pgm::read_mask(dir / "masks" / (id + ".pgm"));
    if (r.gt.height() != r.image.height || r.gt.width() != r.image.width) {
      throw Error(ErrorCode::FormatError, "mask and image sizes differ for id " + id);
    }
    r.ann = it->second;
    ds.records.push_back(std::move(r));
  }
  return ds;
}

/// Generates a full dataset with its split.
inline Dataset make_dataset(const SynthConfig& cfg, double test_fraction = 0.2) {
  Dataset ds;
  ds.records = synth_dataset(cfg);
  ds.config = to_json(cfg);
  const auto s = split_indices(cfg.n, cfg.seed, test_fraction);
  for (int i : s.train) ds.train_ids.push_back(ds.records[i].id);
  for (int i : s.test) ds.test_ids.push_back(ds.records[i].id);
  return ds;
}

}  // namespace asymseg
