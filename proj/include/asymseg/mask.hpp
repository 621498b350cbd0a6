#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asymseg/error.hpp"

namespace asymseg {

struct GridSize {
  int height = 0;
  int width = 0;

  friend bool operator==(const GridSize&, const GridSize&) = default;
};

/// Dense H x W grid of {0,1} values, row-major.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width) : height_(height), width_(width) {
    if (height <= 0 || width <= 0) {
      throw Error(ErrorCode::ShapeMismatch, "mask dimensions must be positive");
    }
    bits_.assign(static_cast<std::size_t>(height) * width, 0);
  }
  explicit BinaryMask(GridSize g) : BinaryMask(g.height, g.width) {}

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  GridSize grid() const noexcept { return {height_, width_}; }
  std::size_t size() const noexcept { return bits_.size(); }
  bool empty() const noexcept { return bits_.empty(); }

  bool in_bounds(int r, int c) const noexcept {
    return r >= 0 && c >= 0 && r < height_ && c < width_;
  }

  std::uint8_t operator()(int r, int c) const noexcept {
    return bits_[static_cast<std::size_t>(r) * width_ + c];
  }
  std::uint8_t& operator()(int r, int c) noexcept {
    return bits_[static_cast<std::size_t>(r) * width_ + c];
  }

  /// Sets the pixel if it lies inside the grid; ignores it otherwise.
  void set_clipped(int r, int c, std::uint8_t v = 1) noexcept {
    if (in_bounds(r, c)) (*this)(r, c) = v;
  }

  std::span<const std::uint8_t> bits() const noexcept { return bits_; }
  std::span<std::uint8_t> bits() noexcept { return bits_; }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  bool is_subset_of(const BinaryMask& other) const {
    require_same_shape(other);
    for (std::size_t i = 0; i < bits_.size(); ++i) {
      if (bits_[i] && !other.bits_[i]) return false;
    }
    return true;
  }

  void require_same_shape(const BinaryMask& other) const {
    if (height_ != other.height_ || width_ != other.width_) {
      throw Error(ErrorCode::ShapeMismatch,
                  "mask " + std::to_string(height_) + "x" + std::to_string(width_) + " vs " +
                      std::to_string(other.height_) + "x" + std::to_string(other.width_));
    }
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Grayscale image with intensities in [0,1], row-major.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  double operator()(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double& operator()(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// Lossless pixel permutations used for augmentation. `quarter_turns` rotates
// clockwise by 90 degrees per step; flips apply after rotation.
struct GridTransform {
  int quarter_turns = 0;
  bool flip_h = false;
  bool flip_v = false;
};

template <class Grid, class Get, class Make>
Grid apply_transform_generic(const Grid& in, int h, int w, GridTransform t, Get get, Make make) {
  const int k = ((t.quarter_turns % 4) + 4) % 4;
  const int oh = (k % 2 == 0) ? h : w;
  const int ow = (k % 2 == 0) ? w : h;
  Grid out = make(oh, ow);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      int rr = t.flip_v ? oh - 1 - r : r;
      int cc = t.flip_h ? ow - 1 - c : c;
      int sr = 0, sc = 0;
      switch (k) {
        case 0: sr = rr; sc = cc; break;
        case 1: sr = h - 1 - cc; sc = rr; break;
        case 2: sr = h - 1 - rr; sc = w - 1 - cc; break;
        default: sr = cc; sc = w - 1 - rr; break;
      }
      get(out, r, c, in, sr, sc);
    }
  }
  return out;
}

inline BinaryMask transform(const BinaryMask& m, GridTransform t) {
  return apply_transform_generic(
      m, m.height(), m.width(), t,
      [](BinaryMask& o, int r, int c, const BinaryMask& i, int sr, int sc) { o(r, c) = i(sr, sc); },
      [](int h, int w) { return BinaryMask(h, w); });
}

inline GrayImage transform(const GrayImage& m, GridTransform t) {
  return apply_transform_generic(
      m, m.height, m.width, t,
      [](GrayImage& o, int r, int c, const GrayImage& i, int sr, int sc) { o(r, c) = i(sr, sc); },
      [](int h, int w) { return GrayImage(h, w); });
}

}  // namespace asymseg
