#pragma once

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "asymseg/error.hpp"
#include "asymseg/mask.hpp"

namespace asymseg::pgm {

struct Raster {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bytes;
};

inline void write(const std::filesystem::path& path, const Raster& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.bytes.data()),
            static_cast<std::streamsize>(img.bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

inline Raster read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto fail = [&](const std::string& why) {
    throw Error(ErrorCode::FormatError, path.string() + ": " + why);
  };
  auto skip_space = [&] {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    if (pos >= data.size() || !std::isdigit(static_cast<unsigned char>(data[pos]))) {
      fail("malformed header");
    }
    long v = 0;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
      v = v * 10 + (data[pos++] - '0');
      if (v > 1'000'000) fail("header value out of range");
    }
    return static_cast<int>(v);
  };

  if (data.size() < 2 || data[0] != 'P' || data[1] != '5') fail("bad magic (expected P5)");
  pos = 2;
  Raster r;
  r.width = read_int();
  r.height = read_int();
  const int maxval = read_int();
  if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval));
  if (r.width <= 0 || r.height <= 0) fail("non-positive dimensions");
  if (pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[pos]))) {
    fail("missing separator after header");
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(r.width) * r.height;
  if (data.size() - pos < n) fail("truncated pixel data");
  r.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(pos),
                 data.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return r;
}

inline void write_mask(const std::filesystem::path& path, const BinaryMask& m) {
  Raster r{m.height(), m.width(), {}};
  r.bytes.reserve(m.size());
  for (auto b : m.bits()) r.bytes.push_back(b ? 255 : 0);
  write(path, r);
}

inline BinaryMask read_mask(const std::filesystem::path& path) {
  Raster r = read(path);
  BinaryMask m(r.height, r.width);
  auto bits = m.bits();
  for (std::size_t i = 0; i < r.bytes.size(); ++i) {
    if (r.bytes[i] != 0 && r.bytes[i] != 255) {
      throw Error(ErrorCode::FormatError, path.string() + ": mask values must be 0 or 255");
    }
    bits[i] = r.bytes[i] ? 1 : 0;
  }
  return m;
}

/// Nearest 8-bit level; images produced by the phantom generator are already
/// on this lattice, so write/read is lossless for them.
inline std::uint8_t quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

inline void write_image(const std::filesystem::path& path, const GrayImage& img) {
  Raster r{img.height, img.width, {}};
  r.bytes.reserve(img.pixels.size());
  for (double v : img.pixels) r.bytes.push_back(quantize(v));
  write(path, r);
}

inline GrayImage read_image(const std::filesystem::path& path) {
  Raster r = read(path);
  GrayImage img(r.height, r.width);
  for (std::size_t i = 0; i < r.bytes.size(); ++i) img.pixels[i] = r.bytes[i] / 255.0;
  return img;
}

}  // namespace asymseg::pgm
