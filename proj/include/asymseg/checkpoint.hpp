#pragma once

// Checkpoint file: one line of JSON
//   {"entries":[{"name","shape","offset","len"}...],"config":{...},"iter":n}
// then a newline and a little-endian float32 blob. `offset` is in bytes from
// the start of the blob, `len` in elements.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "asymseg/error.hpp"
#include "asymseg/network.hpp"

namespace asymseg {

struct Checkpoint {
  ParamStore<float> params;
  long iter = 0;
};

namespace detail {

inline void append_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float read_le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& params, long iter) {
  nlohmann::json header;
  header["entries"] = nlohmann::json::array();
  std::string blob;
  for (const auto& e : params.entries()) {
    header["entries"].push_back({{"name", e.name},
                                 {"shape", e.values.shape()},
                                 {"offset", blob.size()},
                                 {"len", e.values.size()}});
    for (T v : e.values.values()) detail::append_le(blob, static_cast<float>(v));
  }
  const NetConfig& c = params.config();
  header["config"] = {{"depth", c.depth},
                      {"base_channels", c.base_channels},
                      {"in_channels", c.in_channels},
                      {"out_channels", c.out_channels}};
  header["iter"] = iter;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw Error(ErrorCode::IoError, "failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::FormatError, "empty checkpoint " + path.string());
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(line);
    const auto& c = header.at("config");
    NetConfig cfg{c.at("depth").get<int>(), c.at("base_channels").get<int>(),
                  c.at("in_channels").get<int>(), c.at("out_channels").get<int>()};
    validate(cfg);
    ck.params = ParamStore<float>(cfg);
    ck.iter = header.at("iter").get<long>();
    for (const auto& e : header.at("entries")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<int>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto len = e.at("len").get<std::size_t>();
      auto& entry = ck.params.add(name, shape);
      if (entry.values.size() != len) {
        throw Error(ErrorCode::FormatError, "entry " + name + " length does not match its shape");
      }
      if (offset + 4 * len > blob.size()) {
        throw Error(ErrorCode::FormatError, "truncated blob for entry " + name);
      }
      for (std::size_t k = 0; k < len; ++k) entry.values[k] = detail::read_le(blob.data() + offset + 4 * k);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::FormatError, "bad checkpoint header in " + path.string() + ": " + ex.what());
  }
  // Must carry exactly the parameters the architecture expects.
  const auto expected = init_params<float>(ck.params.config(), 0);
  if (expected.size() != ck.params.size()) {
    throw Error(ErrorCode::FormatError, "checkpoint " + path.string() + " does not match its config");
  }
  for (const auto& e : expected.entries()) {
    if (!ck.params.contains(e.name) || ck.params.at(e.name).values.shape() != e.values.shape()) {
      throw Error(ErrorCode::FormatError, "checkpoint " + path.string() + " lacks " + e.name);
    }
  }
  return ck;
}

}  // namespace asymseg
