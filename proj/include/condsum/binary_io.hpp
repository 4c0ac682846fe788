#pragma once

// Tagged binary container shared by feature caches and checkpoints:
//
//   8-byte magic | u32 LE version | u32 LE header length | JSON header | f32 LE payload

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condsum/core.hpp"

namespace condsum::io {

static_assert(std::endian::native == std::endian::little, "container format assumes a little-endian host");

struct Container {
  std::uint32_t version = 1;
  nlohmann::json header;
  std::vector<float> payload;
};

inline void write_container(const std::filesystem::path& path, std::string_view magic, const Container& c) {
  if (magic.size() != 8) throw ArgumentError("container magic must be 8 bytes");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open for writing: " + path.string());
  const std::string header = c.header.dump();
  const auto header_len = static_cast<std::uint32_t>(header.size());
  out.write(magic.data(), 8);
  out.write(reinterpret_cast<const char*>(&c.version), 4);
  out.write(reinterpret_cast<const char*>(&header_len), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(c.payload.data()),
            static_cast<std::streamsize>(c.payload.size() * sizeof(float)));
  if (!out) throw LoadError("write failed: " + path.string());
}

inline Container read_container(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  char tag[8];
  in.read(tag, 8);
  if (!in || std::string_view(tag, 8) != magic) throw LoadError("bad magic in " + path.string());
  Container c;
  std::uint32_t header_len = 0;
  in.read(reinterpret_cast<char*>(&c.version), 4);
  in.read(reinterpret_cast<char*>(&header_len), 4);
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw LoadError("truncated header in " + path.string());
  try {
    c.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad header in " + path.string() + ": " + e.what());
  }
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (rest.size() % sizeof(float) != 0) throw LoadError("truncated payload in " + path.string());
  c.payload.resize(rest.size() / sizeof(float));
  std::memcpy(c.payload.data(), rest.data(), rest.size());
  return c;
}

inline void append_matrix(std::vector<float>& payload, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) payload.push_back(static_cast<float>(m(i, j)));
}

inline Matrix read_matrix(const std::vector<float>& payload, std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
  if (offset + static_cast<std::size_t>(rows * cols) > payload.size()) throw LoadError("payload too short");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = payload[offset + static_cast<std::size_t>(i * cols + j)];
  return m;
}

// Feature caches: one matrix (frames x feature width).
inline constexpr std::string_view kFeatureMagic{"CSFEAT\0\0", 8};

struct FeatureCache {
  Matrix features;
  std::string encoder_id;
  std::uint64_t seed = 0;
};

inline void write_feature_cache(const std::filesystem::path& path, const FeatureCache& cache) {
  Container c;
  c.header = {{"rows", cache.features.rows()},
              {"cols", cache.features.cols()},
              {"encoder_id", cache.encoder_id},
              {"seed", cache.seed}};
  append_matrix(c.payload, cache.features);
  write_container(path, kFeatureMagic, c);
}

inline FeatureCache read_feature_cache(const std::filesystem::path& path) {
  const Container c = read_container(path, kFeatureMagic);
  FeatureCache cache;
  try {
    const auto rows = c.header.at("rows").get<Eigen::Index>();
    const auto cols = c.header.at("cols").get<Eigen::Index>();
    cache.features = read_matrix(c.payload, 0, rows, cols);
    cache.encoder_id = c.header.at("encoder_id").get<std::string>();
    cache.seed = c.header.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad feature header in " + path.string() + ": " + e.what());
  }
  return cache;
}

}  // namespace condsum::io
