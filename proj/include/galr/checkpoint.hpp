#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "galr/config.hpp"

namespace galr {

/// Checkpoint layout (all integers little-endian, platform independent):
///   bytes 0..3   magic "GALR"
///   bytes 4..7   u32 format version (currently 1)
///   bytes 8..15  u64 header length in bytes
///   header       UTF-8 JSON: hyperparams + tensor directory
///                (name, dtype, shape, byte offset, byte length)
///   payload      concatenated little-endian float32 buffers, row-major,
///                in directory order
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t read_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline std::uint64_t read_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline void put_f32(std::vector<unsigned char>& b, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(b, v);
}
inline float read_f32(const unsigned char* p) {
  const std::uint32_t v = read_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const SeparatorModel<float>& model, const std::string& path) {
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& [name, t] = model.params.item(i);
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * 4;
    dir.push_back({{"name", name},
                   {"dtype", "f32"},
                   {"shape", t.shape()},
                   {"offset", offset},
                   {"nbytes", nbytes}});
    offset += nbytes;
  }
  nlohmann::json header{{"hyperparams", hyperparams_to_json(model.hp)}, {"tensors", dir}};
  const std::string header_str = header.dump();

  std::vector<unsigned char> bytes;
  bytes.reserve(16 + header_str.size() + offset);
  bytes.insert(bytes.end(), {'G', 'A', 'L', 'R'});
  ckpt_detail::put_u32(bytes, kCheckpointVersion);
  ckpt_detail::put_u64(bytes, header_str.size());
  bytes.insert(bytes.end(), header_str.begin(), header_str.end());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& t = model.params.item(i).second;
    for (std::int64_t j = 0; j < t.numel(); ++j) ckpt_detail::put_f32(bytes, t.data()[j]);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Error::Kind::io, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), Error::Kind::io, "write failed for " + path);
}

inline SeparatorModel<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Error::Kind::io, "cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  require(bytes.size() >= 16, Error::Kind::truncated, path + ": shorter than the fixed header");
  require(std::equal(bytes.begin(), bytes.begin() + 4, "GALR"), Error::Kind::bad_magic,
          path + ": bad magic bytes");
  const std::uint32_t version = ckpt_detail::read_u32(bytes.data() + 4);
  require(version == kCheckpointVersion, Error::Kind::bad_version,
          path + ": unknown checkpoint version " + std::to_string(version));
  const std::uint64_t header_len = ckpt_detail::read_u64(bytes.data() + 8);
  require(16 + header_len <= bytes.size(), Error::Kind::truncated,
          path + ": header runs past end of file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16,
                                   bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::truncated, path + ": unparseable header: " + e.what());
  }
  HyperParams hp = hyperparams_from_json(header.at("hyperparams"));
  // Weights are re-filled below; the seed only shapes the initial values.
  SeparatorModel<float> model = SeparatorModel<float>::init(hp, 0);

  const auto& dir = header.at("tensors");
  require(dir.is_array() && dir.size() == model.params.size(), Error::Kind::directory_mismatch,
          path + ": directory holds " + std::to_string(dir.size()) + " tensors, model expects " +
              std::to_string(model.params.size()));

  const std::size_t payload_off = 16 + static_cast<std::size_t>(header_len);
  const std::uint64_t payload_len = bytes.size() - payload_off;
  std::uint64_t expected_off = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    auto& [name, t] = model.params.item(i);
    const auto& entry = dir[i];
    require(entry.at("name").get<std::string>() == name, Error::Kind::directory_mismatch,
            path + ": tensor " + std::to_string(i) + " is named '" +
                entry.at("name").get<std::string>() + "', model expects '" + name + "'");
    require(entry.at("dtype").get<std::string>() == "f32", Error::Kind::directory_mismatch,
            path + ": only f32 payloads are defined");
    const Shape shape = entry.at("shape").get<Shape>();
    require(shape == t.shape(), Error::Kind::directory_mismatch,
            path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                ", model expects " + shape_str(t.shape()));
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = entry.at("nbytes").get<std::uint64_t>();
    require(off == expected_off, Error::Kind::payload_mismatch,
            path + ": tensor '" + name + "' offset " + std::to_string(off) +
                " breaks directory order (expected " + std::to_string(expected_off) + ")");
    require(nbytes == static_cast<std::uint64_t>(t.numel()) * 4, Error::Kind::payload_mismatch,
            path + ": payload length mismatch for tensor '" + name + "'");
    expected_off += nbytes;
  }
  require(expected_off == payload_len, Error::Kind::payload_mismatch,
          path + ": payload length mismatch: directory claims " + std::to_string(expected_off) +
              " bytes, file holds " + std::to_string(payload_len));

  for (std::size_t i = 0; i < model.params.size(); ++i) {
    auto& t = model.params.item(i).second;
    const std::uint64_t off = dir[i].at("offset").get<std::uint64_t>();
    const unsigned char* src = bytes.data() + payload_off + off;
    for (std::int64_t j = 0; j < t.numel(); ++j)
      t.data()[j] = ckpt_detail::read_f32(src + 4 * j);
  }
  return model;
}

}  // namespace galr
