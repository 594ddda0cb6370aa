#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "galr/frontend.hpp"

namespace galr {

namespace wav_detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}
inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

}  // namespace wav_detail

/// Reads a RIFF/WAVE file. Only 16-bit PCM, mono, at the expected sample
/// rate is accepted; anything else raises a format error naming the
/// offending property. Samples are scaled to [-1, 1] by 1/32768.
inline Waveform wav_read(const std::string& path, int expected_rate = 8000) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Error::Kind::io, "cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  require(bytes.size() >= 12, Error::Kind::format, path + ": too short for a RIFF header");
  require(std::equal(bytes.begin(), bytes.begin() + 4, "RIFF"), Error::Kind::format,
          path + ": missing RIFF magic");
  require(std::equal(bytes.begin() + 8, bytes.begin() + 12, "WAVE"), Error::Kind::format,
          path + ": not a WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t data_off = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos) + 4);
    const std::uint32_t size = wav_detail::read_u32(bytes.data() + pos + 4);
    pos += 8;
    require(pos + size <= bytes.size(), Error::Kind::format, path + ": chunk overruns file");
    if (id == "fmt ") {
      require(size >= 16, Error::Kind::format, path + ": fmt chunk too small");
      format = wav_detail::read_u16(bytes.data() + pos);
      channels = wav_detail::read_u16(bytes.data() + pos + 2);
      rate = wav_detail::read_u32(bytes.data() + pos + 4);
      bits = wav_detail::read_u16(bytes.data() + pos + 14);
      have_fmt = true;
    } else if (id == "data") {
      data_off = pos;
      data_len = size;
    }
    pos += size + (size & 1);  // chunks are word-aligned
  }
  require(have_fmt, Error::Kind::format, path + ": no fmt chunk");
  require(data_off != 0, Error::Kind::format, path + ": no data chunk");
  require(format == 1, Error::Kind::format,
          path + ": unsupported format=" + std::to_string(format) + " (PCM required)");
  require(channels == 1, Error::Kind::format,
          path + ": unsupported channels=" + std::to_string(channels) + " (mono required)");
  require(bits == 16, Error::Kind::format,
          path + ": unsupported bits=" + std::to_string(bits) + " (16-bit required)");
  require(static_cast<int>(rate) == expected_rate, Error::Kind::format,
          path + ": unsupported rate=" + std::to_string(rate) + " (" +
              std::to_string(expected_rate) + " Hz required)");

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  const std::size_t n = data_len / 2;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint16_t u = wav_detail::read_u16(bytes.data() + data_off + 2 * i);
    w.samples[i] = static_cast<double>(static_cast<std::int16_t>(u)) / 32768.0;
  }
  return w;
}

/// Writes 16-bit PCM mono; quantization is the exact inverse of wav_read up
/// to one least significant bit, with clipping at full scale.
inline void wav_write(const std::string& path, const Waveform& w) {
  const std::size_t n = w.samples.size();
  std::vector<unsigned char> b;
  b.reserve(44 + 2 * n);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  wav_detail::put_u32(b, static_cast<std::uint32_t>(36 + 2 * n));
  b.insert(b.end(), {'W', 'A', 'V', 'E'});
  b.insert(b.end(), {'f', 'm', 't', ' '});
  wav_detail::put_u32(b, 16);
  wav_detail::put_u16(b, 1);  // PCM
  wav_detail::put_u16(b, 1);  // mono
  wav_detail::put_u32(b, static_cast<std::uint32_t>(w.sample_rate));
  wav_detail::put_u32(b, static_cast<std::uint32_t>(w.sample_rate * 2));  // byte rate
  wav_detail::put_u16(b, 2);   // block align
  wav_detail::put_u16(b, 16);  // bits
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  wav_detail::put_u32(b, static_cast<std::uint32_t>(2 * n));
  for (const double s : w.samples) {
    double q = std::nearbyint(s * 32768.0);
    if (q > 32767.0) q = 32767.0;
    if (q < -32768.0) q = -32768.0;
    wav_detail::put_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Error::Kind::io, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  require(f.good(), Error::Kind::io, "write failed for " + path);
}

}  // namespace galr
