#pragma once

// WAV reader/writer.  Reads 16-bit PCM and 32-bit IEEE float, mono to
// 7-channel; writes 32-bit float.  Samples map to [-1, 1) for PCM16.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "css/audio.hpp"
#include "css/common.hpp"

namespace css {

namespace detail {

inline void put_u32(std::string& s, uint32_t v) {
  s.push_back(char(v & 0xFF));
  s.push_back(char((v >> 8) & 0xFF));
  s.push_back(char((v >> 16) & 0xFF));
  s.push_back(char((v >> 24) & 0xFF));
}

inline void put_u16(std::string& s, uint16_t v) {
  s.push_back(char(v & 0xFF));
  s.push_back(char((v >> 8) & 0xFF));
}

struct WavCursor {
  const uint8_t* p;
  size_t n;
  size_t off = 0;
  const std::string& path;

  void need(size_t k) const {
    if (off + k > n)
      throw FileFormatError("truncated WAV file: " + path);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(p[off]) | uint32_t(p[off + 1]) << 8 |
                 uint32_t(p[off + 2]) << 16 | uint32_t(p[off + 3]) << 24;
    off += 4;
    return v;
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(p[off]) | uint16_t(uint16_t(p[off + 1]) << 8);
    off += 2;
    return v;
  }
  std::string tag() {
    need(4);
    std::string t(reinterpret_cast<const char*>(p + off), 4);
    off += 4;
    return t;
  }
};

}  // namespace detail

template <class Real = float>
AudioBuffer<Real> read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileFormatError("cannot open WAV file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  detail::WavCursor c{bytes.data(), bytes.size(), 0, path};

  if (c.tag() != "RIFF") throw FileFormatError("not a RIFF file: " + path);
  c.u32();  // riff size, unchecked; data chunk bounds are what matter
  if (c.tag() != "WAVE") throw FileFormatError("not a WAVE file: " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  const uint8_t* data = nullptr;
  uint32_t data_len = 0;

  while (c.off + 8 <= c.n) {
    const std::string id = c.tag();
    const uint32_t len = c.u32();
    c.need(len);
    if (id == "fmt ") {
      if (len < 16) throw FileFormatError("bad fmt chunk in " + path);
      detail::WavCursor fc{c.p, c.off + len, c.off, path};
      format = fc.u16();
      channels = fc.u16();
      rate = fc.u32();
      fc.u32();  // byte rate
      fc.u16();  // block align
      bits = fc.u16();
      have_fmt = true;
    } else if (id == "data") {
      data = c.p + c.off;
      data_len = len;
    }
    c.off += len + (len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || !data)
    throw FileFormatError("WAV file missing fmt or data chunk: " + path);
  if (channels < 1 || channels > 7)
    throw FileFormatError("unsupported channel count " +
                          std::to_string(channels) + " in " + path +
                          " (expected 1 to 7)");

  const bool pcm16 = (format == 1 && bits == 16);
  const bool f32 = (format == 3 && bits == 32);
  if (!pcm16 && !f32)
    throw FileFormatError(
        "unsupported WAV encoding in " + path +
        " (expected 16-bit PCM or 32-bit float), got format tag " +
        std::to_string(format) + " with " + std::to_string(bits) + " bits");

  const size_t bytes_per = pcm16 ? 2 : 4;
  const int64_t total = data_len / (bytes_per * channels);
  AudioBuffer<Real> out(channels, total, static_cast<int>(rate));
  for (int64_t t = 0; t < total; ++t) {
    for (int64_t ch = 0; ch < channels; ++ch) {
      const uint8_t* s = data + (size_t(t) * channels + ch) * bytes_per;
      if (pcm16) {
        int16_t v = int16_t(uint16_t(s[0]) | (uint16_t(s[1]) << 8));
        out.at(ch, t) = Real(v) / Real(32768);
      } else {
        uint32_t u = uint32_t(s[0]) | uint32_t(s[1]) << 8 |
                     uint32_t(s[2]) << 16 | uint32_t(s[3]) << 24;
        float v;
        std::memcpy(&v, &u, 4);
        out.at(ch, t) = Real(v);
      }
    }
  }
  return out;
}

// 32-bit IEEE float, interleaved.
template <class Real>
void write_wav(const std::string& path, const AudioBuffer<Real>& buf) {
  if (buf.channels < 1 || buf.channels > 7)
    throw FileFormatError("write_wav: unsupported channel count " +
                          std::to_string(buf.channels));
  std::string out;
  const uint32_t frames = uint32_t(buf.length);
  const uint16_t channels = uint16_t(buf.channels);
  const uint32_t data_len = frames * channels * 4;
  out.reserve(data_len + 64);

  out += "RIFF";
  detail::put_u32(out, 4 + (8 + 16) + (8 + 4) + (8 + data_len));
  out += "WAVE";
  out += "fmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 3);  // IEEE float
  detail::put_u16(out, channels);
  detail::put_u32(out, uint32_t(buf.sample_rate));
  detail::put_u32(out, uint32_t(buf.sample_rate) * channels * 4);
  detail::put_u16(out, channels * 4);
  detail::put_u16(out, 32);
  out += "fact";
  detail::put_u32(out, 4);
  detail::put_u32(out, frames);
  out += "data";
  detail::put_u32(out, data_len);
  for (uint32_t t = 0; t < frames; ++t) {
    for (uint16_t ch = 0; ch < channels; ++ch) {
      const float v = float(buf.at(ch, t));
      uint32_t u;
      std::memcpy(&u, &v, 4);
      detail::put_u32(out, u);
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FileFormatError("cannot write WAV file: " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw FileFormatError("short write to WAV file: " + path);
}

// Guard used wherever user-supplied audio enters the pipeline.
template <class Real>
void require_sample_rate(const AudioBuffer<Real>& buf, int rate,
                         const std::string& what) {
  if (buf.sample_rate != rate)
    throw ContractError(what + ": sample rate is " +
                        std::to_string(buf.sample_rate) + " Hz but " +
                        std::to_string(rate) + " Hz is required");
}

}  // namespace css
