#pragma once

// Binary container for model weights and optimizer state.
//
//   magic   4 bytes        "CSSW" (weights) / "CSSO" (optimizer state)
//   version u32            currently 1
//   config  10 x u32       ConformerConfig fields in declaration order
//   tensors repeated       name_len u32, name bytes, rank u32,
//                          extent u32 per axis, float32 data
//   crc32   u32            over every preceding byte
//
// All integers and floats are little-endian.  Tensor data is float32 on disk
// regardless of the in-memory precision.  A reader first verifies the CRC,
// so a truncated or bit-flipped file is rejected before any tensor loads.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "css/common.hpp"
#include "css/conformer.hpp"

namespace css {

constexpr uint32_t kWeightsVersion = 1;
inline const char kWeightsMagic[5] = "CSSW";
inline const char kOptimizerMagic[5] = "CSSO";

struct RawTensor {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<float> data;
};

namespace containerio {

inline void put_u32(std::string& s, uint32_t v) {
  s.push_back(char(v & 0xFF));
  s.push_back(char((v >> 8) & 0xFF));
  s.push_back(char((v >> 16) & 0xFF));
  s.push_back(char((v >> 24) & 0xFF));
}

inline void put_f32(std::string& s, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(s, u);
}

struct Cursor {
  const uint8_t* p;
  size_t n;
  size_t off = 0;
  const std::string& path;

  void need(size_t k) const {
    if (off + k > n)
      throw FileFormatError("truncated container: " + path);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(p[off]) | uint32_t(p[off + 1]) << 8 |
                 uint32_t(p[off + 2]) << 16 | uint32_t(p[off + 3]) << 24;
    off += 4;
    return v;
  }
  float f32() {
    const uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  std::string str(size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(p + off), len);
    off += len;
    return s;
  }
};

inline void put_config(std::string& s, const ConformerConfig& c) {
  put_u32(s, c.num_layers);
  put_u32(s, c.num_heads);
  put_u32(s, c.attn_dim);
  put_u32(s, c.ffn_dim);
  put_u32(s, c.conv_kernel);
  put_u32(s, c.max_chunk_len);
  put_u32(s, c.num_masks);
  put_u32(s, c.feature_dim);
  put_u32(s, c.num_bins);
  put_u32(s, c.cache_chunks);
}

inline ConformerConfig get_config(Cursor& c) {
  ConformerConfig out;
  out.num_layers = c.u32();
  out.num_heads = c.u32();
  out.attn_dim = c.u32();
  out.ffn_dim = c.u32();
  out.conv_kernel = c.u32();
  out.max_chunk_len = c.u32();
  out.num_masks = c.u32();
  out.feature_dim = c.u32();
  out.num_bins = c.u32();
  out.cache_chunks = c.u32();
  return out;
}

}  // namespace containerio

inline void write_container(const std::string& path, const char* magic,
                            const ConformerConfig& config,
                            const std::vector<RawTensor>& tensors) {
  std::string buf;
  buf.append(magic, 4);
  containerio::put_u32(buf, kWeightsVersion);
  containerio::put_config(buf, config);
  for (const auto& t : tensors) {
    containerio::put_u32(buf, uint32_t(t.name.size()));
    buf += t.name;
    containerio::put_u32(buf, uint32_t(t.shape.size()));
    size_t n = 1;
    for (int64_t e : t.shape) {
      containerio::put_u32(buf, uint32_t(e));
      n *= size_t(e);
    }
    if (n != t.data.size())
      throw InternalError("write_container: tensor " + t.name +
                          " data does not match its shape");
    for (float v : t.data) containerio::put_f32(buf, v);
  }
  containerio::put_u32(buf, crc32(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FileFormatError("cannot write " + path);
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw FileFormatError("short write to " + path);
}

struct Container {
  ConformerConfig config;
  std::vector<RawTensor> tensors;
};

inline Container read_container(const std::string& path, const char* magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileFormatError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 4 + 4 + 40 + 4)
    throw FileFormatError("file too small to be a weights container: " + path);

  const size_t body = bytes.size() - 4;
  uint32_t stored = uint32_t(bytes[body]) | uint32_t(bytes[body + 1]) << 8 |
                    uint32_t(bytes[body + 2]) << 16 |
                    uint32_t(bytes[body + 3]) << 24;
  if (crc32(bytes.data(), body) != stored)
    throw FileFormatError("CRC mismatch (corrupt or truncated file): " + path);

  containerio::Cursor c{bytes.data(), body, 0, path};
  const std::string got = c.str(4);
  if (got != std::string(magic, 4))
    throw FileFormatError("bad magic in " + path + ": expected '" +
                          std::string(magic, 4) + "', found '" + got + "'");
  const uint32_t version = c.u32();
  if (version != kWeightsVersion)
    throw FileFormatError("unsupported container version " +
                          std::to_string(version) + " in " + path);

  Container out;
  out.config = containerio::get_config(c);
  while (c.off < body) {
    RawTensor t;
    const uint32_t name_len = c.u32();
    t.name = c.str(name_len);
    const uint32_t rank = c.u32();
    if (rank > 8)
      throw FileFormatError("implausible tensor rank " + std::to_string(rank) +
                            " in " + path);
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      const uint32_t e = c.u32();
      if (e == 0)
        throw FileFormatError("zero extent in tensor " + t.name + " in " + path);
      t.shape.push_back(int64_t(e));
      n *= e;
    }
    c.need(4 * n);
    t.data.resize(n);
    for (size_t i = 0; i < n; ++i) t.data[i] = c.f32();
    out.tensors.push_back(std::move(t));
  }
  return out;
}

// ============================================================================
// Weights on top of the container
// ============================================================================

template <class Real>
void save_weights(const std::string& path, const ConformerWeights<Real>& w) {
  std::vector<RawTensor> tensors;
  tensors.reserve(w.params.order.size());
  for (const auto& name : w.params.order) {
    const auto& t = w.params.at(name);
    RawTensor raw;
    raw.name = name;
    raw.shape = t->shape;
    raw.data.reserve(t->data.size());
    for (Real v : t->data) raw.data.push_back(float(v));
    tensors.push_back(std::move(raw));
  }
  write_container(path, kWeightsMagic, w.config, tensors);
}

// Loads and validates against the canonical layout of the stored config.
// Nothing is returned unless every tensor matches, so a mismatch can never
// leave a half-initialized model behind.
template <class Real>
ConformerWeights<Real> load_weights(const std::string& path) {
  Container c = read_container(path, kWeightsMagic);
  c.config.validate();
  const auto expected = canonical_tensor_list(c.config);
  if (c.tensors.size() != expected.size())
    throw FileFormatError("weights file " + path + " holds " +
                          std::to_string(c.tensors.size()) + " tensors, " +
                          std::to_string(expected.size()) +
                          " expected for its config");
  ConformerWeights<Real> w;
  w.config = c.config;
  for (size_t i = 0; i < expected.size(); ++i) {
    const auto& def = expected[i];
    const auto& raw = c.tensors[i];
    if (raw.name != def.name)
      throw FileFormatError("weights file " + path + ": tensor " +
                            std::to_string(i) + " is '" + raw.name +
                            "', expected '" + def.name + "'");
    if (raw.shape != def.shape)
      throw ShapeError("tensor " + raw.name + " has shape " +
                       shape_to_string(raw.shape) + " but the config requires " +
                       shape_to_string(def.shape));
    auto t = w.params.add(def.name, def.shape, def.trainable);
    for (size_t j = 0; j < raw.data.size(); ++j)
      t->data[j] = Real(raw.data[j]);
  }
  return w;
}

// Convenience guard for callers that already know what config they expect.
template <class Real>
ConformerWeights<Real> load_weights_expect(const std::string& path,
                                           const ConformerConfig& expected) {
  auto w = load_weights<Real>(path);
  if (!(w.config == expected))
    throw ConfigError("weights file " + path +
                      " was trained with a different configuration");
  return w;
}

}  // namespace css
