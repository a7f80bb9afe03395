#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "css/conformer.hpp"
#include "css/weights_io.hpp"

namespace {

css::ConformerConfig small_config() {
  css::ConformerConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.attn_dim = 8;
  c.ffn_dim = 12;
  c.conv_kernel = 3;
  c.max_chunk_len = 4;
  c.feature_dim = 5;
  c.num_bins = 5;
  return c;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), std::streamsize(bytes.size()));
}

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("crc32 reference vector") {
  const char* s = "123456789";
  CHECK(css::crc32(s, 9) == 0xCBF43926u);
}

TEST_CASE("weights round-trip exactly, resave is byte-identical") {
  TempFile f1("wio_a.cssw"), f2("wio_b.cssw");
  auto w = css::init_weights<float>(small_config(), 99);
  css::save_weights(f1.path, w);

  auto r = css::load_weights<float>(f1.path);
  CHECK(r.config == w.config);
  REQUIRE(r.params.order == w.params.order);
  for (const auto& name : w.params.order) {
    const auto &a = w.params.at(name), &b = r.params.at(name);
    REQUIRE(a->shape == b->shape);
    CHECK(a->requires_grad == b->requires_grad);
    for (size_t i = 0; i < a->data.size(); ++i) CHECK(a->data[i] == b->data[i]);
  }

  css::save_weights(f2.path, r);
  CHECK(slurp(f1.path) == slurp(f2.path));
}

TEST_CASE("double-precision weights survive the float32 container") {
  TempFile f("wio_f64.cssw");
  auto w = css::init_weights<double>(small_config(), 5);
  css::save_weights(f.path, w);
  auto r = css::load_weights<double>(f.path);
  for (const auto& name : w.params.order) {
    const auto &a = w.params.at(name), &b = r.params.at(name);
    for (size_t i = 0; i < a->data.size(); ++i)
      CHECK(double(float(a->data[i])) == b->data[i]);
  }
}

TEST_CASE("a flipped byte is rejected by the CRC") {
  TempFile f("wio_corrupt.cssw");
  auto w = css::init_weights<float>(small_config(), 1);
  css::save_weights(f.path, w);
  auto bytes = slurp(f.path);
  bytes[bytes.size() / 2] ^= 0x40;
  spit(f.path, bytes);
  try {
    css::load_weights<float>(f.path);
    FAIL("expected FileFormatError");
  } catch (const css::FileFormatError& e) {
    CHECK(std::string(e.what()).find("CRC") != std::string::npos);
  }
}

TEST_CASE("a truncated file is rejected before any tensor loads") {
  TempFile f("wio_trunc.cssw");
  auto w = css::init_weights<float>(small_config(), 2);
  css::save_weights(f.path, w);
  auto bytes = slurp(f.path);
  bytes.resize(bytes.size() / 2);
  spit(f.path, bytes);
  CHECK_THROWS_AS(css::load_weights<float>(f.path), css::FileFormatError);

  bytes.resize(10);
  spit(f.path, bytes);
  CHECK_THROWS_AS(css::load_weights<float>(f.path), css::FileFormatError);
}

TEST_CASE("wrong magic is rejected") {
  TempFile f("wio_magic.cssw");
  auto cfg = small_config();
  css::write_container(f.path, css::kOptimizerMagic, cfg, {});
  try {
    css::load_weights<float>(f.path);
    FAIL("expected FileFormatError");
  } catch (const css::FileFormatError& e) {
    CHECK(std::string(e.what()).find("CSSW") != std::string::npos);
  }
}

TEST_CASE("a tensor whose shape contradicts the config is named") {
  TempFile f("wio_shape.cssw");
  auto cfg = small_config();
  // Well-formed container (valid CRC) whose first tensor has the wrong shape.
  std::vector<css::RawTensor> tensors;
  for (const auto& def : css::canonical_tensor_list(cfg)) {
    css::RawTensor t;
    t.name = def.name;
    t.shape = def.shape;
    if (def.name == "layers.0.attn.q.weight") t.shape = {4, 4};
    size_t n = 1;
    for (int64_t e : t.shape) n *= size_t(e);
    t.data.assign(n, 0.5f);
    tensors.push_back(std::move(t));
  }
  css::write_container(f.path, css::kWeightsMagic, cfg, tensors);
  try {
    css::load_weights<float>(f.path);
    FAIL("expected ShapeError");
  } catch (const css::ShapeError& e) {
    CHECK(std::string(e.what()).find("layers.0.attn.q.weight") !=
          std::string::npos);
  }
}

TEST_CASE("missing tensors are rejected") {
  TempFile f("wio_missing.cssw");
  auto cfg = small_config();
  auto defs = css::canonical_tensor_list(cfg);
  std::vector<css::RawTensor> tensors;
  for (size_t i = 0; i + 1 < defs.size(); ++i) {
    css::RawTensor t;
    t.name = defs[i].name;
    t.shape = defs[i].shape;
    size_t n = 1;
    for (int64_t e : t.shape) n *= size_t(e);
    t.data.assign(n, 0.0f);
    tensors.push_back(std::move(t));
  }
  css::write_container(f.path, css::kWeightsMagic, cfg, tensors);
  CHECK_THROWS_AS(css::load_weights<float>(f.path), css::FileFormatError);
}

TEST_CASE("config expectation guard") {
  TempFile f("wio_expect.cssw");
  auto w = css::init_weights<float>(small_config(), 3);
  css::save_weights(f.path, w);
  auto other = small_config();
  other.num_heads = 4;
  CHECK_THROWS_AS(css::load_weights_expect<float>(f.path, other),
                  css::ConfigError);
  CHECK_NOTHROW(css::load_weights_expect<float>(f.path, small_config()));
}

TEST_CASE("loaded weights drive the forward pass identically") {
  TempFile f("wio_forward.cssw");
  auto cfg = small_config();
  auto w = css::init_weights<float>(cfg, 77);
  css::save_weights(f.path, w);
  auto r = css::load_weights<float>(f.path);

  auto feat = css::tensor_zeros<float>({4, int64_t(cfg.feature_dim)});
  css::Rng rng(8);
  for (auto& v : feat->data) v = float(rng.gaussian());
  auto a = css::forward_masks<float>(nullptr, w, feat);
  auto b = css::forward_masks<float>(nullptr, r, feat);
  for (int s = 0; s < 3; ++s)
    for (size_t i = 0; i < a.masks[s]->data.size(); ++i)
      CHECK(a.masks[s]->data[i] == b.masks[s]->data[i]);
}
