#pragma once

// Conformer mask estimator.
//
// Block layout per layer (one layernorm per block, at the end):
//
//   zh  = z  + 1/2 * FFN1(z)
//   zp  = selfattn(zh) + zh
//   zpp = conv(zp) + zp
//   out = layernorm(zpp + 1/2 * FFN2(zpp))
//
// FFN(x)  = W2 * swish(W1 * x + b1) + b2
// conv(x) = pointwise(D -> 2D) -> GLU -> depthwise(K) -> batchnorm -> swish
//           -> pointwise(D -> D)
//
// Attention uses per-head relative-position embeddings: the score between
// query m and key n adds q_m . rel[n - m] before scaling, with a table of
// 2 * max_chunk_len - 1 offsets.  When chunks of cached keys/values from
// earlier windows are prepended, queries come only from the current chunk
// and offsets past the table edge clip to the most-negative entry.

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "css/autodiff.hpp"
#include "css/common.hpp"
#include "css/tensor.hpp"

namespace css {

struct ConformerConfig {
  uint32_t num_layers = 16;
  uint32_t num_heads = 4;
  uint32_t attn_dim = 256;
  uint32_t ffn_dim = 1024;
  uint32_t conv_kernel = 33;
  uint32_t max_chunk_len = 150;
  uint32_t num_masks = 3;  // two speakers and one noise mask
  uint32_t feature_dim = 257;
  uint32_t num_bins = 257;
  uint32_t cache_chunks = 0;  // history chunks the attention may keep

  void validate() const {
    if (num_layers < 1) throw ConfigError("config: num_layers must be >= 1");
    if (num_heads < 1) throw ConfigError("config: num_heads must be >= 1");
    if (attn_dim < 1 || attn_dim % num_heads != 0)
      throw ConfigError("config: attn_dim (" + std::to_string(attn_dim) +
                        ") must be a positive multiple of num_heads (" +
                        std::to_string(num_heads) + ")");
    if (ffn_dim < 1) throw ConfigError("config: ffn_dim must be >= 1");
    if (conv_kernel < 1 || conv_kernel % 2 == 0)
      throw ConfigError("config: conv_kernel must be odd, got " +
                        std::to_string(conv_kernel));
    if (max_chunk_len < 1)
      throw ConfigError("config: max_chunk_len must be >= 1");
    if (num_masks != 3)
      throw ConfigError(
          "config: num_masks must be 3 (two speakers plus noise), got " +
          std::to_string(num_masks));
    if (feature_dim < 1) throw ConfigError("config: feature_dim must be >= 1");
    if (num_bins < 1) throw ConfigError("config: num_bins must be >= 1");
  }

  uint32_t head_dim() const { return attn_dim / num_heads; }
  uint32_t pos_table_rows() const { return 2 * max_chunk_len - 1; }

  bool operator==(const ConformerConfig&) const = default;
};

// Small published presets.  The toy configuration is what the end-to-end
// training test and the default CLI use; base/large match the published
// model sizes.
inline ConformerConfig conformer_base_config() { return ConformerConfig{}; }

inline ConformerConfig conformer_large_config() {
  ConformerConfig c;
  c.num_layers = 18;
  c.num_heads = 8;
  c.attn_dim = 512;
  c.ffn_dim = 1024;
  return c;
}

inline ConformerConfig conformer_tiny_config() {
  ConformerConfig c;
  c.num_layers = 2;
  c.num_heads = 4;
  c.attn_dim = 64;
  c.ffn_dim = 128;
  return c;
}

// ============================================================================
// Parameter store
// ============================================================================

template <class Real>
struct ParamStore {
  std::vector<std::string> order;
  std::unordered_map<std::string, Var<Real>> by_name;

  Var<Real> add(const std::string& name, std::vector<int64_t> shape,
                bool trainable) {
    if (by_name.count(name))
      throw InternalError("ParamStore: duplicate tensor " + name);
    auto t = tensor_zeros<Real>(std::move(shape), trainable);
    order.push_back(name);
    by_name.emplace(name, t);
    return t;
  }

  const Var<Real>& at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw InternalError("ParamStore: missing tensor " + name);
    return it->second;
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& name : order) n += at(name)->numel();
    return n;
  }

  void zero_grads() {
    for (const auto& name : order) at(name)->zero_grad();
  }
};

// One row of the canonical tensor layout.  `fan_in` > 0 selects uniform
// init over (-1/sqrt(fan_in), 1/sqrt(fan_in)); otherwise `fill` is used.
struct TensorDef {
  std::string name;
  std::vector<int64_t> shape;
  bool trainable = true;
  int64_t fan_in = 0;
  double fill = 0.0;
};

// Single source of truth for tensor names, shapes, ordering, init, and the
// serialized file layout.
inline void for_each_tensor(const ConformerConfig& cfg,
                            const std::function<void(const TensorDef&)>& fn) {
  cfg.validate();
  const int64_t d = cfg.attn_dim;
  const int64_t ffn = cfg.ffn_dim;
  const int64_t dk = cfg.head_dim();
  const int64_t feat = cfg.feature_dim;
  const int64_t bins = cfg.num_bins;
  const int64_t k = cfg.conv_kernel;
  const int64_t pos_rows = cfg.pos_table_rows();

  auto linear = [&fn](const std::string& base, int64_t in, int64_t out) {
    fn({base + ".weight", {in, out}, true, in});
    fn({base + ".bias", {out}, true, in});
  };

  linear("in_proj", feat, d);
  for (uint32_t i = 0; i < cfg.num_layers; ++i) {
    const std::string L = "layers." + std::to_string(i) + ".";
    linear(L + "ffn1.w1", d, ffn);
    linear(L + "ffn1.w2", ffn, d);
    linear(L + "attn.q", d, d);
    linear(L + "attn.k", d, d);
    linear(L + "attn.v", d, d);
    linear(L + "attn.out", d, d);
    for (uint32_t h = 0; h < cfg.num_heads; ++h)
      fn({L + "attn.pos.h" + std::to_string(h), {pos_rows, dk}, true, 0, 0.0});
    linear(L + "conv.pw1", d, 2 * d);
    fn({L + "conv.dw.weight", {k, d}, true, k});
    fn({L + "conv.bn.gamma", {d}, true, 0, 1.0});
    fn({L + "conv.bn.beta", {d}, true, 0, 0.0});
    fn({L + "conv.bn.running_mean", {d}, false, 0, 0.0});
    fn({L + "conv.bn.running_var", {d}, false, 0, 1.0});
    linear(L + "conv.pw2", d, d);
    linear(L + "ffn2.w1", d, ffn);
    linear(L + "ffn2.w2", ffn, d);
    fn({L + "norm.gain", {d}, true, 0, 1.0});
    fn({L + "norm.bias", {d}, true, 0, 0.0});
  }
  for (uint32_t s = 0; s < cfg.num_masks; ++s)
    linear("head." + std::to_string(s), d, bins);
}

inline std::vector<TensorDef> canonical_tensor_list(const ConformerConfig& cfg) {
  std::vector<TensorDef> out;
  for_each_tensor(cfg, [&out](const TensorDef& def) { out.push_back(def); });
  return out;
}

template <class Real>
struct ConformerWeights {
  ConformerConfig config;
  ParamStore<Real> params;
};

// Deterministic init: tensors are created and drawn in canonical order from
// a single seeded stream, so equal seeds give bit-identical weights.
template <class Real>
ConformerWeights<Real> init_weights(const ConformerConfig& cfg, uint64_t seed) {
  ConformerWeights<Real> w;
  w.config = cfg;
  Rng rng(hash_mix(seed, 0x57454947));  // namespaced away from data draws
  for_each_tensor(cfg, [&](const TensorDef& def) {
    auto t = w.params.add(def.name, def.shape, def.trainable);
    if (def.fan_in > 0) {
      const double bound = 1.0 / std::sqrt(double(def.fan_in));
      for (auto& v : t->data) v = Real(rng.uniform(-bound, bound));
    } else if (def.fill != 0.0) {
      for (auto& v : t->data) v = Real(def.fill);
    }
  });
  return w;
}

// Closed-form element count over the canonical layout (batchnorm running
// stats included, since they are part of the stored model).
inline int64_t count_parameters(const ConformerConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.attn_dim, ffn = cfg.ffn_dim, k = cfg.conv_kernel;
  const int64_t feat = cfg.feature_dim, bins = cfg.num_bins;
  const int64_t pos = int64_t(cfg.pos_table_rows()) * cfg.head_dim() *
                      cfg.num_heads;
  const int64_t per_layer = 2 * (d * ffn + ffn + ffn * d + d)  // two FFNs
                            + 4 * (d * d + d)                  // q, k, v, out
                            + pos                              // rel tables
                            + (d * 2 * d + 2 * d)              // conv pw1
                            + k * d                            // conv dw
                            + 4 * d                            // bn params+stats
                            + (d * d + d)                      // conv pw2
                            + 2 * d;                           // layernorm
  return feat * d + d + int64_t(cfg.num_layers) * per_layer +
         int64_t(cfg.num_masks) * (d * bins + bins);
}

// ============================================================================
// Attention cache
// ============================================================================

// Per-layer FIFO of full-width key/value blocks from earlier chunks.
// Eviction is whole chunks, oldest first.  The cache stores values only;
// cached activations never carry gradients.
template <class Real>
class AttentionCache {
 public:
  explicit AttentionCache(const ConformerConfig& cfg)
      : capacity_chunks_(cfg.cache_chunks),
        max_chunk_len_(cfg.max_chunk_len),
        layers_(cfg.num_layers) {}

  struct Entry {
    Tensor<Real> k, v;
  };

  int64_t capacity_chunks() const { return capacity_chunks_; }

  int64_t total_frames(int64_t layer) const {
    int64_t n = 0;
    for (const auto& e : layer_at(layer)) n += e.k.shape[0];
    return n;
  }

  const std::deque<Entry>& chunks(int64_t layer) const {
    return layer_at(layer);
  }

  void push(int64_t layer, const Tensor<Real>& k, const Tensor<Real>& v) {
    auto& q = layer_at(layer);
    q.push_back(Entry{k, v});
    while (int64_t(q.size()) > capacity_chunks_) q.pop_front();
  }

  // Guards hand-assembled caches; push() keeps the invariant on its own.
  void validate() const {
    for (size_t l = 0; l < layers_.size(); ++l) {
      const int64_t frames = total_frames(int64_t(l));
      if (frames > capacity_chunks_ * max_chunk_len_)
        throw CacheError("attention cache for layer " + std::to_string(l) +
                         " holds " + std::to_string(frames) +
                         " frames, capacity is " +
                         std::to_string(capacity_chunks_ * max_chunk_len_));
    }
  }

  void clear() {
    for (auto& q : layers_) q.clear();
  }

 private:
  const std::deque<Entry>& layer_at(int64_t layer) const {
    if (layer < 0 || layer >= int64_t(layers_.size()))
      throw InternalError("AttentionCache: layer index out of range");
    return layers_[size_t(layer)];
  }
  std::deque<Entry>& layer_at(int64_t layer) {
    if (layer < 0 || layer >= int64_t(layers_.size()))
      throw InternalError("AttentionCache: layer index out of range");
    return layers_[size_t(layer)];
  }

  int64_t capacity_chunks_;
  int64_t max_chunk_len_;
  std::vector<std::deque<Entry>> layers_;
};

// ============================================================================
// Forward pass
// ============================================================================

template <class Real>
struct LayerParams {
  Var<Real> ffn1_w1, ffn1_b1, ffn1_w2, ffn1_b2;
  Var<Real> q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
  std::vector<Var<Real>> pos;  // per head
  Var<Real> pw1_w, pw1_b, dw_w, bn_gamma, bn_beta, bn_mean, bn_var;
  Var<Real> pw2_w, pw2_b;
  Var<Real> ffn2_w1, ffn2_b1, ffn2_w2, ffn2_b2;
  Var<Real> norm_gain, norm_bias;
};

template <class Real>
LayerParams<Real> layer_params(const ConformerWeights<Real>& w, int64_t i) {
  const std::string L = "layers." + std::to_string(i) + ".";
  const auto& p = w.params;
  LayerParams<Real> lp;
  lp.ffn1_w1 = p.at(L + "ffn1.w1.weight");
  lp.ffn1_b1 = p.at(L + "ffn1.w1.bias");
  lp.ffn1_w2 = p.at(L + "ffn1.w2.weight");
  lp.ffn1_b2 = p.at(L + "ffn1.w2.bias");
  lp.q_w = p.at(L + "attn.q.weight");
  lp.q_b = p.at(L + "attn.q.bias");
  lp.k_w = p.at(L + "attn.k.weight");
  lp.k_b = p.at(L + "attn.k.bias");
  lp.v_w = p.at(L + "attn.v.weight");
  lp.v_b = p.at(L + "attn.v.bias");
  lp.out_w = p.at(L + "attn.out.weight");
  lp.out_b = p.at(L + "attn.out.bias");
  for (uint32_t h = 0; h < w.config.num_heads; ++h)
    lp.pos.push_back(p.at(L + "attn.pos.h" + std::to_string(h)));
  lp.pw1_w = p.at(L + "conv.pw1.weight");
  lp.pw1_b = p.at(L + "conv.pw1.bias");
  lp.dw_w = p.at(L + "conv.dw.weight");
  lp.bn_gamma = p.at(L + "conv.bn.gamma");
  lp.bn_beta = p.at(L + "conv.bn.beta");
  lp.bn_mean = p.at(L + "conv.bn.running_mean");
  lp.bn_var = p.at(L + "conv.bn.running_var");
  lp.pw2_w = p.at(L + "conv.pw2.weight");
  lp.pw2_b = p.at(L + "conv.pw2.bias");
  lp.ffn2_w1 = p.at(L + "ffn2.w1.weight");
  lp.ffn2_b1 = p.at(L + "ffn2.w1.bias");
  lp.ffn2_w2 = p.at(L + "ffn2.w2.weight");
  lp.ffn2_b2 = p.at(L + "ffn2.w2.bias");
  lp.norm_gain = p.at(L + "norm.gain");
  lp.norm_bias = p.at(L + "norm.bias");
  return lp;
}

namespace detail {

template <class Real>
Var<Real> ffn(Tape<Real>* tape, const Var<Real>& x, const Var<Real>& w1,
              const Var<Real>& b1, const Var<Real>& w2, const Var<Real>& b2) {
  auto h = swish(tape, add_bias(tape, matmul(tape, x, w1), b1));
  return add_bias(tape, matmul(tape, h, w2), b2);
}

}  // namespace detail

// Multi-head self attention with relative positions and an optional cache of
// previous chunks.  `zin` is [T x D].  With a cache the keys and values of
// earlier chunks are prepended (queries stay on the current chunk) and the
// current chunk's keys/values are pushed afterwards for the next call.
template <class Real>
Var<Real> relative_attention(Tape<Real>* tape, const Var<Real>& zin,
                             const LayerParams<Real>& lp,
                             const ConformerConfig& cfg,
                             AttentionCache<Real>* cache, int64_t layer_idx) {
  const int64_t dk = cfg.head_dim();
  auto q = add_bias(tape, matmul(tape, zin, lp.q_w), lp.q_b);
  auto k_cur = add_bias(tape, matmul(tape, zin, lp.k_w), lp.k_b);
  auto v_cur = add_bias(tape, matmul(tape, zin, lp.v_w), lp.v_b);

  Var<Real> k_full = k_cur, v_full = v_cur;
  if (cache && cache->capacity_chunks() > 0) {
    if (tape)
      throw InternalError(
          "relative_attention: the chunk cache is inference-only");
    cache->validate();
    std::vector<const Tensor<Real>*> kparts, vparts;
    for (const auto& e : cache->chunks(layer_idx)) {
      kparts.push_back(&e.k);
      vparts.push_back(&e.v);
    }
    if (!kparts.empty()) {
      kparts.push_back(k_cur.get());
      vparts.push_back(v_cur.get());
      k_full = concat_rows_values<Real>(kparts);
      v_full = concat_rows_values<Real>(vparts);
    }
    cache->push(layer_idx, *k_cur, *v_cur);
  }

  std::vector<Var<Real>> heads;
  heads.reserve(cfg.num_heads);
  for (uint32_t h = 0; h < cfg.num_heads; ++h) {
    auto qh = slice_lastdim(tape, q, h * dk, dk);
    auto kh = slice_lastdim(tape, k_full, h * dk, dk);
    auto vh = slice_lastdim(tape, v_full, h * dk, dk);
    auto scores = relative_scores(tape, qh, kh, lp.pos[h], cfg.max_chunk_len);
    auto attn = softmax_lastdim(tape, scores);
    heads.push_back(matmul(tape, attn, vh));
  }
  auto merged = concat_lastdim(tape, heads);
  return add_bias(tape, matmul(tape, merged, lp.out_w), lp.out_b);
}

template <class Real>
Var<Real> conv_module(Tape<Real>* tape, const Var<Real>& x,
                      const LayerParams<Real>& lp, bool training) {
  auto gated = glu(tape, add_bias(tape, matmul(tape, x, lp.pw1_w), lp.pw1_b));
  auto conv = conv1d_depthwise(tape, gated, lp.dw_w);
  auto normed = batchnorm_time(tape, conv, lp.bn_gamma, lp.bn_beta, lp.bn_mean,
                               lp.bn_var, training);
  return add_bias(tape, matmul(tape, swish(tape, normed), lp.pw2_w), lp.pw2_b);
}

template <class Real>
Var<Real> conformer_block(Tape<Real>* tape, const Var<Real>& z,
                          const LayerParams<Real>& lp,
                          const ConformerConfig& cfg,
                          AttentionCache<Real>* cache, int64_t layer_idx,
                          bool training) {
  auto zh = add(tape, z,
                scale(tape,
                      detail::ffn(tape, z, lp.ffn1_w1, lp.ffn1_b1, lp.ffn1_w2,
                                  lp.ffn1_b2),
                      Real(0.5)));
  auto zp =
      add(tape, relative_attention(tape, zh, lp, cfg, cache, layer_idx), zh);
  auto zpp = add(tape, conv_module(tape, zp, lp, training), zp);
  auto pre = add(tape, zpp,
                 scale(tape,
                       detail::ffn(tape, zpp, lp.ffn2_w1, lp.ffn2_b1,
                                   lp.ffn2_w2, lp.ffn2_b2),
                       Real(0.5)));
  return layernorm(tape, pre, lp.norm_gain, lp.norm_bias);
}

template <class Real>
struct MaskOutput {
  std::array<Var<Real>, 3> masks;  // [T x bins] each: speaker 1, 2, noise
  Var<Real> trunk;                 // final hidden states, [T x D]
};

template <class Real>
MaskOutput<Real> forward_masks(Tape<Real>* tape,
                               const ConformerWeights<Real>& w,
                               const Var<Real>& features,
                               AttentionCache<Real>* cache = nullptr,
                               bool training = false) {
  const ConformerConfig& cfg = w.config;
  if (features->rank() != 2 || features->cols() != int64_t(cfg.feature_dim))
    throw ShapeError("forward_masks: features must be [T x " +
                     std::to_string(cfg.feature_dim) + "], got " +
                     shape_to_string(features->shape));
  if (features->rows() > int64_t(cfg.max_chunk_len))
    throw ChunkError("forward_masks: chunk of " +
                     std::to_string(features->rows()) +
                     " frames exceeds max_chunk_len " +
                     std::to_string(cfg.max_chunk_len));

  auto h = add_bias(tape, matmul(tape, features, w.params.at("in_proj.weight")),
                    w.params.at("in_proj.bias"));
  for (uint32_t i = 0; i < cfg.num_layers; ++i) {
    auto lp = layer_params(w, i);
    h = conformer_block(tape, h, lp, cfg, cache, i, training);
  }

  MaskOutput<Real> out;
  out.trunk = h;
  for (uint32_t s = 0; s < cfg.num_masks; ++s) {
    const std::string base = "head." + std::to_string(s);
    auto logits = add_bias(tape, matmul(tape, h, w.params.at(base + ".weight")),
                           w.params.at(base + ".bias"));
    out.masks[s] = sigmoid(tape, logits);
  }
  return out;
}

}  // namespace css
