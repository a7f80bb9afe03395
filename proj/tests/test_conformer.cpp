#include <catch2/catch_amalgamated.hpp>

#include "css/conformer.hpp"
#include "css/features.hpp"
#include "oracle_utils.hpp"

using css::AttentionCache;
using css::ConformerConfig;
using css::ConformerWeights;
using css::Tape;
using css::Var;

namespace {

ConformerConfig micro_config() {
  ConformerConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.attn_dim = 16;
  c.ffn_dim = 24;
  c.conv_kernel = 5;
  c.max_chunk_len = 8;
  c.feature_dim = 11;
  c.num_bins = 9;
  return c;
}

Var<double> random_features(const ConformerConfig& cfg, int64_t frames,
                            uint64_t seed) {
  css::Rng rng(seed);
  auto t = css::tensor_zeros<double>({frames, int64_t(cfg.feature_dim)});
  for (auto& v : t->data) v = rng.gaussian();
  return t;
}

// Fully independent multi-head attention with relative positions: explicit
// loops, no shared code with the library's fast path.  Computes the outputs
// of the last `t_query` rows of `z` attending over all rows of `z`.
std::vector<double> naive_attention_last_rows(
    const ConformerWeights<double>& w, int64_t layer, const Var<double>& z,
    int64_t t_query) {
  const auto& cfg = w.config;
  const int64_t total = z->rows(), d = cfg.attn_dim, dk = cfg.head_dim();
  const int64_t m_len = cfg.max_chunk_len;
  const std::string L = "layers." + std::to_string(layer) + ".";
  auto wq = w.params.at(L + "attn.q.weight"), bq = w.params.at(L + "attn.q.bias");
  auto wk = w.params.at(L + "attn.k.weight"), bk = w.params.at(L + "attn.k.bias");
  auto wv = w.params.at(L + "attn.v.weight"), bv = w.params.at(L + "attn.v.bias");
  auto wo = w.params.at(L + "attn.out.weight"),
       bo = w.params.at(L + "attn.out.bias");

  auto project = [&](const Var<double>& mat, const Var<double>& bias) {
    std::vector<double> out(size_t(total * d), 0.0);
    for (int64_t t = 0; t < total; ++t)
      for (int64_t j = 0; j < d; ++j) {
        double s = bias->data[j];
        for (int64_t i = 0; i < d; ++i)
          s += z->data[t * d + i] * mat->data[i * d + j];
        out[size_t(t * d + j)] = s;
      }
    return out;
  };
  auto q = project(wq, bq), k = project(wk, bk), v = project(wv, bv);

  std::vector<double> merged(size_t(t_query * d), 0.0);
  for (int64_t h = 0; h < cfg.num_heads; ++h) {
    const auto& rel = w.params.at(L + "attn.pos.h" + std::to_string(h));
    for (int64_t qi = 0; qi < t_query; ++qi) {
      const int64_t qpos = total - t_query + qi;
      std::vector<double> scores(size_t(total), 0.0);
      for (int64_t n = 0; n < total; ++n) {
        int64_t off = n - qpos;
        if (off < -(m_len - 1)) off = -(m_len - 1);
        if (off > m_len - 1) off = m_len - 1;
        const int64_t row = off + m_len - 1;
        double s = 0;
        for (int64_t c = 0; c < dk; ++c)
          s += q[size_t(qpos * d + h * dk + c)] *
               (k[size_t(n * d + h * dk + c)] + rel->data[row * dk + c]);
        scores[size_t(n)] = s / std::sqrt(double(dk));
      }
      double mx = scores[0];
      for (double s : scores) mx = std::max(mx, s);
      double denom = 0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        denom += s;
      }
      for (auto& s : scores) s /= denom;
      for (int64_t c = 0; c < dk; ++c) {
        double acc = 0;
        for (int64_t n = 0; n < total; ++n)
          acc += scores[size_t(n)] * v[size_t(n * d + h * dk + c)];
        merged[size_t(qi * d + h * dk + c)] = acc;
      }
    }
  }

  std::vector<double> out(size_t(t_query * d));
  for (int64_t t = 0; t < t_query; ++t)
    for (int64_t j = 0; j < d; ++j) {
      double s = bo->data[j];
      for (int64_t i = 0; i < d; ++i)
        s += merged[size_t(t * d + i)] * wo->data[i * d + j];
      out[size_t(t * d + j)] = s;
    }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  ConformerConfig c = micro_config();
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.conv_kernel = 4;
  CHECK_THROWS_AS(bad.validate(), css::ConfigError);
  bad = c;
  bad.attn_dim = 15;  // not divisible by 2 heads
  CHECK_THROWS_AS(bad.validate(), css::ConfigError);
  bad = c;
  bad.num_masks = 2;
  CHECK_THROWS_AS(bad.validate(), css::ConfigError);
  bad = c;
  bad.num_layers = 0;
  CHECK_THROWS_AS(bad.validate(), css::ConfigError);
}

TEST_CASE("init is deterministic in the seed") {
  auto a = css::init_weights<double>(micro_config(), 123);
  auto b = css::init_weights<double>(micro_config(), 123);
  auto c = css::init_weights<double>(micro_config(), 124);
  REQUIRE(a.params.order == b.params.order);
  bool any_diff_seed_differs = false;
  for (const auto& name : a.params.order) {
    const auto &ta = a.params.at(name), &tb = b.params.at(name),
               &tc = c.params.at(name);
    REQUIRE(ta->shape == tb->shape);
    for (size_t i = 0; i < ta->data.size(); ++i) {
      CHECK(ta->data[i] == tb->data[i]);
      if (ta->data[i] != tc->data[i]) any_diff_seed_differs = true;
    }
  }
  CHECK(any_diff_seed_differs);
}

TEST_CASE("layernorm gains start at one, position tables at zero") {
  auto w = css::init_weights<double>(micro_config(), 7);
  for (double v : w.params.at("layers.0.norm.gain")->data) CHECK(v == 1.0);
  for (double v : w.params.at("layers.0.norm.bias")->data) CHECK(v == 0.0);
  for (double v : w.params.at("layers.0.attn.pos.h0")->data) CHECK(v == 0.0);
  for (double v : w.params.at("layers.1.conv.bn.running_var")->data)
    CHECK(v == 1.0);
  CHECK_FALSE(w.params.at("layers.0.conv.bn.running_mean")->requires_grad);
  CHECK(w.params.at("layers.0.conv.bn.gamma")->requires_grad);
}

TEST_CASE("count_parameters matches brute-force enumeration") {
  for (auto cfg : {micro_config(), css::conformer_tiny_config(),
                   css::conformer_base_config()}) {
    int64_t enumerated = 0;
    for (const auto& def : css::canonical_tensor_list(cfg)) {
      int64_t n = 1;
      for (int64_t e : def.shape) n *= e;
      enumerated += n;
    }
    CHECK(css::count_parameters(cfg) == enumerated);

    auto w = css::init_weights<float>(cfg, 1);
    CHECK(w.params.total_elements() == enumerated);
  }
}

TEST_CASE("adding one ffn unit grows the count by exactly 2*(attn_dim)+... ") {
  // Growing ffn_dim by one adds 2 * (2 * attn_dim + 1) elements: each of the
  // two FFNs gains one row of W2, one column of W1, and one bias entry.
  auto cfg = micro_config();
  auto grown = cfg;
  grown.ffn_dim += 1;
  const int64_t delta =
      css::count_parameters(grown) - css::count_parameters(cfg);
  CHECK(delta == int64_t(cfg.num_layers) * 2 * (2 * int64_t(cfg.attn_dim) + 1));
}

TEST_CASE("published model sizes are reproduced by the macaron/attention core") {
  // The published totals for the 16x(256, 1024) and 18x(512, 1024) models
  // count the FFN pair, the attention projections, and the layernorm; the
  // convolution module and the relative-position tables come on top.  The
  // core reproduces the published numbers to 0.5%, the full models sit
  // within 30%.
  auto check = [](const ConformerConfig& cfg, double published) {
    const int64_t d = cfg.attn_dim, k = cfg.conv_kernel;
    const int64_t conv = d * 2 * d + 2 * d + k * d + 4 * d + d * d + d;
    const int64_t pos =
        int64_t(cfg.pos_table_rows()) * cfg.head_dim() * cfg.num_heads;
    const int64_t extras = int64_t(cfg.num_layers) * (conv + pos);
    const double core = double(css::count_parameters(cfg) - extras);
    CHECK(std::abs(core / published - 1.0) < 0.005);
    CHECK(std::abs(double(css::count_parameters(cfg)) / published - 1.0) < 0.30);
  };
  ConformerConfig base = css::conformer_base_config();
  base.feature_dim = uint32_t(css::feature_dim_for(257, 7));
  check(base, 22.07e6);
  ConformerConfig large = css::conformer_large_config();
  large.feature_dim = uint32_t(css::feature_dim_for(257, 7));
  check(large, 58.72e6);
}

TEST_CASE("forward produces three masks in (0, 1) with the right shape") {
  auto cfg = micro_config();
  auto w = css::init_weights<double>(cfg, 3);
  auto feat = random_features(cfg, 6, 9);
  auto out = css::forward_masks<double>(nullptr, w, feat);
  for (const auto& m : out.masks) {
    REQUIRE(m->shape == std::vector<int64_t>{6, int64_t(cfg.num_bins)});
    for (double v : m->data) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  CHECK(out.trunk->shape == std::vector<int64_t>{6, int64_t(cfg.attn_dim)});
}

TEST_CASE("forward rejects bad shapes and oversized chunks") {
  auto cfg = micro_config();
  auto w = css::init_weights<double>(cfg, 3);
  auto wrong = random_features(cfg, 6, 9);
  wrong->shape = {6, 11};
  auto narrow = css::tensor_zeros<double>({6, 10});
  CHECK_THROWS_AS(css::forward_masks<double>(nullptr, w, narrow),
                  css::ShapeError);
  auto long_chunk = random_features(cfg, 9, 10);  // max_chunk_len is 8
  CHECK_THROWS_AS(css::forward_masks<double>(nullptr, w, long_chunk),
                  css::ChunkError);
}

TEST_CASE("forward is bit-deterministic") {
  auto cfg = micro_config();
  auto w = css::init_weights<double>(cfg, 5);
  auto feat = random_features(cfg, 8, 11);
  auto a = css::forward_masks<double>(nullptr, w, feat);
  auto b = css::forward_masks<double>(nullptr, w, feat);
  for (int s = 0; s < 3; ++s)
    for (size_t i = 0; i < a.masks[s]->data.size(); ++i)
      CHECK(a.masks[s]->data[i] == b.masks[s]->data[i]);
}

TEST_CASE("single-frame attention returns the projected value row") {
  auto cfg = micro_config();
  auto w = css::init_weights<double>(cfg, 6);
  auto lp = css::layer_params(w, 0);
  css::Rng rng(12);
  auto z = css::tensor_zeros<double>({1, int64_t(cfg.attn_dim)});
  for (auto& v : z->data) v = rng.gaussian();

  auto got = css::relative_attention<double>(nullptr, z, lp, cfg, nullptr, 0);

  // Softmax over one key is 1 regardless of scores, so the output must be
  // out_proj(value_proj(z)).
  auto v = css::add_bias<double>(nullptr,
                                 css::matmul<double>(nullptr, z, lp.v_w), lp.v_b);
  auto expect = css::add_bias<double>(
      nullptr, css::matmul<double>(nullptr, v, lp.out_w), lp.out_b);
  for (size_t i = 0; i < got->data.size(); ++i)
    CHECK(got->data[i] == Catch::Approx(expect->data[i]).margin(1e-12));
}

TEST_CASE("zero queries and zero position tables average the values") {
  auto cfg = micro_config();
  auto w = css::init_weights<double>(cfg, 7);
  // Zero the query path; position tables are already zero at init.
  for (auto& v : w.params.at("layers.0.attn.q.weight")->data) v = 0.0;
  for (auto& v : w.params.at("layers.0.attn.q.bias")->data) v = 0.0;
  auto lp = css::layer_params(w, 0);

  const int64_t t_len = 5;
  css::Rng rng(13);
  auto z = css::tensor_zeros<double>({t_len, int64_t(cfg.attn_dim)});
  for (auto& v : z->data) v = rng.gaussian();

  auto got = css::relative_attention<double>(nullptr, z, lp, cfg, nullptr, 0);
  auto v = css::add_bias<double>(nullptr,
                                 css::matmul<double>(nullptr, z, lp.v_w), lp.v_b);
  // Uniform attention: every output row is out_proj(mean of value rows).
  auto mean_v = css::tensor_zeros<double>({1, int64_t(cfg.attn_dim)});
  for (int64_t t = 0; t < t_len; ++t)
    for (int64_t j = 0; j < int64_t(cfg.attn_dim); ++j)
      mean_v->data[j] += v->data[t * cfg.attn_dim + j] / double(t_len);
  auto expect = css::add_bias<double>(
      nullptr, css::matmul<double>(nullptr, mean_v, lp.out_w), lp.out_b);
  for (int64_t t = 0; t < t_len; ++t)
    for (int64_t j = 0; j < int64_t(cfg.attn_dim); ++j)
      CHECK(got->data[t * cfg.attn_dim + j] ==
            Catch::Approx(expect->data[j]).margin(1e-10));
}

TEST_CASE("attention rows are stochastic after softmax") {
  css::Rng rng(14);
  const int64_t t_len = 7, dk = 4, m = 7;
  auto q = oracle::randn_tensor({t_len, dk}, rng, 1.0, false);
  auto k = oracle::randn_tensor({t_len, dk}, rng, 1.0, false);
  auto rel = oracle::randn_tensor({2 * m - 1, dk}, rng, 1.0, false);
  auto attn = css::softmax_lastdim<double>(
      nullptr, css::relative_scores<double>(nullptr, q, k, rel, m));
  for (int64_t t = 0; t < t_len; ++t) {
    double s = 0;
    for (int64_t n = 0; n < t_len; ++n) s += attn->data[t * t_len + n];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("cached attention equals the naive oracle over the concatenation") {
  auto cfg = micro_config();
  cfg.cache_chunks = 2;
  auto w = css::init_weights<double>(cfg, 8);
  // Nonzero position tables so the relative term is actually exercised.
  {
    css::Rng rng(15);
    for (uint32_t h = 0; h < cfg.num_heads; ++h)
      for (auto& v : w.params.at("layers.0.attn.pos.h" + std::to_string(h))->data)
        v = 0.3 * rng.gaussian();
  }
  auto lp = css::layer_params(w, 0);

  const int64_t t_chunk = cfg.max_chunk_len;
  css::Rng rng(16);
  std::vector<Var<double>> chunks;
  for (int i = 0; i < 3; ++i) {
    auto z = css::tensor_zeros<double>({t_chunk, int64_t(cfg.attn_dim)});
    for (auto& v : z->data) v = rng.gaussian();
    chunks.push_back(z);
  }

  AttentionCache<double> cache(cfg);
  std::vector<Var<double>> cached_out;
  for (const auto& z : chunks)
    cached_out.push_back(
        css::relative_attention<double>(nullptr, z, lp, cfg, &cache, 0));

  // Oracle: all chunks concatenated, last-chunk queries, explicit loops.
  for (int upto = 1; upto <= 3; ++upto) {
    int64_t total = t_chunk * upto;
    auto concat = css::tensor_zeros<double>({total, int64_t(cfg.attn_dim)});
    for (int i = 0; i < upto; ++i)
      std::copy(chunks[size_t(i)]->data.begin(), chunks[size_t(i)]->data.end(),
                concat->data.begin() + i * t_chunk * cfg.attn_dim);
    auto expect = naive_attention_last_rows(w, 0, concat, t_chunk);
    const auto& got = cached_out[size_t(upto - 1)]->data;
    REQUIRE(got.size() == expect.size());
    double worst = 0;
    for (size_t i = 0; i < got.size(); ++i)
      worst = std::max(worst, std::abs(got[i] - expect[i]));
    INFO("chunks seen: " << upto);
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("cache evicts whole chunks beyond its capacity") {
  auto cfg = micro_config();
  cfg.cache_chunks = 2;
  AttentionCache<double> cache(cfg);
  auto mk = [&](double fill) {
    css::Tensor<double> t;
    t.shape = {int64_t(cfg.max_chunk_len), int64_t(cfg.attn_dim)};
    t.data.assign(size_t(t.numel()), fill);
    return t;
  };
  for (int i = 0; i < 4; ++i) cache.push(0, mk(double(i)), mk(double(i)));
  CHECK(cache.total_frames(0) == 2 * cfg.max_chunk_len);
  // Oldest chunks are gone: the front entry holds the fill value 2.
  CHECK(cache.chunks(0).front().k.data[0] == 2.0);
  CHECK_NOTHROW(cache.validate());
}

TEST_CASE("an over-capacity cache raises a cache error in attention") {
  auto cfg = micro_config();
  cfg.cache_chunks = 1;
  auto w = css::init_weights<double>(cfg, 9);
  auto lp = css::layer_params(w, 0);
  AttentionCache<double> cache(cfg);
  css::Tensor<double> oversized;
  oversized.shape = {int64_t(cfg.max_chunk_len) + 1, int64_t(cfg.attn_dim)};
  oversized.data.assign(size_t(oversized.numel()), 0.1);
  cache.push(0, oversized, oversized);

  auto z = random_features(micro_config(), 4, 17);
  auto zin = css::tensor_zeros<double>({4, int64_t(cfg.attn_dim)});
  for (auto& v : zin->data) v = 0.1;
  CHECK_THROWS_AS(
      css::relative_attention<double>(nullptr, zin, lp, cfg, &cache, 0),
      css::CacheError);
  (void)z;
}

TEST_CASE("cache requires inference mode") {
  auto cfg = micro_config();
  cfg.cache_chunks = 1;
  auto w = css::init_weights<double>(cfg, 10);
  auto lp = css::layer_params(w, 0);
  AttentionCache<double> cache(cfg);
  auto zin = css::tensor_zeros<double>({4, int64_t(cfg.attn_dim)}, false);
  for (auto& v : zin->data) v = 0.2;
  // Mark something as requiring grad so the tape is live.
  lp.q_w->set_requires_grad(true);
  Tape<double> tape;
  CHECK_THROWS_AS(
      css::relative_attention<double>(&tape, zin, lp, cfg, &cache, 0),
      css::InternalError);
}

TEST_CASE("head biases steer the masks monotonically") {
  auto cfg = micro_config();
  auto w = css::init_weights<double>(cfg, 11);
  for (uint32_t s = 0; s < 3; ++s) {
    auto wt = w.params.at("head." + std::to_string(s) + ".weight");
    for (auto& v : wt->data) v = 0.0;
  }
  auto set_bias = [&](int head, double v) {
    for (auto& b : w.params.at("head." + std::to_string(head) + ".bias")->data)
      b = v;
  };
  set_bias(0, 10.0);
  set_bias(1, -10.0);
  set_bias(2, 0.0);

  auto feat = random_features(cfg, 6, 18);
  auto out = css::forward_masks<double>(nullptr, w, feat);
  for (double v : out.masks[0]->data) CHECK(v > 0.99);
  for (double v : out.masks[1]->data) CHECK(v < 0.01);
  for (double v : out.masks[2]->data) CHECK(v == Catch::Approx(0.5));

  // Monotone: nudging a bias up never lowers its mask.
  set_bias(1, -5.0);
  auto out2 = css::forward_masks<double>(nullptr, w, feat);
  for (size_t i = 0; i < out2.masks[1]->data.size(); ++i)
    CHECK(out2.masks[1]->data[i] > out.masks[1]->data[i]);
}

TEST_CASE("fd: gradients flow through a full tiny model") {
  ConformerConfig cfg = micro_config();
  cfg.num_layers = 1;
  auto w = css::init_weights<double>(cfg, 12);
  auto feat = random_features(cfg, 5, 19);
  css::Rng rng(20);
  auto mag = oracle::randn_tensor({5, int64_t(cfg.num_bins)}, rng, 1.0, false);
  auto ref = oracle::randn_tensor({5, int64_t(cfg.num_bins)}, rng, 1.0, false);

  std::vector<Var<double>> leaves;
  for (const auto& name : w.params.order) {
    auto t = w.params.at(name);
    if (t->requires_grad) leaves.push_back(t);
  }

  auto rep = oracle::fd_check(
      leaves,
      [&](Tape<double>* tape) {
        // Fresh running stats per probe; training-mode batchnorm.
        for (uint32_t i = 0; i < cfg.num_layers; ++i) {
          const std::string L = "layers." + std::to_string(i) + ".conv.bn.";
          auto rm = w.params.at(L + "running_mean");
          auto rv = w.params.at(L + "running_var");
          for (auto& v : rm->data) v = 0.0;
          for (auto& v : rv->data) v = 1.0;
        }
        auto out = css::forward_masks<double>(tape, w, feat, nullptr, true);
        auto e0 = css::sub(tape, css::mul(tape, out.masks[0], mag), ref);
        auto e1 = css::sub(tape, css::mul(tape, out.masks[1], mag), ref);
        auto e2 = css::sub(tape, css::mul(tape, out.masks[2], mag), ref);
        auto loss = css::add(tape, css::mean_square(tape, e0),
                             css::add(tape, css::mean_square(tape, e1),
                                      css::mean_square(tape, e2)));
        return loss;
      },
      // Step 1e-5 balances roundoff against truncation for a loss of O(1);
      // floor 1e-5 keeps the ~1e-10 absolute difference noise from failing
      // gradients that are themselves near 1e-6.
      1e-5, 1e-5);
  INFO("worst leaf " << rep.leaf << " idx " << rep.index << " analytic "
                     << rep.analytic << " numeric " << rep.numeric);
  CHECK(rep.max_rel < 1e-4);
}
