#pragma once

// Mask training on simulated mixtures.  The loss is magnitude-domain mask
// approximation with a 2-speaker permutation search; the optimizer is AdamW
// with a warmup / linear-decay schedule.  The toy loop reads a dataset
// manifest from disk and is bit-deterministic given its seed, which is what
// makes checkpoint resume exact: data selection is a pure function of the
// step index, so no sampler state needs to survive a restart.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "css/autodiff.hpp"
#include "css/common.hpp"
#include "css/conformer.hpp"
#include "css/features.hpp"
#include "css/simulate.hpp"
#include "css/stft.hpp"
#include "css/wav.hpp"
#include "css/weights_io.hpp"

namespace css {

// ============================================================================
// Learning-rate schedule
// ============================================================================

struct Schedule {
  int64_t warmup_steps = 200;
  int64_t total_steps = 5000;

  void validate() const {
    if (warmup_steps <= 0 || warmup_steps >= total_steps)
      throw ConfigError("schedule: need 0 < warmup (" +
                        std::to_string(warmup_steps) + ") < total (" +
                        std::to_string(total_steps) + ")");
  }
};

// Piecewise linear: 0 at step 0, peak at warmup_steps, 0 at total_steps.
// Steps beyond the end clamp to 0 so a loop overrun cannot raise the rate.
inline double lr_at(int64_t step, const Schedule& sched, double peak) {
  sched.validate();
  if (step <= 0) return 0.0;
  if (step >= sched.total_steps) return 0.0;
  if (step <= sched.warmup_steps)
    return peak * (double(step) / double(sched.warmup_steps));
  return peak * (double(sched.total_steps - step) /
                 double(sched.total_steps - sched.warmup_steps));
}

// ============================================================================
// PIT mask loss
// ============================================================================

template <class Real>
struct PitLossResult {
  Var<Real> loss;       // scalar
  int permutation = 0;  // 0: head s -> source s, 1: heads swapped
};

// L = min over the two speaker assignments of
//       sum_s mean((M_s * mix_mag - src_mag[pi(s)])^2)
//     + mean((M_noise * mix_mag - noise_mag)^2)          [if noise_mag]
// Both assignments are evaluated; the returned loss is the smaller one, so
// gradients flow only through the selected branch.  Ties keep the identity
// assignment, which is what makes constant-mask streams never flip.
// A null noise_mag disables the noise term entirely (noisy-target training),
// leaving the third head without gradient.
template <class Real>
PitLossResult<Real> pit_mask_loss(Tape<Real>* tape,
                                  const std::array<Var<Real>, 3>& masks,
                                  const Var<Real>& mix_mag,
                                  const std::array<Var<Real>, 2>& source_mags,
                                  const Var<Real>& noise_mag) {
  auto check = [&](const Var<Real>& v, const char* name) {
    if (!same_shape(*v, *mix_mag))
      throw ShapeError(std::string("pit_mask_loss: ") + name + " shape " +
                       shape_to_string(v->shape) + " does not match mix " +
                       shape_to_string(mix_mag->shape));
  };
  for (const auto& m : masks) check(m, "mask");
  for (const auto& s : source_mags) check(s, "source");
  if (noise_mag) check(noise_mag, "noise");

  auto est0 = mul(tape, masks[0], mix_mag);
  auto est1 = mul(tape, masks[1], mix_mag);
  auto ident = add(tape, mean_square(tape, sub(tape, est0, source_mags[0])),
                   mean_square(tape, sub(tape, est1, source_mags[1])));
  auto swapped = add(tape, mean_square(tape, sub(tape, est0, source_mags[1])),
                     mean_square(tape, sub(tape, est1, source_mags[0])));

  PitLossResult<Real> r;
  r.permutation = swapped->data[0] < ident->data[0] ? 1 : 0;
  r.loss = r.permutation == 1 ? swapped : ident;
  if (noise_mag) {
    auto estn = mul(tape, masks[2], mix_mag);
    r.loss = add(tape, r.loss,
                 mean_square(tape, sub(tape, estn, noise_mag)));
  }
  return r;
}

// ============================================================================
// AdamW
// ============================================================================

template <class Real>
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  int64_t step = 0;
  std::unordered_map<std::string, std::vector<Real>> m, v;
};

// Bias-corrected Adam update plus decoupled decay p -= lr * lambda * p, the
// decay acting on the pre-update value.  All gradients are validated before
// anything mutates, so a non-finite gradient aborts with parameters, moments
// and the step counter untouched.
template <class Real>
void adamw_step(ParamStore<Real>& params, OptimizerState<Real>& st,
                double lr) {
  for (const auto& name : params.order) {
    const auto& t = params.at(name);
    if (!t->requires_grad) continue;
    for (Real g : t->grad)
      if (!std::isfinite(double(g)))
        throw ContractError("adamw_step: non-finite gradient in " + name);
  }

  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
  for (const auto& name : params.order) {
    auto& t = *params.by_name.at(name);
    if (!t.requires_grad) continue;
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) m.assign(t.data.size(), Real(0));
    if (v.empty()) v.assign(t.data.size(), Real(0));
    for (size_t i = 0; i < t.data.size(); ++i) {
      const double g = double(t.grad[i]);
      m[i] = Real(st.beta1 * double(m[i]) + (1.0 - st.beta1) * g);
      v[i] = Real(st.beta2 * double(v[i]) + (1.0 - st.beta2) * g * g);
      const double mhat = double(m[i]) / bc1;
      const double vhat = double(v[i]) / bc2;
      const double p = double(t.data[i]);
      t.data[i] = Real(p - lr * (mhat / (std::sqrt(vhat) + st.eps)) -
                       lr * st.weight_decay * p);
    }
  }
}

// ============================================================================
// Optimizer sidecar (same container as the weights, magic "CSSO")
// ============================================================================

// Layout: one scalar tensor "step", then "m.<name>" and "v.<name>" for each
// trainable tensor in canonical order.  beta/eps/decay are compile-time
// defaults, not serialized.  f32 storage is exact for float training.
template <class Real>
void save_optimizer(const std::string& path, const ConformerWeights<Real>& w,
                    const OptimizerState<Real>& st) {
  std::vector<RawTensor> tensors;
  RawTensor step;
  step.name = "step";
  step.shape = {1};
  step.data = {float(st.step)};
  tensors.push_back(std::move(step));
  auto moments = [&](const char* prefix,
                     const std::unordered_map<std::string, std::vector<Real>>&
                         bank) {
    for (const auto& name : w.params.order) {
      const auto& t = w.params.at(name);
      if (!t->requires_grad) continue;
      RawTensor raw;
      raw.name = std::string(prefix) + name;
      raw.shape = t->shape;
      auto it = bank.find(name);
      if (it == bank.end()) {
        raw.data.assign(t->data.size(), 0.0f);
      } else {
        raw.data.reserve(it->second.size());
        for (Real x : it->second) raw.data.push_back(float(x));
      }
      tensors.push_back(std::move(raw));
    }
  };
  moments("m.", st.m);
  moments("v.", st.v);
  write_container(path, kOptimizerMagic, w.config, tensors);
}

template <class Real>
OptimizerState<Real> load_optimizer(const std::string& path,
                                    const ConformerWeights<Real>& w) {
  Container c = read_container(path, kOptimizerMagic);
  if (!(c.config == w.config))
    throw ConfigError("optimizer sidecar " + path +
                      " belongs to a different model configuration");
  OptimizerState<Real> st;
  if (c.tensors.empty() || c.tensors[0].name != "step" ||
      c.tensors[0].data.size() != 1)
    throw FileFormatError("optimizer sidecar " + path +
                          " is missing the step counter");
  st.step = int64_t(c.tensors[0].data[0]);
  size_t at = 1;
  auto take = [&](const char* prefix,
                  std::unordered_map<std::string, std::vector<Real>>& bank) {
    for (const auto& name : w.params.order) {
      const auto& t = w.params.at(name);
      if (!t->requires_grad) continue;
      if (at >= c.tensors.size())
        throw FileFormatError("optimizer sidecar " + path + ": truncated");
      const RawTensor& raw = c.tensors[at++];
      if (raw.name != std::string(prefix) + name)
        throw FileFormatError("optimizer sidecar " + path + ": tensor '" +
                              raw.name + "' where '" + prefix + name +
                              "' was expected");
      if (raw.shape != t->shape)
        throw ShapeError("optimizer sidecar " + path + ": " + raw.name +
                         " has shape " + shape_to_string(raw.shape) +
                         ", parameter is " + shape_to_string(t->shape));
      std::vector<Real> vals;
      vals.reserve(raw.data.size());
      for (float x : raw.data) vals.push_back(Real(x));
      bank.emplace(name, std::move(vals));
    }
  };
  take("m.", st.m);
  take("v.", st.v);
  if (at != c.tensors.size())
    throw FileFormatError("optimizer sidecar " + path + ": " +
                          std::to_string(c.tensors.size() - at) +
                          " unexpected trailing tensors");
  return st;
}

// ============================================================================
// Training examples
// ============================================================================

// Noise share folded into each speaker target in noisy-target mode.  Half
// per speaker keeps the two targets summing to roughly the mixture.
constexpr double kNoisyTargetNoiseShare = 0.5;

template <class Real>
struct TrainExample {
  Spectrogram<Real> mix;                        // all channels, complex
  std::array<std::vector<Real>, 2> source_mag;  // frames x bins, channel 1
  std::vector<Real> noise_mag;                  // empty in noisy-target mode
  int64_t frames = 0;
  int64_t bins = 0;
};

namespace detail {

template <class Real>
Spectrogram<Real> slice_frames(const Spectrogram<Real>& spec, int64_t start,
                               int64_t len) {
  Spectrogram<Real> out(spec.channels, len, spec.win, spec.hop);
  for (int64_t c = 0; c < spec.channels; ++c)
    for (int64_t t = 0; t < len; ++t)
      for (int64_t f = 0; f < spec.bins; ++f)
        out.at(c, t, f) = spec.at(c, start + t, f);
  return out;
}

template <class Real>
std::vector<Real> magnitude_plane(const Spectrogram<Real>& spec) {
  std::vector<Real> mag(static_cast<size_t>(spec.frames * spec.bins));
  for (int64_t t = 0; t < spec.frames; ++t)
    for (int64_t f = 0; f < spec.bins; ++f)
      mag[size_t(t * spec.bins + f)] = std::abs(spec.at(0, t, f));
  return mag;
}

}  // namespace detail

// Loads one manifest entry and precomputes everything the loss needs.  The
// speaker references are the reverberant images at channel 1; a missing
// second speaker gets a zero target.  In noisy-target mode each speaker
// reference becomes |X_s + share*N| and the separate noise target is dropped.
template <class Real>
TrainExample<Real> prepare_example(const ManifestEntry& entry,
                                   bool noisy_targets) {
  auto mixture = read_wav<Real>(entry.mixture_path);
  if (mixture.sample_rate != kSampleRate)
    throw ContractError("mixture " + entry.mixture_path + " is " +
                        std::to_string(mixture.sample_rate) +
                        " Hz; training expects 16000");

  TrainExample<Real> ex;
  ex.mix = stft(mixture);
  ex.frames = ex.mix.frames;
  ex.bins = ex.mix.bins;

  AudioBuffer<Real> noise(1, mixture.length);
  if (!entry.noise_path.empty()) {
    auto n = read_wav<Real>(entry.noise_path);
    if (n.length != mixture.length)
      throw ContractError("noise image length " + std::to_string(n.length) +
                          " does not match mixture " +
                          std::to_string(mixture.length) + " in " + entry.id);
    noise = take_channel(n, 0);
  }

  for (size_t s = 0; s < 2; ++s) {
    AudioBuffer<Real> src(1, mixture.length);
    if (s < entry.source_paths.size()) {
      auto img = read_wav<Real>(entry.source_paths[s]);
      if (img.length != mixture.length)
        throw ContractError("source image length " +
                            std::to_string(img.length) +
                            " does not match mixture " +
                            std::to_string(mixture.length) + " in " + entry.id);
      src = take_channel(img, 0);
    }
    if (noisy_targets) {
      const Real share = Real(kNoisyTargetNoiseShare);
      for (int64_t t = 0; t < src.length; ++t)
        src.at(0, t) += share * noise.at(0, t);
    }
    ex.source_mag[s] = detail::magnitude_plane(stft(src));
  }

  if (!noisy_targets) ex.noise_mag = detail::magnitude_plane(stft(noise));
  return ex;
}

template <class Real>
struct ChunkTensors {
  Var<Real> features;                    // [len x feature_dim], normalized
  Var<Real> mix_mag;                     // [len x bins], channel 1
  std::array<Var<Real>, 2> source_mags;  // [len x bins]
  Var<Real> noise_mag;                   // null in noisy-target mode
};

template <class Real>
ChunkTensors<Real> make_chunk(const TrainExample<Real>& ex, int64_t start,
                              int64_t len) {
  if (start < 0 || len < 1 || start + len > ex.frames)
    throw ContractError("make_chunk: frames [" + std::to_string(start) + ", " +
                        std::to_string(start + len) + ") out of [0, " +
                        std::to_string(ex.frames) + ")");
  auto sub = detail::slice_frames(ex.mix, start, len);
  auto feat = compute_features(sub);

  ChunkTensors<Real> out;
  out.features = tensor_from<Real>({feat.frames, feat.dim}, std::move(feat.v));
  out.mix_mag = tensor_from<Real>({len, ex.bins}, detail::magnitude_plane(sub));

  auto plane = [&](const std::vector<Real>& full) {
    std::vector<Real> v(static_cast<size_t>(len * ex.bins));
    std::copy(full.begin() + start * ex.bins,
              full.begin() + (start + len) * ex.bins, v.begin());
    return tensor_from<Real>({len, ex.bins}, std::move(v));
  };
  out.source_mags = {plane(ex.source_mag[0]), plane(ex.source_mag[1])};
  if (!ex.noise_mag.empty()) out.noise_mag = plane(ex.noise_mag);
  return out;
}

// ============================================================================
// Toy training loop
// ============================================================================

struct TrainOptions {
  uint64_t seed = 1;
  double peak_lr = 1e-4;
  int64_t micro_batch = 4;    // chunks accumulated per optimizer step
  int64_t crop_frames = 150;  // training crop length, capped by the config
  int64_t checkpoint_every = 1000;  // 0 disables periodic checkpoints
  bool noisy_targets = false;
  std::string out_dir;       // loss.csv + checkpoints; empty keeps RAM only
  std::string resume_from;   // checkpoint stem (no extension) to continue
};

template <class Real>
struct TrainResult {
  ConformerWeights<Real> weights;
  OptimizerState<Real> opt;
  std::vector<double> losses;  // one entry per executed step
  int64_t first_step = 1;      // step index of losses[0]
};

namespace detail {

inline std::string checkpoint_stem(const std::string& dir, int64_t step) {
  return dir + "/ckpt_" + std::to_string(step);
}

}  // namespace detail

// Runs sched.total_steps optimizer steps (or the remainder after a resumed
// checkpoint).  Micro-batch chunks are drawn by hashing (seed, step, slot),
// so any step's batch is reproducible in isolation.  The loss log appends
// one CSV row per step: step, lr, mean micro-batch loss, and how many chunks
// picked a different permutation than the previous chunk of the same mixture.
template <class Real>
TrainResult<Real> train_toy(const std::string& manifest_path,
                            const ConformerConfig& cfg, const Schedule& sched,
                            const TrainOptions& opt = {}) {
  cfg.validate();
  sched.validate();
  if (opt.micro_batch < 1)
    throw ConfigError("train_toy: micro_batch must be >= 1");
  auto entries = read_manifest(manifest_path);
  if (entries.empty())
    throw ContractError("train_toy: empty manifest " + manifest_path);

  std::vector<TrainExample<Real>> examples;
  examples.reserve(entries.size());
  for (const auto& e : entries) {
    auto ex = prepare_example<Real>(e, opt.noisy_targets);
    if (ex.bins != int64_t(cfg.num_bins))
      throw ConfigError("train_toy: mixture " + e.id + " has " +
                        std::to_string(ex.bins) + " bins, config expects " +
                        std::to_string(cfg.num_bins));
    const int64_t dim = feature_dim_for(ex.bins, ex.mix.channels);
    if (dim != int64_t(cfg.feature_dim))
      throw ConfigError("train_toy: mixture " + e.id + " yields feature dim " +
                        std::to_string(dim) + ", config expects " +
                        std::to_string(cfg.feature_dim));
    examples.push_back(std::move(ex));
  }

  const int64_t crop =
      std::min<int64_t>(std::max<int64_t>(1, opt.crop_frames),
                        int64_t(cfg.max_chunk_len));

  TrainResult<Real> result;
  if (!opt.resume_from.empty()) {
    result.weights =
        load_weights_expect<Real>(opt.resume_from + ".cssw", cfg);
    result.opt = load_optimizer(opt.resume_from + ".csso", result.weights);
    result.first_step = result.opt.step + 1;
  } else {
    result.weights = init_weights<Real>(cfg, opt.seed);
    result.first_step = 1;
  }

  std::ofstream csv;
  if (!opt.out_dir.empty()) {
    const std::string log_path = opt.out_dir + "/loss.csv";
    const bool fresh = opt.resume_from.empty();
    csv.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw ContractError("train_toy: cannot write " + log_path);
    if (fresh) csv << "step,lr,loss,perm_flips\n";
    csv.precision(10);
  }

  std::vector<int> last_perm(examples.size(), -1);
  for (int64_t step = result.first_step; step <= sched.total_steps; ++step) {
    const double lr = lr_at(step, sched, opt.peak_lr);
    result.weights.params.zero_grads();

    double loss_sum = 0.0;
    int flips = 0;
    for (int64_t slot = 0; slot < opt.micro_batch; ++slot) {
      const uint64_t idx =
          hash_mix(opt.seed, uint64_t(step), uint64_t(slot), 0x44415441ull) %
          examples.size();
      const TrainExample<Real>& ex = examples[idx];
      const int64_t len = std::min(crop, ex.frames);
      const int64_t span = ex.frames - len;
      const int64_t start =
          span > 0 ? int64_t(hash_mix(opt.seed, uint64_t(step),
                                      uint64_t(slot), 0x4F4646ull) %
                             uint64_t(span + 1))
                   : 0;
      auto chunk = make_chunk(ex, start, len);

      Tape<Real> tape;
      auto fwd = forward_masks<Real>(&tape, result.weights, chunk.features,
                                     nullptr, true);
      auto pit = pit_mask_loss<Real>(&tape, fwd.masks, chunk.mix_mag,
                                     chunk.source_mags, chunk.noise_mag);
      loss_sum += double(pit.loss->data[0]);
      if (last_perm[idx] >= 0 && pit.permutation != last_perm[idx]) ++flips;
      last_perm[idx] = pit.permutation;

      backward(tape, scale(&tape, pit.loss, Real(1.0 / opt.micro_batch)));
    }

    adamw_step(result.weights.params, result.opt, lr);
    const double mean_loss = loss_sum / double(opt.micro_batch);
    result.losses.push_back(mean_loss);
    if (csv.is_open()) csv << step << ',' << lr << ',' << mean_loss << ',' << flips << '\n';

    if (!opt.out_dir.empty() && opt.checkpoint_every > 0 &&
        step % opt.checkpoint_every == 0 && step != sched.total_steps) {
      const std::string stem = detail::checkpoint_stem(opt.out_dir, step);
      save_weights(stem + ".cssw", result.weights);
      save_optimizer(stem + ".csso", result.weights, result.opt);
    }
  }

  if (!opt.out_dir.empty()) {
    save_weights(opt.out_dir + "/model.cssw", result.weights);
    save_optimizer(opt.out_dir + "/model.csso", result.weights, result.opt);
  }
  return result;
}

// ============================================================================
// Chunked mask-loss evaluation
// ============================================================================

// Mean PIT loss over non-overlapping crop-length chunks of every mixture.
// Null weights score the constant-0.5-mask baseline.  Chunks are weighted
// equally regardless of length.
template <class Real>
double mask_loss_over_manifest(const std::vector<ManifestEntry>& entries,
                               const ConformerWeights<Real>* weights,
                               const ConformerConfig& cfg,
                               bool noisy_targets = false,
                               int64_t crop_frames = 150) {
  cfg.validate();
  if (entries.empty())
    throw ContractError("mask_loss_over_manifest: no entries");
  const int64_t crop = std::min<int64_t>(std::max<int64_t>(1, crop_frames),
                                         int64_t(cfg.max_chunk_len));
  double total = 0.0;
  int64_t chunks = 0;
  for (const auto& e : entries) {
    auto ex = prepare_example<Real>(e, noisy_targets);
    for (int64_t start = 0; start < ex.frames; start += crop) {
      const int64_t len = std::min(crop, ex.frames - start);
      auto chunk = make_chunk(ex, start, len);
      std::array<Var<Real>, 3> masks;
      if (weights) {
        auto fwd = forward_masks<Real>(nullptr, *weights, chunk.features,
                                       nullptr, false);
        masks = fwd.masks;
      } else {
        for (auto& m : masks)
          m = tensor_full<Real>({len, ex.bins}, Real(0.5));
      }
      auto pit = pit_mask_loss<Real>(nullptr, masks, chunk.mix_mag,
                                     chunk.source_mags, chunk.noise_mag);
      total += double(pit.loss->data[0]);
      ++chunks;
    }
  }
  return total / double(chunks);
}

}  // namespace css
