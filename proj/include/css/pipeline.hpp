#pragma once

// Chunk-wise continuous separation.  A sliding window of N_h history, N_c
// current and N_f future frames advances by N_c; masks are estimated on the
// whole window but only the current segment is emitted.  Output channels are
// kept coherent across chunks by correlating speaker masks on the N_h-frame
// overlap with the previous window, and an optional merging pass folds
// blocks where one channel is far louder into the stronger channel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "css/audio.hpp"
#include "css/common.hpp"
#include "css/conformer.hpp"
#include "css/features.hpp"
#include "css/mvdr.hpp"
#include "css/stft.hpp"

namespace css {

// ============================================================================
// Window planning
// ============================================================================

struct ChunkPlan {
  int64_t n_h = 75;
  int64_t n_c = 50;
  int64_t n_f = 25;
  int64_t total_frames = 0;
  int64_t num_chunks = 0;

  int64_t window_frames() const { return n_h + n_c + n_f; }

  struct Window {
    int64_t start;      // first window frame; negative means zero padding
    int64_t cur_begin;  // current segment within the recording
    int64_t cur_end;
  };

  Window at(int64_t chunk) const {
    if (chunk < 0 || chunk >= num_chunks)
      throw ContractError("ChunkPlan: chunk " + std::to_string(chunk) +
                          " of " + std::to_string(num_chunks));
    Window w;
    w.cur_begin = chunk * n_c;
    w.cur_end = std::min(w.cur_begin + n_c, total_frames);
    w.start = w.cur_begin - n_h;
    return w;
  }
};

inline ChunkPlan plan_chunks(int64_t total_frames, int64_t n_h = 75,
                             int64_t n_c = 50, int64_t n_f = 25) {
  if (n_h <= 0 || n_c <= 0 || n_f <= 0)
    throw ConfigError("plan_chunks: sizes must be positive, got " +
                      std::to_string(n_h) + "/" + std::to_string(n_c) + "/" +
                      std::to_string(n_f));
  if (total_frames < 1)
    throw ContractError("plan_chunks: need at least one frame");
  ChunkPlan plan;
  plan.n_h = n_h;
  plan.n_c = n_c;
  plan.n_f = n_f;
  plan.total_frames = total_frames;
  plan.num_chunks = (total_frames + n_c - 1) / n_c;
  return plan;
}

// ============================================================================
// Cross-chunk channel alignment
// ============================================================================

// Picks the speaker permutation (0 identity, 1 swap) that maximizes the
// summed uncentered correlation between the two mask sets over the shared
// frames.  Ties keep identity, so identical masks can never flip.
template <class Real>
int align_channels(const MaskSet<Real>& prev_overlap,
                   const MaskSet<Real>& cur_overlap) {
  if (prev_overlap.num_masks < 2 || cur_overlap.num_masks < 2)
    throw ContractError("align_channels: need two speaker masks");
  if (prev_overlap.frames != cur_overlap.frames ||
      prev_overlap.bins != cur_overlap.bins)
    throw ShapeError("align_channels: overlap grids differ: " +
                     std::to_string(prev_overlap.frames) + "x" +
                     std::to_string(prev_overlap.bins) + " vs " +
                     std::to_string(cur_overlap.frames) + "x" +
                     std::to_string(cur_overlap.bins));
  double identity = 0.0, swapped = 0.0;
  for (int64_t t = 0; t < prev_overlap.frames; ++t)
    for (int64_t f = 0; f < prev_overlap.bins; ++f) {
      const double p0 = double(prev_overlap.at(0, t, f));
      const double p1 = double(prev_overlap.at(1, t, f));
      const double c0 = double(cur_overlap.at(0, t, f));
      const double c1 = double(cur_overlap.at(1, t, f));
      identity += p0 * c0 + p1 * c1;
      swapped += p0 * c1 + p1 * c0;
    }
  return swapped > identity ? 1 : 0;
}

// ============================================================================
// Block merging
// ============================================================================

// Folds the weak channel into the strong one wherever a block's energy
// ratio exceeds the threshold.  The fold is power-domain: the strong bin
// keeps its phase and absorbs the weak bin's energy, so the total squared
// magnitude over both channels is exactly preserved.  Returns the number of
// merged blocks.
template <class Real>
int64_t merge_channels(std::array<Spectrogram<Real>, 2>& streams,
                       int64_t block_frames = 50, double threshold = 10.0) {
  if (threshold <= 1.0)
    throw ConfigError("merge_channels: threshold must exceed 1, got " +
                      std::to_string(threshold));
  if (block_frames < 1)
    throw ConfigError("merge_channels: block_frames must be positive");
  auto& a = streams[0];
  auto& b = streams[1];
  if (a.channels != 1 || b.channels != 1 || a.frames != b.frames ||
      a.bins != b.bins)
    throw ShapeError("merge_channels: streams must be two matching mono "
                     "spectrograms");

  int64_t merged = 0;
  for (int64_t start = 0; start < a.frames; start += block_frames) {
    const int64_t end = std::min(start + block_frames, a.frames);
    double ea = 0.0, eb = 0.0;
    for (int64_t t = start; t < end; ++t)
      for (int64_t f = 0; f < a.bins; ++f) {
        ea += std::norm(a.at(0, t, f));
        eb += std::norm(b.at(0, t, f));
      }
    auto& strong = ea >= eb ? a : b;
    auto& weak = ea >= eb ? b : a;
    const double es = std::max(ea, eb), ew = std::min(ea, eb);
    if (es <= 0.0) continue;                    // both silent
    if (ew > 0.0 && es / ew <= threshold) continue;

    for (int64_t t = start; t < end; ++t)
      for (int64_t f = 0; f < a.bins; ++f) {
        const std::complex<Real> s = strong.at(0, t, f);
        const std::complex<Real> v = weak.at(0, t, f);
        const Real mag = std::sqrt(std::norm(s) + std::norm(v));
        const Real as = std::abs(s), av = std::abs(v);
        std::complex<Real> phase(1, 0);
        if (as > 0)
          phase = s / as;
        else if (av > 0)
          phase = v / av;
        strong.at(0, t, f) = mag * phase;
        weak.at(0, t, f) = std::complex<Real>(0, 0);
      }
    ++merged;
  }
  return merged;
}

// ============================================================================
// Streaming separation
// ============================================================================

enum class SeparateMode { kAuto, kMasking, kMvdr };

struct SeparateOptions {
  SeparateMode mode = SeparateMode::kAuto;  // auto: MVDR when multichannel
  bool merge = false;
  double merge_threshold = 10.0;
  int64_t merge_block_frames = 50;
  int64_t ref_channel = 0;
  double mvdr_loading = 1e-6;
};

template <class Real>
struct SeparationResult {
  std::array<AudioBuffer<Real>, 2> outputs;
  MaskSet<Real> masks;  // stitched, aligned current-segment masks (3 planes)
  int64_t chunks = 0;
  int64_t flips = 0;          // permutation changes between adjacent chunks
  int64_t merged_blocks = 0;
  bool used_mvdr = false;
};

namespace detail {

template <class Real>
void copy_window(const Spectrogram<Real>& spec, int64_t start, int64_t len,
                 Spectrogram<Real>& out) {
  for (int64_t r = 0; r < len; ++r) {
    const int64_t src = start + r;
    if (src < 0 || src >= spec.frames) continue;  // stays zero padding
    for (int64_t c = 0; c < spec.channels; ++c)
      for (int64_t f = 0; f < spec.bins; ++f)
        out.at(c, r, f) = spec.at(c, src, f);
  }
}

}  // namespace detail

// Runs the whole pipeline over one recording: STFT, per-window features and
// masks, overlap alignment, stitching, then either masking on channel 1 or
// per-chunk MVDR.  Outputs match the input length exactly; the input is
// zero-padded to whole STFT frames internally and trimmed after resynthesis.
template <class Real>
SeparationResult<Real> separate_stream(const AudioBuffer<Real>& audio,
                                       const ConformerWeights<Real>& w,
                                       const SeparateOptions& opt = {}) {
  const ConformerConfig& cfg = w.config;
  cfg.validate();
  if (audio.channels < 1 || audio.length < 1)
    throw ContractError("separate_stream: empty input");
  if (audio.sample_rate != kSampleRate)
    throw ContractError("separate_stream: input is " +
                        std::to_string(audio.sample_rate) +
                        " Hz; the pipeline requires 16000 Hz audio");
  const int64_t dim = feature_dim_for(int64_t(cfg.num_bins), audio.channels);
  if (dim != int64_t(cfg.feature_dim))
    throw ConfigError("separate_stream: " + std::to_string(audio.channels) +
                      "-channel input yields feature dim " +
                      std::to_string(dim) + ", model expects " +
                      std::to_string(cfg.feature_dim));

  const int win = int(cfg.num_bins - 1) * 2;
  const int hop = win / 2;
  validate_stft_params(win, hop);

  // Pad so every sample lies inside some analysis frame.
  int64_t padded_len = std::max<int64_t>(audio.length, win);
  const int64_t rem = (padded_len - win) % hop;
  if (rem != 0) padded_len += hop - rem;
  AudioBuffer<Real> padded(audio.channels, padded_len);
  for (int64_t c = 0; c < audio.channels; ++c)
    std::copy(audio.channel(c), audio.channel(c) + audio.length,
              padded.channel(c));

  const auto spec = stft(padded, win, hop);
  const int64_t total = spec.frames;
  const int64_t bins = spec.bins;
  auto plan = plan_chunks(total);
  const int64_t window = plan.window_frames();
  if (window > int64_t(cfg.max_chunk_len))
    throw ChunkError("separate_stream: window of " + std::to_string(window) +
                     " frames exceeds the model's max_chunk_len " +
                     std::to_string(cfg.max_chunk_len));

  const bool use_mvdr =
      opt.mode == SeparateMode::kMvdr ||
      (opt.mode == SeparateMode::kAuto && audio.channels > 1);

  SeparationResult<Real> result;
  result.chunks = plan.num_chunks;
  result.used_mvdr = use_mvdr;
  result.masks = MaskSet<Real>(3, total, bins);

  std::array<Spectrogram<Real>, 2> streams = {
      Spectrogram<Real>(1, total, win, hop),
      Spectrogram<Real>(1, total, win, hop)};

  AttentionCache<Real> cache(cfg);
  AttentionCache<Real>* cache_ptr = cfg.cache_chunks > 0 ? &cache : nullptr;

  // Previous window's speaker masks in output-channel order.
  MaskSet<Real> prev_window(2, window, bins);
  bool have_prev = false;

  for (int64_t i = 0; i < plan.num_chunks; ++i) {
    const auto wdw = plan.at(i);
    const int64_t cur_len = wdw.cur_end - wdw.cur_begin;

    Spectrogram<Real> win_spec(spec.channels, window, win, hop);
    detail::copy_window(spec, wdw.start, window, win_spec);
    auto feat = compute_features(win_spec);
    auto features =
        tensor_from<Real>({feat.frames, feat.dim}, std::move(feat.v));
    auto fwd = forward_masks<Real>(nullptr, w, features, cache_ptr, false);

    MaskSet<Real> win_masks(3, window, bins);
    for (int64_t s = 0; s < 3; ++s)
      for (int64_t t = 0; t < window; ++t)
        for (int64_t f = 0; f < bins; ++f)
          win_masks.at(s, t, f) = fwd.masks[size_t(s)]->data[t * bins + f];

    int perm = 0;
    if (have_prev) {
      MaskSet<Real> prev_overlap(2, plan.n_h, bins);
      MaskSet<Real> cur_overlap(2, plan.n_h, bins);
      for (int64_t s = 0; s < 2; ++s)
        for (int64_t t = 0; t < plan.n_h; ++t)
          for (int64_t f = 0; f < bins; ++f) {
            prev_overlap.at(s, t, f) = prev_window.at(s, plan.n_c + t, f);
            cur_overlap.at(s, t, f) = win_masks.at(s, t, f);
          }
      perm = align_channels(prev_overlap, cur_overlap);
    }
    if (perm != 0) {
      ++result.flips;
      for (int64_t t = 0; t < window; ++t)
        for (int64_t f = 0; f < bins; ++f)
          std::swap(win_masks.at(0, t, f), win_masks.at(1, t, f));
    }

    for (int64_t s = 0; s < 2; ++s)
      for (int64_t t = 0; t < window; ++t)
        for (int64_t f = 0; f < bins; ++f)
          prev_window.at(s, t, f) = win_masks.at(s, t, f);
    have_prev = true;

    for (int64_t s = 0; s < 3; ++s)
      for (int64_t t = 0; t < cur_len; ++t)
        for (int64_t f = 0; f < bins; ++f)
          result.masks.at(s, wdw.cur_begin + t, f) =
              win_masks.at(s, plan.n_h + t, f);

    if (use_mvdr) {
      // Covariance statistics come from the whole window; only the current
      // segment of the beamformed output is kept.
      auto beams = mvdr_separate(win_spec, win_masks, opt.ref_channel,
                                 Real(opt.mvdr_loading));
      for (int64_t s = 0; s < 2; ++s)
        for (int64_t t = 0; t < cur_len; ++t)
          for (int64_t f = 0; f < bins; ++f)
            streams[size_t(s)].at(0, wdw.cur_begin + t, f) =
                beams[size_t(s)].at(0, plan.n_h + t, f);
    }
  }

  if (!use_mvdr) {
    for (int64_t s = 0; s < 2; ++s)
      for (int64_t t = 0; t < total; ++t)
        for (int64_t f = 0; f < bins; ++f)
          streams[size_t(s)].at(0, t, f) =
              spec.at(0, t, f) * result.masks.at(s, t, f);
  }

  if (opt.merge)
    result.merged_blocks =
        merge_channels(streams, opt.merge_block_frames, opt.merge_threshold);

  for (int64_t s = 0; s < 2; ++s) {
    auto wave = istft(streams[size_t(s)]);
    AudioBuffer<Real> out(1, audio.length);
    const int64_t n = std::min(audio.length, wave.length);
    std::copy(wave.channel(0), wave.channel(0) + n, out.channel(0));
    result.outputs[size_t(s)] = std::move(out);
  }
  return result;
}

}  // namespace css
