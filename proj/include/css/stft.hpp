#pragma once

// STFT analysis/synthesis with square-root Hann windows on both sides.
// At 50% overlap the analysis-synthesis window product sums to one, so
// interior samples reconstruct exactly up to floating-point rounding.

#include <complex>
#include <cstdint>
#include <vector>

#include "css/audio.hpp"
#include "css/common.hpp"
#include "css/fft.hpp"

namespace css {

constexpr int kStftWindow = 512;
constexpr int kStftHop = 256;

template <class Real>
struct Spectrogram {
  int64_t channels = 0;
  int64_t frames = 0;
  int64_t bins = 0;
  int win = kStftWindow;
  int hop = kStftHop;
  std::vector<std::complex<Real>> v;

  Spectrogram() = default;
  Spectrogram(int64_t channels_, int64_t frames_, int win_, int hop_)
      : channels(channels_),
        frames(frames_),
        bins(win_ / 2 + 1),
        win(win_),
        hop(hop_) {
    v.assign(static_cast<size_t>(channels * frames * bins),
             std::complex<Real>(0, 0));
  }

  std::complex<Real>& at(int64_t c, int64_t t, int64_t f) {
    return v[(c * frames + t) * bins + f];
  }
  std::complex<Real> at(int64_t c, int64_t t, int64_t f) const {
    return v[(c * frames + t) * bins + f];
  }
};

// Periodic Hann raised to 1/2.  The periodic variant is what makes
// hann(n) + hann(n + win/2) == 1 exactly.
template <class Real>
std::vector<Real> sqrt_hann_window(int win) {
  std::vector<Real> w(static_cast<size_t>(win));
  const double two_pi = 6.283185307179586476925286766559;
  for (int n = 0; n < win; ++n) {
    const double h = 0.5 * (1.0 - std::cos(two_pi * double(n) / double(win)));
    w[static_cast<size_t>(n)] = Real(std::sqrt(h));
  }
  return w;
}

inline void validate_stft_params(int win, int hop) {
  if (win < 2 || (win & (win - 1)) != 0)
    throw ConfigError("stft: window must be a power of two, got " +
                      std::to_string(win));
  if (hop <= 0 || hop > win)
    throw ConfigError("stft: hop must be in (0, window], got " +
                      std::to_string(hop));
}

inline int64_t stft_frame_count(int64_t samples, int win, int hop) {
  if (samples < win) return 0;
  return (samples - win) / hop + 1;
}

template <class Real>
Spectrogram<Real> stft(const AudioBuffer<Real>& audio, int win = kStftWindow,
                       int hop = kStftHop) {
  validate_stft_params(win, hop);
  if (audio.length < win)
    throw ContractError("stft: signal of " + std::to_string(audio.length) +
                        " samples is shorter than one window (" +
                        std::to_string(win) + ")");
  const int64_t frames = stft_frame_count(audio.length, win, hop);
  Spectrogram<Real> spec(audio.channels, frames, win, hop);
  const auto window = sqrt_hann_window<Real>(win);
  FftPlan<Real> plan(static_cast<size_t>(win));
  std::vector<Real> frame(static_cast<size_t>(win));
  std::vector<std::complex<Real>> scratch(static_cast<size_t>(win));
  std::vector<std::complex<Real>> bins(static_cast<size_t>(spec.bins));
  for (int64_t c = 0; c < audio.channels; ++c) {
    const Real* x = audio.channel(c);
    for (int64_t t = 0; t < frames; ++t) {
      const Real* seg = x + t * hop;
      for (int n = 0; n < win; ++n)
        frame[static_cast<size_t>(n)] = seg[n] * window[static_cast<size_t>(n)];
      rfft(plan, frame.data(), scratch.data(), bins.data());
      for (int64_t f = 0; f < spec.bins; ++f) spec.at(c, t, f) = bins[f];
    }
  }
  return spec;
}

// Overlap-add with the synthesis window, normalized by the accumulated
// window product.  Samples whose window-product sum is below 1e-8 (the very
// edges) are set to zero rather than divided.
template <class Real>
AudioBuffer<Real> istft(const Spectrogram<Real>& spec) {
  validate_stft_params(spec.win, spec.hop);
  if (spec.frames < 1)
    throw ContractError("istft: spectrogram has no frames");
  const int win = spec.win, hop = spec.hop;
  const int64_t out_len = (spec.frames - 1) * hop + win;
  AudioBuffer<Real> out(spec.channels, out_len);
  const auto window = sqrt_hann_window<Real>(win);
  FftPlan<Real> plan(static_cast<size_t>(win));
  std::vector<std::complex<Real>> scratch(static_cast<size_t>(win));
  std::vector<Real> frame(static_cast<size_t>(win));
  std::vector<Real> denom(static_cast<size_t>(out_len), Real(0));

  for (int64_t t = 0; t < spec.frames; ++t)
    for (int n = 0; n < win; ++n)
      denom[static_cast<size_t>(t * hop + n)] +=
          window[static_cast<size_t>(n)] * window[static_cast<size_t>(n)];

  std::vector<std::complex<Real>> bins(static_cast<size_t>(spec.bins));
  for (int64_t c = 0; c < spec.channels; ++c) {
    Real* y = out.channel(c);
    for (int64_t t = 0; t < spec.frames; ++t) {
      for (int64_t f = 0; f < spec.bins; ++f) bins[f] = spec.at(c, t, f);
      irfft(plan, bins.data(), scratch.data(), frame.data());
      Real* dst = y + t * hop;
      for (int n = 0; n < win; ++n)
        dst[n] += frame[static_cast<size_t>(n)] * window[static_cast<size_t>(n)];
    }
    for (int64_t i = 0; i < out_len; ++i)
      y[i] = denom[static_cast<size_t>(i)] > Real(1e-8)
                 ? y[i] / denom[static_cast<size_t>(i)]
                 : Real(0);
  }
  return out;
}

}  // namespace css
