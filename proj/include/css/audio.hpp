#pragma once

// Multichannel audio in planar layout: samples[c * length + t].

#include <cmath>
#include <cstdint>
#include <vector>

#include "css/common.hpp"

namespace css {

constexpr int kSampleRate = 16000;

template <class Real>
struct AudioBuffer {
  int sample_rate = kSampleRate;
  int64_t channels = 0;
  int64_t length = 0;  // samples per channel
  std::vector<Real> samples;

  AudioBuffer() = default;
  AudioBuffer(int64_t channels_, int64_t length_, int rate = kSampleRate)
      : sample_rate(rate), channels(channels_), length(length_) {
    if (channels_ <= 0 || length_ < 0)
      throw ShapeError("AudioBuffer: invalid extents " +
                       std::to_string(channels_) + " x " +
                       std::to_string(length_));
    samples.assign(static_cast<size_t>(channels_ * length_), Real(0));
  }

  Real& at(int64_t c, int64_t t) { return samples[c * length + t]; }
  Real at(int64_t c, int64_t t) const { return samples[c * length + t]; }

  Real* channel(int64_t c) { return samples.data() + c * length; }
  const Real* channel(int64_t c) const { return samples.data() + c * length; }
};

template <class Real>
Real rms(const Real* x, int64_t n) {
  if (n <= 0) return Real(0);
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += double(x[i]) * double(x[i]);
  return Real(std::sqrt(acc / double(n)));
}

template <class Real>
double energy(const Real* x, int64_t n) {
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += double(x[i]) * double(x[i]);
  return acc;
}

// First channel only, as its own mono buffer.
template <class Real>
AudioBuffer<Real> take_channel(const AudioBuffer<Real>& in, int64_t c) {
  if (c < 0 || c >= in.channels)
    throw ShapeError("take_channel: channel " + std::to_string(c) +
                     " of buffer with " + std::to_string(in.channels));
  AudioBuffer<Real> out(1, in.length, in.sample_rate);
  for (int64_t t = 0; t < in.length; ++t) out.at(0, t) = in.at(c, t);
  return out;
}

template <class Real, class From>
AudioBuffer<Real> convert_audio(const AudioBuffer<From>& in) {
  AudioBuffer<Real> out(in.channels, in.length, in.sample_rate);
  for (size_t i = 0; i < in.samples.size(); ++i)
    out.samples[i] = static_cast<Real>(in.samples[i]);
  return out;
}

}  // namespace css
