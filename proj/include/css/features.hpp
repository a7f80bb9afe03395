#pragma once

// Input features for the mask estimator and the mask containers.
//
// Per frame the feature vector concatenates the log magnitude of channel 1
// with cos/sin of the inter-channel phase difference of every further
// channel against channel 1:
//
//   [ log|Y1| | cos IPD(2) | sin IPD(2) | cos IPD(3) | sin IPD(3) | ... ]
//
// so the width is bins * (1 + 2 * (channels - 1)).  Each dimension is then
// normalized to zero mean / unit variance over the frames of the window.

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "css/common.hpp"
#include "css/stft.hpp"
#include "css/tensor.hpp"

namespace css {

inline int64_t feature_dim_for(int64_t bins, int64_t channels) {
  if (bins < 1 || channels < 1)
    throw ConfigError("feature_dim_for: bins and channels must be positive");
  return bins * (1 + 2 * (channels - 1));
}

template <class Real>
struct FeatureMatrix {
  int64_t frames = 0;
  int64_t dim = 0;
  std::vector<Real> v;                // frames x dim, row-major
  std::vector<Real> mean, stddev;     // per dim; stddev 0 marks a constant dim

  Real& at(int64_t t, int64_t d) { return v[t * dim + d]; }
  Real at(int64_t t, int64_t d) const { return v[t * dim + d]; }
};

constexpr double kLogMagFloor = 1e-7;

// Unnormalized features.  cos/sin of the IPD come straight from the
// cross-spectrum Yc * conj(Y1), so no angle is ever unwrapped; bins where
// the cross-spectrum magnitude underflows fall back to cos 1 / sin 0.
template <class Real>
FeatureMatrix<Real> raw_features(const Spectrogram<Real>& spec) {
  if (spec.channels < 1 || spec.frames < 1)
    throw ContractError("raw_features: empty spectrogram");
  FeatureMatrix<Real> out;
  out.frames = spec.frames;
  out.dim = feature_dim_for(spec.bins, spec.channels);
  out.v.assign(static_cast<size_t>(out.frames * out.dim), Real(0));
  const int64_t bins = spec.bins;
  for (int64_t t = 0; t < spec.frames; ++t) {
    for (int64_t f = 0; f < bins; ++f)
      out.at(t, f) = Real(
          std::log(double(std::abs(spec.at(0, t, f))) + kLogMagFloor));
    for (int64_t c = 1; c < spec.channels; ++c) {
      const int64_t cos_base = bins * (1 + 2 * (c - 1));
      const int64_t sin_base = cos_base + bins;
      for (int64_t f = 0; f < bins; ++f) {
        const std::complex<Real> cross =
            spec.at(c, t, f) * std::conj(spec.at(0, t, f));
        const Real mag = std::abs(cross);
        if (mag > Real(1e-30)) {
          out.at(t, cos_base + f) = cross.real() / mag;
          out.at(t, sin_base + f) = cross.imag() / mag;
        } else {
          out.at(t, cos_base + f) = Real(1);
          out.at(t, sin_base + f) = Real(0);
        }
      }
    }
  }
  return out;
}

// Mean/variance normalization over frames, independently per dimension.
// Dimensions whose variance is below 1e-8 become all zeros.
template <class Real>
void normalize_features(FeatureMatrix<Real>& feat) {
  feat.mean.assign(static_cast<size_t>(feat.dim), Real(0));
  feat.stddev.assign(static_cast<size_t>(feat.dim), Real(0));
  const int64_t t_len = feat.frames, d_len = feat.dim;
  for (int64_t d = 0; d < d_len; ++d) {
    double mu = 0;
    for (int64_t t = 0; t < t_len; ++t) mu += double(feat.at(t, d));
    mu /= double(t_len);
    double var = 0;
    for (int64_t t = 0; t < t_len; ++t) {
      const double c = double(feat.at(t, d)) - mu;
      var += c * c;
    }
    var /= double(t_len);
    feat.mean[static_cast<size_t>(d)] = Real(mu);
    if (var < 1e-8) {
      for (int64_t t = 0; t < t_len; ++t) feat.at(t, d) = Real(0);
    } else {
      const double sd = std::sqrt(var);
      feat.stddev[static_cast<size_t>(d)] = Real(sd);
      for (int64_t t = 0; t < t_len; ++t)
        feat.at(t, d) = Real((double(feat.at(t, d)) - mu) / sd);
    }
  }
}

template <class Real>
FeatureMatrix<Real> compute_features(const Spectrogram<Real>& spec) {
  auto feat = raw_features(spec);
  normalize_features(feat);
  return feat;
}

template <class Real>
Var<Real> features_to_tensor(const FeatureMatrix<Real>& feat) {
  auto t = tensor_zeros<Real>({feat.frames, feat.dim});
  t->data = feat.v;
  return t;
}

// ============================================================================
// Masks
// ============================================================================

template <class Real>
struct MaskSet {
  int64_t num_masks = 0;
  int64_t frames = 0;
  int64_t bins = 0;
  std::vector<Real> m;

  MaskSet() = default;
  MaskSet(int64_t num, int64_t frames_, int64_t bins_)
      : num_masks(num), frames(frames_), bins(bins_) {
    m.assign(static_cast<size_t>(num * frames_ * bins_), Real(0));
  }

  Real& at(int64_t s, int64_t t, int64_t f) {
    return m[(s * frames + t) * bins + f];
  }
  Real at(int64_t s, int64_t t, int64_t f) const {
    return m[(s * frames + t) * bins + f];
  }
};

template <class Real>
void validate_mask_range(const MaskSet<Real>& masks) {
  for (Real v : masks.m)
    if (!(v >= Real(0) && v <= Real(1)))
      throw ContractError("mask value " + std::to_string(double(v)) +
                          " outside [0, 1]");
}

// Per-mask product with channel 1.  Output spectrograms are mono.
template <class Real>
std::vector<Spectrogram<Real>> apply_masks(const Spectrogram<Real>& spec,
                                           const MaskSet<Real>& masks) {
  if (masks.frames != spec.frames || masks.bins != spec.bins)
    throw ShapeError("apply_masks: mask grid " + std::to_string(masks.frames) +
                     "x" + std::to_string(masks.bins) +
                     " does not match spectrogram " +
                     std::to_string(spec.frames) + "x" +
                     std::to_string(spec.bins));
  validate_mask_range(masks);
  std::vector<Spectrogram<Real>> out;
  out.reserve(static_cast<size_t>(masks.num_masks));
  for (int64_t s = 0; s < masks.num_masks; ++s) {
    Spectrogram<Real> one(1, spec.frames, spec.win, spec.hop);
    for (int64_t t = 0; t < spec.frames; ++t)
      for (int64_t f = 0; f < spec.bins; ++f)
        one.at(0, t, f) = spec.at(0, t, f) * masks.at(s, t, f);
    out.push_back(std::move(one));
  }
  return out;
}

}  // namespace css
