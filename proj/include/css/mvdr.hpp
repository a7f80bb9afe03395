#pragma once

// Mask-driven MVDR beamforming in the STFT domain.
//
// For each frequency bin a spatial covariance matrix is accumulated from
// mask-weighted outer products of the multichannel spectrum.  The weights
// follow the Souden formulation
//
//   w(f) = (Phi_n(f)^-1 Phi_s(f) / tr(Phi_n(f)^-1 Phi_s(f))) e_ref
//
// which needs no explicit steering vector: the speech covariance itself
// carries the spatial signature.  The noise covariance for one output
// stream pools the noise mask with every competing speaker mask, so the
// beamformer steers a null toward the other talker as well.

#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "css/common.hpp"
#include "css/features.hpp"
#include "css/stft.hpp"

namespace css {

// Per-bin C x C complex matrices, row-major within each bin.
template <class Real>
struct SpatialCovariance {
  int64_t channels = 0;
  int64_t bins = 0;
  std::vector<std::complex<Real>> v;

  SpatialCovariance() = default;
  SpatialCovariance(int64_t channels_, int64_t bins_)
      : channels(channels_), bins(bins_) {
    v.assign(static_cast<size_t>(bins * channels * channels),
             std::complex<Real>(0, 0));
  }

  std::complex<Real>& at(int64_t f, int64_t i, int64_t j) {
    return v[(f * channels + i) * channels + j];
  }
  std::complex<Real> at(int64_t f, int64_t i, int64_t j) const {
    return v[(f * channels + i) * channels + j];
  }
};

// Phi(f) = sum_t w[t,f] y(t,f) y(t,f)^H / max(sum_t w[t,f], 1e-8).
// Only the upper triangle is accumulated; the lower is mirrored by
// conjugation afterwards, so the result is Hermitian to the last bit and
// the diagonal has exactly zero imaginary part.
template <class Real>
SpatialCovariance<Real> estimate_covariance(const Spectrogram<Real>& spec,
                                            const std::vector<Real>& weight) {
  if (int64_t(weight.size()) != spec.frames * spec.bins)
    throw ShapeError("covariance: weight plane has " +
                     std::to_string(weight.size()) + " cells but the "
                     "spectrogram has " +
                     std::to_string(spec.frames * spec.bins));
  const int64_t c_n = spec.channels;
  SpatialCovariance<Real> phi(c_n, spec.bins);
  for (int64_t f = 0; f < spec.bins; ++f) {
    Real norm = 0;
    for (int64_t t = 0; t < spec.frames; ++t) {
      const Real w = weight[static_cast<size_t>(t * spec.bins + f)];
      norm += w;
      for (int64_t i = 0; i < c_n; ++i) {
        const std::complex<Real> yi = spec.at(i, t, f);
        for (int64_t j = i; j < c_n; ++j)
          phi.at(f, i, j) += w * yi * std::conj(spec.at(j, t, f));
      }
    }
    const Real denom = std::max(norm, Real(1e-8));
    for (int64_t i = 0; i < c_n; ++i) {
      phi.at(f, i, i) = std::complex<Real>(phi.at(f, i, i).real() / denom, 0);
      for (int64_t j = i + 1; j < c_n; ++j) {
        phi.at(f, i, j) /= denom;
        phi.at(f, j, i) = std::conj(phi.at(f, i, j));
      }
    }
  }
  return phi;
}

namespace detail {

// Solves A X = B in place with partially pivoted Gaussian elimination.
// a is n x n row-major and is destroyed; b holds nrhs columns packed
// row-major (b[r * nrhs + k]) and is overwritten with the solution.
// Matrices arriving here are diagonally loaded, so a vanishing pivot means
// a caller bug rather than bad data.
template <class Real>
void lu_solve(std::vector<std::complex<Real>>& a, int64_t n,
              std::complex<Real>* b, int64_t nrhs) {
  for (int64_t col = 0; col < n; ++col) {
    int64_t pivot = col;
    Real best = std::abs(a[static_cast<size_t>(col * n + col)]);
    for (int64_t r = col + 1; r < n; ++r) {
      const Real mag = std::abs(a[static_cast<size_t>(r * n + col)]);
      if (mag > best) {
        best = mag;
        pivot = r;
      }
    }
    if (!(best > Real(0)))
      throw InternalError("lu_solve: singular matrix despite loading");
    if (pivot != col) {
      for (int64_t j = 0; j < n; ++j)
        std::swap(a[static_cast<size_t>(col * n + j)],
                  a[static_cast<size_t>(pivot * n + j)]);
      for (int64_t k = 0; k < nrhs; ++k)
        std::swap(b[col * nrhs + k], b[pivot * nrhs + k]);
    }
    const std::complex<Real> inv_piv =
        Real(1) / a[static_cast<size_t>(col * n + col)];
    for (int64_t r = col + 1; r < n; ++r) {
      const std::complex<Real> m =
          a[static_cast<size_t>(r * n + col)] * inv_piv;
      if (m == std::complex<Real>(0, 0)) continue;
      a[static_cast<size_t>(r * n + col)] = m;
      for (int64_t j = col + 1; j < n; ++j)
        a[static_cast<size_t>(r * n + j)] -=
            m * a[static_cast<size_t>(col * n + j)];
      for (int64_t k = 0; k < nrhs; ++k)
        b[r * nrhs + k] -= m * b[col * nrhs + k];
    }
  }
  for (int64_t r = n - 1; r >= 0; --r) {
    for (int64_t k = 0; k < nrhs; ++k) {
      std::complex<Real> s = b[r * nrhs + k];
      for (int64_t j = r + 1; j < n; ++j)
        s -= a[static_cast<size_t>(r * n + j)] * b[j * nrhs + k];
      b[r * nrhs + k] = s / a[static_cast<size_t>(r * n + r)];
    }
  }
}

}  // namespace detail

// Souden weights for one frequency.  phi_s and phi_n are C x C row-major.
// The noise matrix gets diagonal loading of loading * tr(Phi_n) / C before
// the solve.  A noise trace below 1e-12 means the estimate carries no
// information, and the beamformer degrades to picking the reference channel
// unchanged; the same applies when tr(Phi_n^-1 Phi_s) vanishes.
template <class Real>
std::vector<std::complex<Real>> mvdr_weights(const std::complex<Real>* phi_s,
                                             const std::complex<Real>* phi_n,
                                             int64_t channels, int64_t ref,
                                             Real loading = Real(1e-6)) {
  if (ref < 0 || ref >= channels)
    throw ContractError("mvdr: reference channel " + std::to_string(ref) +
                        " out of range for " + std::to_string(channels) +
                        " channels");
  std::vector<std::complex<Real>> w(static_cast<size_t>(channels),
                                    std::complex<Real>(0, 0));
  Real trace_n = 0;
  for (int64_t i = 0; i < channels; ++i)
    trace_n += phi_n[i * channels + i].real();
  if (!(trace_n > Real(1e-12))) {
    w[static_cast<size_t>(ref)] = std::complex<Real>(1, 0);
    return w;
  }

  std::vector<std::complex<Real>> a(phi_n,
                                    phi_n + size_t(channels * channels));
  const Real eps = loading * trace_n / Real(channels);
  for (int64_t i = 0; i < channels; ++i) a[static_cast<size_t>(i * channels + i)] += eps;

  // x = Phi_n^-1 Phi_s, all columns at once.
  std::vector<std::complex<Real>> x(phi_s,
                                    phi_s + size_t(channels * channels));
  detail::lu_solve(a, channels, x.data(), channels);

  std::complex<Real> trace(0, 0);
  for (int64_t i = 0; i < channels; ++i) trace += x[static_cast<size_t>(i * channels + i)];
  if (!(std::abs(trace) > Real(1e-12))) {
    w[static_cast<size_t>(ref)] = std::complex<Real>(1, 0);
    return w;
  }
  for (int64_t i = 0; i < channels; ++i)
    w[static_cast<size_t>(i)] = x[static_cast<size_t>(i * channels + ref)] / trace;
  return w;
}

// One beamformed stream per speaker mask; the final mask is the noise
// estimate.  Input mask values are clipped to [0, 1] before pooling so an
// overconfident mask cannot flip the sign of a covariance term.
template <class Real>
std::vector<Spectrogram<Real>> mvdr_separate(const Spectrogram<Real>& spec,
                                             const MaskSet<Real>& masks,
                                             int64_t ref = 0,
                                             Real loading = Real(1e-6)) {
  if (spec.channels < 2)
    throw NotApplicableError(
        "mvdr: beamforming needs at least two input channels, got " +
        std::to_string(spec.channels));
  if (masks.frames != spec.frames || masks.bins != spec.bins)
    throw ShapeError("mvdr: masks cover " + std::to_string(masks.frames) +
                     "x" + std::to_string(masks.bins) +
                     " cells but the spectrogram is " +
                     std::to_string(spec.frames) + "x" +
                     std::to_string(spec.bins));
  if (masks.num_masks < 2)
    throw ContractError("mvdr: need at least one speaker mask plus noise, "
                        "got " + std::to_string(masks.num_masks) + " masks");
  const int64_t speakers = masks.num_masks - 1;
  const int64_t noise = masks.num_masks - 1;
  const size_t plane = static_cast<size_t>(spec.frames * spec.bins);

  auto clip01 = [](Real v) {
    return std::min(Real(1), std::max(Real(0), v));
  };

  std::vector<Spectrogram<Real>> out;
  out.reserve(static_cast<size_t>(speakers));
  std::vector<Real> w_s(plane), w_n(plane);
  for (int64_t s = 0; s < speakers; ++s) {
    for (int64_t t = 0; t < spec.frames; ++t)
      for (int64_t f = 0; f < spec.bins; ++f) {
        const size_t cell = static_cast<size_t>(t * spec.bins + f);
        w_s[cell] = clip01(masks.at(s, t, f));
        Real pooled = masks.at(noise, t, f);
        for (int64_t o = 0; o < speakers; ++o)
          if (o != s) pooled += masks.at(o, t, f);
        w_n[cell] = clip01(pooled);
      }
    auto phi_s = estimate_covariance(spec, w_s);
    auto phi_n = estimate_covariance(spec, w_n);

    Spectrogram<Real> stream(1, spec.frames, spec.win, spec.hop);
    const size_t mat = static_cast<size_t>(spec.channels * spec.channels);
    for (int64_t f = 0; f < spec.bins; ++f) {
      auto w = mvdr_weights(phi_s.v.data() + size_t(f) * mat,
                            phi_n.v.data() + size_t(f) * mat, spec.channels,
                            ref, loading);
      for (int64_t t = 0; t < spec.frames; ++t) {
        std::complex<Real> acc(0, 0);
        for (int64_t c = 0; c < spec.channels; ++c)
          acc += std::conj(w[static_cast<size_t>(c)]) * spec.at(c, t, f);
        stream.at(0, t, f) = acc;
      }
    }
    out.push_back(std::move(stream));
  }
  return out;
}

}  // namespace css
