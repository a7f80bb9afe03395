#pragma once

// Iterative radix-2 FFT.  Power-of-two lengths only; the STFT window is 512
// and the convolution helper pads to the next power of two.

#include <complex>
#include <cstdint>
#include <vector>

#include "css/common.hpp"

namespace css {

template <class Real>
class FftPlan {
 public:
  explicit FftPlan(size_t n) : n_(n) {
    if (n == 0 || (n & (n - 1)) != 0)
      throw ConfigError("FftPlan: length must be a power of two, got " +
                        std::to_string(n));
    rev_.resize(n);
    size_t log2n = 0;
    while ((size_t(1) << log2n) < n) ++log2n;
    for (size_t i = 0; i < n; ++i) {
      size_t r = 0;
      for (size_t b = 0; b < log2n; ++b)
        if (i & (size_t(1) << b)) r |= size_t(1) << (log2n - 1 - b);
      rev_[i] = r;
    }
    tw_.resize(n / 2);
    const double two_pi = 6.283185307179586476925286766559;
    for (size_t k = 0; k < n / 2; ++k) {
      const double a = -two_pi * double(k) / double(n);
      tw_[k] = std::complex<Real>(Real(std::cos(a)), Real(std::sin(a)));
    }
  }

  size_t size() const { return n_; }

  void forward(std::complex<Real>* x) const {
    for (size_t i = 0; i < n_; ++i)
      if (rev_[i] > i) std::swap(x[i], x[rev_[i]]);
    for (size_t len = 2; len <= n_; len <<= 1) {
      const size_t half = len >> 1;
      const size_t step = n_ / len;
      for (size_t base = 0; base < n_; base += len) {
        for (size_t j = 0; j < half; ++j) {
          const std::complex<Real> w = tw_[j * step];
          const std::complex<Real> u = x[base + j];
          const std::complex<Real> v = x[base + j + half] * w;
          x[base + j] = u + v;
          x[base + j + half] = u - v;
        }
      }
    }
  }

  void inverse(std::complex<Real>* x) const {
    for (size_t i = 0; i < n_; ++i) x[i] = std::conj(x[i]);
    forward(x);
    const Real inv = Real(1) / Real(n_);
    for (size_t i = 0; i < n_; ++i) x[i] = std::conj(x[i]) * inv;
  }

 private:
  size_t n_;
  std::vector<size_t> rev_;
  std::vector<std::complex<Real>> tw_;
};

// Real input, first n/2+1 bins out.  `scratch` must hold n complex values.
template <class Real>
void rfft(const FftPlan<Real>& plan, const Real* x,
          std::complex<Real>* scratch, std::complex<Real>* out) {
  const size_t n = plan.size();
  for (size_t i = 0; i < n; ++i) scratch[i] = std::complex<Real>(x[i], Real(0));
  plan.forward(scratch);
  for (size_t k = 0; k <= n / 2; ++k) out[k] = scratch[k];
}

// Expands n/2+1 bins back to a real frame using conjugate symmetry.
template <class Real>
void irfft(const FftPlan<Real>& plan, const std::complex<Real>* bins,
           std::complex<Real>* scratch, Real* out) {
  const size_t n = plan.size();
  for (size_t k = 0; k <= n / 2; ++k) scratch[k] = bins[k];
  for (size_t k = n / 2 + 1; k < n; ++k) scratch[k] = std::conj(bins[n - k]);
  plan.inverse(scratch);
  for (size_t i = 0; i < n; ++i) out[i] = scratch[i].real();
}

// Full linear convolution via zero-padded FFT, length x + h - 1.  Used for
// applying room impulse responses, where direct convolution would be far too
// slow at kernel lengths in the thousands.
template <class Real>
std::vector<Real> fft_convolve(const std::vector<Real>& x,
                               const std::vector<Real>& h) {
  if (x.empty() || h.empty()) return {};
  const size_t out_len = x.size() + h.size() - 1;
  size_t n = 1;
  while (n < out_len) n <<= 1;
  FftPlan<Real> plan(n);
  std::vector<std::complex<Real>> fx(n), fh(n);
  for (size_t i = 0; i < x.size(); ++i) fx[i] = x[i];
  for (size_t i = 0; i < h.size(); ++i) fh[i] = h[i];
  plan.forward(fx.data());
  plan.forward(fh.data());
  for (size_t i = 0; i < n; ++i) fx[i] *= fh[i];
  plan.inverse(fx.data());
  std::vector<Real> out(out_len);
  for (size_t i = 0; i < out_len; ++i) out[i] = fx[i].real();
  return out;
}

}  // namespace css
