#pragma once

// Scale-invariant SNR.  Projects the estimate onto the reference after
// removing the means, so a global gain on the estimate does not change the
// score.  Capped at +80 dB; a perfect reconstruction reports the cap
// instead of infinity.

#include <cmath>
#include <cstdint>
#include <vector>

#include "css/common.hpp"

namespace css {

constexpr double kSiSnrCapDb = 80.0;

template <class Real>
double si_snr(const Real* est, const Real* ref, int64_t n,
              double cap_db = kSiSnrCapDb) {
  if (n <= 0) throw ContractError("si_snr: empty signals");
  double mean_e = 0, mean_r = 0;
  for (int64_t i = 0; i < n; ++i) {
    mean_e += double(est[i]);
    mean_r += double(ref[i]);
  }
  mean_e /= double(n);
  mean_r /= double(n);

  double dot = 0, ref_sq = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double e = double(est[i]) - mean_e;
    const double r = double(ref[i]) - mean_r;
    dot += e * r;
    ref_sq += r * r;
  }
  if (ref_sq <= 0)
    throw ContractError("si_snr: reference signal has zero energy");

  const double alpha = dot / ref_sq;
  double sig = 0, err = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double e = double(est[i]) - mean_e;
    const double r = double(ref[i]) - mean_r;
    const double s = alpha * r;
    sig += s * s;
    err += (e - s) * (e - s);
  }
  if (err <= 0) return cap_db;
  const double db = 10.0 * std::log10(sig / err);
  return std::min(db, cap_db);
}

template <class Real>
double si_snr(const std::vector<Real>& est, const std::vector<Real>& ref,
              double cap_db = kSiSnrCapDb) {
  if (est.size() != ref.size())
    throw ContractError("si_snr: length mismatch " +
                        std::to_string(est.size()) + " vs " +
                        std::to_string(ref.size()));
  return si_snr(est.data(), ref.data(), int64_t(est.size()), cap_db);
}

}  // namespace css
