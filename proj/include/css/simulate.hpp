#pragma once

// Synthetic mixture construction: image-method room impulse responses, a
// deterministic parametric speech surrogate, far-field isotropic noise, and
// overlap-controlled mixing with exact energy bookkeeping.
//
// Everything here is a pure function of a seed, so datasets never need to be
// shipped: a manifest plus the generator reproduces every sample bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "css/audio.hpp"
#include "css/common.hpp"
#include "css/fft.hpp"
#include "css/wav.hpp"

namespace css {

using Point3 = std::array<double, 3>;

struct RoomSpec {
  Point3 dims{6.0, 5.0, 3.0};
  std::vector<Point3> sources;
  std::vector<Point3> mics;
  int reflection_order = 6;
  double absorption = 0.6;  // energy fraction lost per wall bounce
  double speed_of_sound = 343.0;
};

namespace detail {

constexpr double kPi = 3.14159265358979323846;

inline std::string point_to_string(const Point3& p) {
  return "(" + std::to_string(p[0]) + ", " + std::to_string(p[1]) + ", " +
         std::to_string(p[2]) + ")";
}

inline bool strictly_inside(const Point3& p, const Point3& dims) {
  for (int a = 0; a < 3; ++a)
    if (!(p[a] > 0.0 && p[a] < dims[a])) return false;
  return true;
}

}  // namespace detail

inline void validate_room(const RoomSpec& room) {
  for (int a = 0; a < 3; ++a)
    if (!(room.dims[a] > 0.0))
      throw GeometryError("room: dimensions must be positive, got " +
                          detail::point_to_string(room.dims));
  if (room.reflection_order < 0 || room.reflection_order > 6)
    throw ConfigError("room: reflection order must be in [0, 6], got " +
                      std::to_string(room.reflection_order));
  if (!(room.absorption >= 0.0 && room.absorption <= 1.0))
    throw ConfigError("room: absorption must be in [0, 1], got " +
                      std::to_string(room.absorption));
  if (!(room.speed_of_sound > 0.0))
    throw ConfigError("room: speed of sound must be positive");
  for (const auto& s : room.sources)
    if (!detail::strictly_inside(s, room.dims))
      throw GeometryError("room: source " + detail::point_to_string(s) +
                          " is not strictly inside " +
                          detail::point_to_string(room.dims));
  for (const auto& m : room.mics)
    if (!detail::strictly_inside(m, room.dims))
      throw GeometryError("room: microphone " + detail::point_to_string(m) +
                          " is not strictly inside " +
                          detail::point_to_string(room.dims));
}

// Center element plus (count - 1) equally spaced on a horizontal circle.
inline std::vector<Point3> circular_array(const Point3& center, double radius,
                                          int count) {
  if (count < 1)
    throw ConfigError("circular_array: need at least one element");
  std::vector<Point3> mics;
  mics.push_back(center);
  for (int k = 1; k < count; ++k) {
    const double az = 2.0 * detail::kPi * double(k - 1) / double(count - 1);
    mics.push_back({center[0] + radius * std::cos(az),
                    center[1] + radius * std::sin(az), center[2]});
  }
  return mics;
}

namespace detail {

constexpr int kDelayTaps = 32;

// Symmetric windowed sinc centered kDelayTaps/2 past ceil(delay).  The
// support begins at ceil(delay), so no path carries energy before its true
// arrival, and the constant half-kernel latency is shared by every arrival,
// keeping relative timing exact.  Unit-energy normalization removes the
// fractional-offset scalloping a truncated sinc would add, so attenuation
// laws survive interpolation.  An integer delay degenerates to one exact
// impulse kDelayTaps/2 samples after the arrival.
inline int64_t delay_kernel(double delay_samples, double* taps) {
  const int64_t start = int64_t(std::ceil(delay_samples));
  const double eta = double(start) - delay_samples;  // in [0, 1)
  double energy = 0.0;
  for (int j = 0; j < kDelayTaps; ++j) {
    const double x = double(j) + eta - double(kDelayTaps / 2);
    const double window = 0.5 * (1.0 + std::cos(kPi * x / (kDelayTaps / 2)));
    const double sinc = x == 0.0 ? 1.0 : std::sin(kPi * x) / (kPi * x);
    taps[j] = sinc * window;
    energy += taps[j] * taps[j];
  }
  const double scale = 1.0 / std::sqrt(energy);
  for (int j = 0; j < kDelayTaps; ++j) taps[j] *= scale;
  return start;
}

}  // namespace detail

// Allen-Berkley image method limited by total reflection count.  Each image
// contributes beta^bounces / distance at delay distance / c.
template <class Real>
std::vector<Real> image_method_rir(const RoomSpec& room, const Point3& src,
                                   const Point3& mic) {
  RoomSpec check = room;
  check.sources = {src};
  check.mics = {mic};
  validate_room(check);

  const double beta = std::sqrt(std::max(0.0, 1.0 - room.absorption));
  const double to_samples = double(kSampleRate) / room.speed_of_sound;
  const int order = room.reflection_order;

  std::vector<std::pair<double, double>> arrivals;  // delay samples, amplitude
  double max_delay = 0.0;
  for (int nx = -order; nx <= order; ++nx)
    for (int px = 0; px <= 1; ++px) {
      const int bx = std::abs(nx - px) + std::abs(nx);
      if (bx > order) continue;
      const double ix = (1 - 2 * px) * src[0] + 2.0 * nx * room.dims[0];
      for (int ny = -order; ny <= order; ++ny)
        for (int py = 0; py <= 1; ++py) {
          const int by = bx + std::abs(ny - py) + std::abs(ny);
          if (by > order) continue;
          const double iy = (1 - 2 * py) * src[1] + 2.0 * ny * room.dims[1];
          for (int nz = -order; nz <= order; ++nz)
            for (int pz = 0; pz <= 1; ++pz) {
              const int b = by + std::abs(nz - pz) + std::abs(nz);
              if (b > order) continue;
              const double iz =
                  (1 - 2 * pz) * src[2] + 2.0 * nz * room.dims[2];
              const double dx = ix - mic[0], dy = iy - mic[1],
                           dz = iz - mic[2];
              const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
              if (dist < 1e-3)
                throw GeometryError(
                    "rir: image source coincides with the microphone");
              const double delay = dist * to_samples;
              arrivals.emplace_back(delay, std::pow(beta, b) / dist);
              max_delay = std::max(max_delay, delay);
            }
        }
    }

  std::vector<double> rir(size_t(std::ceil(max_delay)) + detail::kDelayTaps,
                          0.0);
  double taps[detail::kDelayTaps];
  for (const auto& [delay, amp] : arrivals) {
    const int64_t start = detail::delay_kernel(delay, taps);
    for (int j = 0; j < detail::kDelayTaps; ++j)
      rir[size_t(start + j)] += amp * taps[j];
  }
  std::vector<Real> out(rir.size());
  for (size_t i = 0; i < rir.size(); ++i) out[i] = Real(rir[i]);
  return out;
}

// Diffuse noise approximated by 36 independent white sources on a far
// sphere around the array centroid, each arriving as a delayed, attenuated
// direct path.  Coincident microphones therefore receive bit-identical
// channels, and spacing decorrelates high frequencies first.
template <class Real>
AudioBuffer<Real> isotropic_noise(const RoomSpec& room, int64_t length,
                                  Rng& rng) {
  if (room.mics.empty())
    throw GeometryError("isotropic_noise: room has no microphones");
  const int64_t mics = int64_t(room.mics.size());
  AudioBuffer<Real> out(mics, std::max<int64_t>(length, 0));
  if (length <= 0) return out;

  Point3 centroid{0, 0, 0};
  for (const auto& m : room.mics)
    for (int a = 0; a < 3; ++a) centroid[a] += m[a] / double(mics);

  constexpr int kSources = 36;
  constexpr double kRadius = 50.0;
  const double to_samples = double(kSampleRate) / room.speed_of_sound;
  const double golden = detail::kPi * (3.0 - std::sqrt(5.0));

  std::vector<double> delay(static_cast<size_t>(mics)), amp(static_cast<size_t>(mics));
  for (int k = 0; k < kSources; ++k) {
    const double z = 1.0 - 2.0 * (double(k) + 0.5) / kSources;
    const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double az = golden * double(k);
    const Point3 pos{centroid[0] + kRadius * rxy * std::cos(az),
                     centroid[1] + kRadius * rxy * std::sin(az),
                     centroid[2] + kRadius * z};
    double dmin = std::numeric_limits<double>::max(), dmax = 0.0;
    for (int64_t m = 0; m < mics; ++m) {
      const auto& mp = room.mics[size_t(m)];
      const double dx = pos[0] - mp[0], dy = pos[1] - mp[1],
                   dz = pos[2] - mp[2];
      const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
      delay[size_t(m)] = dist * to_samples;
      amp[size_t(m)] = 1.0 / dist;
      dmin = std::min(dmin, delay[size_t(m)]);
      dmax = std::max(dmax, delay[size_t(m)]);
    }
    // Only delay differences across the array matter; the bulk propagation
    // time is dropped so the white segment stays short.
    const int64_t span =
        int64_t(std::ceil(dmax - dmin)) + detail::kDelayTaps;
    std::vector<double> white(size_t(length + span));
    for (auto& w : white) w = rng.gaussian();
    double taps[detail::kDelayTaps];
    for (int64_t m = 0; m < mics; ++m) {
      const int64_t start = detail::delay_kernel(delay[size_t(m)] - dmin, taps);
      Real* dst = out.channel(m);
      for (int j = 0; j < detail::kDelayTaps; ++j) {
        const double g = amp[size_t(m)] * taps[j];
        const double* srcp = white.data() + (span - start - j);
        for (int64_t t = 0; t < length; ++t) dst[t] += Real(g * srcp[t]);
      }
    }
  }
  return out;
}

namespace detail {

// Two-pole resonator, applied in place.  Gain is left unnormalized; callers
// normalize the finished utterance.
inline void resonate(std::vector<double>& x, double freq, double bw) {
  const double r = std::exp(-kPi * bw / kSampleRate);
  const double c = 2.0 * r * std::cos(2.0 * kPi * freq / kSampleRate);
  const double g = 1.0 - r;
  double y1 = 0.0, y2 = 0.0;
  for (auto& v : x) {
    const double y = g * v + c * y1 - r * r * y2;
    y2 = y1;
    y1 = y;
    v = y;
  }
}

}  // namespace detail

// Deterministic speech stand-in: a jittered glottal pulse train shaped by
// three formant resonators and gated by a syllabic envelope.  Even speaker
// ids take the low pitch class and odd ids the high one, so a cross-parity
// pair always occupies distinct spectral regions.  Voice identity depends
// only on the speaker id; the utterance seed varies delivery.
template <class Real>
AudioBuffer<Real> surrogate_speech(uint32_t speaker_id, uint64_t utterance_seed,
                                   int64_t length) {
  if (length <= 0)
    throw ContractError("surrogate_speech: length must be positive, got " +
                        std::to_string(length));
  const double kPi = detail::kPi;
  Rng voice(hash_mix(0x564F494345ull, speaker_id));
  const bool low = speaker_id % 2 == 0;
  const double f0 = low ? voice.uniform(85.0, 140.0)
                        : voice.uniform(190.0, 260.0);
  const double f1 = low ? voice.uniform(320.0, 720.0)
                        : voice.uniform(420.0, 950.0);
  const double f2 = low ? voice.uniform(950.0, 1800.0)
                        : voice.uniform(1250.0, 2400.0);
  const double f3 = low ? voice.uniform(2200.0, 3000.0)
                        : voice.uniform(2600.0, 3400.0);

  Rng rng(hash_mix(utterance_seed, speaker_id, 0x555454ull));
  std::vector<double> x(size_t(length), 0.0);

  const double vib_phase = rng.uniform(0.0, 2.0 * kPi);
  double t = rng.uniform(0.0, double(kSampleRate) / f0);
  while (t < double(length)) {
    x[size_t(t)] += 1.0;
    const double vib =
        1.0 + 0.03 * std::sin(2.0 * kPi * 5.0 * t / kSampleRate + vib_phase);
    const double jitter = std::clamp(1.0 + 0.02 * rng.gaussian(), 0.8, 1.2);
    t += double(kSampleRate) / (f0 * vib) * jitter;
  }
  for (auto& v : x) v += 0.003 * rng.gaussian();  // aspiration floor

  // Glottal rolloff (-12 dB/oct), formants, then lip-radiation difference.
  for (int pass = 0; pass < 2; ++pass) {
    double lp = 0.0;
    for (auto& v : x) {
      lp = 0.95 * lp + 0.05 * v;
      v = lp;
    }
  }
  detail::resonate(x, f1, 80.0);
  detail::resonate(x, f2, 120.0);
  detail::resonate(x, f3, 200.0);
  double prev = 0.0;
  for (auto& v : x) {
    const double d = v - prev;
    prev = v;
    v = d;
  }

  // Syllabic gating: voiced bursts separated by short silences, with 10 ms
  // raised-cosine edges.
  const int64_t ramp = kSampleRate / 100;
  std::vector<double> env(size_t(length), 0.0);
  int64_t p = 0;
  while (p < length) {
    const int64_t on = int64_t(rng.uniform(0.12, 0.30) * kSampleRate);
    const int64_t off = int64_t(rng.uniform(0.04, 0.12) * kSampleRate);
    for (int64_t i = 0; i < on && p + i < length; ++i) {
      double g = 1.0;
      if (i < ramp) g = 0.5 - 0.5 * std::cos(kPi * double(i) / double(ramp));
      if (on - 1 - i < ramp)
        g = std::min(g, 0.5 - 0.5 * std::cos(kPi * double(on - 1 - i) /
                                             double(ramp)));
      env[size_t(p + i)] = g;
    }
    p += on + off;
  }
  double e = 0.0;
  int64_t active = 0;
  for (int64_t i = 0; i < length; ++i) {
    x[size_t(i)] *= env[size_t(i)];
    if (env[size_t(i)] > 0.0) {
      e += x[size_t(i)] * x[size_t(i)];
      ++active;
    }
  }
  const double scale = e > 0.0 ? 1.0 / std::sqrt(e / double(active)) : 1.0;

  AudioBuffer<Real> out(1, length);
  for (int64_t i = 0; i < length; ++i)
    out.at(0, i) = Real(x[size_t(i)] * scale);
  return out;
}

// ============================================================================
// Mixture recipes
// ============================================================================

enum class OverlapPattern { kFull, kPartial, kSequential };

inline const char* pattern_name(OverlapPattern p) {
  switch (p) {
    case OverlapPattern::kFull: return "full";
    case OverlapPattern::kPartial: return "partial";
    case OverlapPattern::kSequential: return "sequential";
  }
  throw InternalError("pattern_name: unhandled pattern");
}

inline OverlapPattern pattern_from_name(const std::string& name) {
  if (name == "full") return OverlapPattern::kFull;
  if (name == "partial") return OverlapPattern::kPartial;
  if (name == "sequential") return OverlapPattern::kSequential;
  throw ConfigError("unknown overlap pattern '" + name +
                    "' (expected full, partial, or sequential)");
}

struct MixtureRecipe {
  uint64_t seed = 0;
  std::vector<uint32_t> speakers;  // 1 or 2 entries
  OverlapPattern pattern = OverlapPattern::kFull;
  double target_overlap = 1.0;  // intersection over union aimed for
  double gap_s = 0.0;           // sequential inter-utterance silence
  double sir_db = 0.0;
  double snr_db = 5.0;
  double utterance_s = 3.0;
  int channels = 7;
  bool noise_enabled = true;
};

struct MixtureOptions {
  uint64_t seed = 1;
  int channels = 7;
  uint32_t num_speakers = 16;  // voice pool; ids alternate pitch class
  double p_single = 0.10;
  // Pattern weights tuned so the measured mean overlap of a default set
  // sits near 50%.
  double w_full = 0.38;
  double w_partial = 0.33;
  double w_sequential = 0.29;
  double min_utterance_s = 2.5;
  double max_utterance_s = 4.0;
  double sir_lo = -5.0, sir_hi = 5.0;
  double snr_lo = 0.0, snr_hi = 10.0;
};

// Pure function of (options, index): safe to evaluate in any order or in
// parallel, and a manifest row can always be regenerated from it.
inline MixtureRecipe sample_recipe(const MixtureOptions& opt, int64_t index) {
  Rng rng(hash_mix(opt.seed, uint64_t(index), 0x524543ull));
  MixtureRecipe r;
  r.seed = hash_mix(opt.seed, uint64_t(index), 0x4D4958ull);
  r.channels = opt.channels;
  r.utterance_s = rng.uniform(opt.min_utterance_s, opt.max_utterance_s);
  r.sir_db = rng.uniform(opt.sir_lo, opt.sir_hi);
  r.snr_db = rng.uniform(opt.snr_lo, opt.snr_hi);

  const uint32_t half = std::max(1u, opt.num_speakers / 2);
  const uint32_t low = 2 * uint32_t(rng.uniform_int(int64_t(half)));
  const uint32_t high = 2 * uint32_t(rng.uniform_int(int64_t(half))) + 1;
  if (rng.uniform() < opt.p_single) {
    r.speakers = {rng.uniform() < 0.5 ? low : high};
    r.pattern = OverlapPattern::kFull;
    r.target_overlap = 0.0;
    return r;
  }
  r.speakers = {low, high};
  const double wsum = opt.w_full + opt.w_partial + opt.w_sequential;
  if (!(wsum > 0.0))
    throw ConfigError("sample_recipe: pattern weights sum to zero");
  const double u = rng.uniform() * wsum;
  if (u < opt.w_full) {
    r.pattern = OverlapPattern::kFull;
    r.target_overlap = 1.0;
  } else if (u < opt.w_full + opt.w_partial) {
    r.pattern = OverlapPattern::kPartial;
    r.target_overlap = rng.uniform(0.2, 0.9);
  } else {
    r.pattern = OverlapPattern::kSequential;
    r.target_overlap = 0.0;
    // Short and long silences in equal shares, mirroring the 0S/0L split.
    r.gap_s = rng.uniform() < 0.5 ? rng.uniform(0.05, 0.35)
                                  : rng.uniform(0.6, 1.4);
  }
  return r;
}

// Random shoebox room with the array near the middle and the two talkers at
// distinct azimuths.  Geometry margins keep every image-method position
// strictly legal.
inline RoomSpec sample_room(Rng& rng, int channels) {
  RoomSpec room;
  room.dims = {rng.uniform(5.0, 8.0), rng.uniform(4.0, 7.0),
               rng.uniform(2.7, 3.4)};
  room.absorption = rng.uniform(0.55, 0.85);
  room.reflection_order = 6;
  const Point3 center{room.dims[0] / 2 + rng.uniform(-0.5, 0.5),
                      room.dims[1] / 2 + rng.uniform(-0.5, 0.5),
                      rng.uniform(0.95, 1.40)};
  room.mics = circular_array(center, 0.0425, channels);

  const double az0 = rng.uniform(0.0, 2.0 * detail::kPi);
  const double sep = rng.uniform(detail::kPi / 4, detail::kPi);
  for (int k = 0; k < 2; ++k) {
    const double az = az0 + (k ? sep : 0.0);
    const double dist = rng.uniform(0.8, 2.2);
    Point3 p{center[0] + dist * std::cos(az), center[1] + dist * std::sin(az),
             rng.uniform(1.1, 1.8)};
    for (int a = 0; a < 3; ++a)
      p[a] = std::clamp(p[a], 0.35, room.dims[a] - 0.35);
    room.sources.push_back(p);
  }
  validate_room(room);
  return room;
}

struct SourcePlacement {
  int64_t offset = 0;  // samples
  int64_t length = 0;
};

inline double interval_overlap_ratio(const SourcePlacement& a,
                                     const SourcePlacement& b) {
  const int64_t lo = std::max(a.offset, b.offset);
  const int64_t hi = std::min(a.offset + a.length, b.offset + b.length);
  const int64_t ov = std::max<int64_t>(0, hi - lo);
  const int64_t un = std::max(a.offset + a.length, b.offset + b.length) -
                     std::min(a.offset, b.offset);
  return un > 0 ? double(ov) / double(un) : 0.0;
}

namespace detail {

// Smallest second-speaker offset whose realized intersection-over-union is
// closest to the target; the ratio is non-increasing in the offset.
inline int64_t partial_offset_for(int64_t la, int64_t lb, double target) {
  auto ratio = [&](int64_t s) {
    return interval_overlap_ratio({0, la}, {s, lb});
  };
  int64_t lo = 0, hi = la;
  while (lo < hi) {
    const int64_t mid = lo + (hi - lo) / 2;
    if (ratio(mid) > target)
      lo = mid + 1;
    else
      hi = mid;
  }
  if (lo > 0 &&
      std::abs(ratio(lo - 1) - target) < std::abs(ratio(lo) - target))
    return lo - 1;
  return lo;
}

}  // namespace detail

template <class Real>
struct MixtureResult {
  AudioBuffer<Real> mixture;
  std::vector<AudioBuffer<Real>> images;  // per source, SIR already applied
  AudioBuffer<Real> noise;                // SNR already applied
  RoomSpec room;
  std::vector<SourcePlacement> placements;
  double overlap_ratio = 0.0;
  double measured_sir_db = std::numeric_limits<double>::quiet_NaN();
  double measured_snr_db = std::numeric_limits<double>::quiet_NaN();
};

// Reverberates each clean utterance at its pattern-derived offset, rescales
// the second image for the recipe SIR, then adds isotropic noise scaled so
// that total speech-to-noise energy hits the recipe SNR exactly.  With the
// noise disabled the mixture is the plain sum of the returned images.
template <class Real>
MixtureResult<Real> synthesize_mixture(
    const MixtureRecipe& recipe, const std::vector<AudioBuffer<Real>>& cleans) {
  const size_t n_src = recipe.speakers.size();
  if (n_src < 1 || n_src > 2)
    throw ContractError("synthesize_mixture: need 1 or 2 speakers, got " +
                        std::to_string(n_src));
  if (cleans.size() != n_src)
    throw ContractError("synthesize_mixture: " + std::to_string(n_src) +
                        " speakers but " + std::to_string(cleans.size()) +
                        " clean sources");
  for (const auto& c : cleans) {
    if (c.channels != 1)
      throw ContractError("synthesize_mixture: clean sources must be mono");
    if (c.length <= 0)
      throw ContractError("synthesize_mixture: zero-length clean source");
    require_sample_rate(c, kSampleRate, "clean source");
  }
  if (recipe.channels < 1)
    throw ConfigError("synthesize_mixture: channel count must be positive");

  MixtureResult<Real> res;
  Rng geo(hash_mix(recipe.seed, 0x524Dull));
  res.room = sample_room(geo, recipe.channels);
  const int64_t mics = int64_t(res.room.mics.size());

  res.placements.resize(n_src);
  res.placements[0] = {0, cleans[0].length};
  if (n_src == 2) {
    const int64_t la = cleans[0].length, lb = cleans[1].length;
    switch (recipe.pattern) {
      case OverlapPattern::kFull:
        res.placements[1] = {0, lb};
        break;
      case OverlapPattern::kPartial:
        res.placements[1] = {
            detail::partial_offset_for(la, lb, recipe.target_overlap), lb};
        break;
      case OverlapPattern::kSequential:
        res.placements[1] = {
            la + int64_t(std::llround(recipe.gap_s * kSampleRate)), lb};
        break;
    }
    res.overlap_ratio =
        interval_overlap_ratio(res.placements[0], res.placements[1]);
  }

  // One RIR set per source; canvas covers every tail.
  std::vector<std::vector<std::vector<Real>>> rirs(n_src);
  int64_t canvas = 0;
  for (size_t s = 0; s < n_src; ++s) {
    rirs[s].reserve(size_t(mics));
    int64_t longest = 0;
    for (int64_t m = 0; m < mics; ++m) {
      rirs[s].push_back(image_method_rir<Real>(
          res.room, res.room.sources[s], res.room.mics[size_t(m)]));
      longest = std::max(longest, int64_t(rirs[s].back().size()));
    }
    canvas = std::max(canvas, res.placements[s].offset +
                                  res.placements[s].length + longest - 1);
  }

  res.images.reserve(n_src);
  for (size_t s = 0; s < n_src; ++s) {
    AudioBuffer<Real> img(mics, canvas);
    std::vector<Real> dry(cleans[s].channel(0),
                          cleans[s].channel(0) + cleans[s].length);
    for (int64_t m = 0; m < mics; ++m) {
      const auto wet = fft_convolve(dry, rirs[s][size_t(m)]);
      Real* dst = img.channel(m) + res.placements[s].offset;
      for (size_t i = 0; i < wet.size(); ++i) dst[i] += wet[i];
    }
    res.images.push_back(std::move(img));
  }

  if (n_src == 2) {
    const double e0 =
        energy(res.images[0].samples.data(), int64_t(res.images[0].samples.size()));
    const double e1 =
        energy(res.images[1].samples.data(), int64_t(res.images[1].samples.size()));
    if (!(e0 > 0.0) || !(e1 > 0.0))
      throw ContractError("synthesize_mixture: a source image has no energy");
    const Real scale =
        Real(std::sqrt(e0 / (e1 * std::pow(10.0, recipe.sir_db / 10.0))));
    for (auto& v : res.images[1].samples) v *= scale;
    res.measured_sir_db =
        10.0 * std::log10(e0 / energy(res.images[1].samples.data(),
                                      int64_t(res.images[1].samples.size())));
  }

  res.mixture = AudioBuffer<Real>(mics, canvas);
  for (const auto& img : res.images)
    for (size_t i = 0; i < img.samples.size(); ++i)
      res.mixture.samples[i] += img.samples[i];

  if (recipe.noise_enabled) {
    const double speech_e = energy(res.mixture.samples.data(),
                                   int64_t(res.mixture.samples.size()));
    Rng noise_rng(hash_mix(recipe.seed, 0x4E5Aull));
    res.noise = isotropic_noise<Real>(res.room, canvas, noise_rng);
    const double noise_e =
        energy(res.noise.samples.data(), int64_t(res.noise.samples.size()));
    if (!(noise_e > 0.0))
      throw InternalError("synthesize_mixture: noise field has no energy");
    const Real scale = Real(
        std::sqrt(speech_e / (noise_e * std::pow(10.0, recipe.snr_db / 10.0))));
    for (auto& v : res.noise.samples) v *= scale;
    res.measured_snr_db =
        10.0 * std::log10(speech_e / energy(res.noise.samples.data(),
                                            int64_t(res.noise.samples.size())));
    for (size_t i = 0; i < res.noise.samples.size(); ++i)
      res.mixture.samples[i] += res.noise.samples[i];
  } else {
    res.noise = AudioBuffer<Real>(mics, canvas);
  }
  return res;
}

// Default clean-source provider: the parametric surrogate at the recipe's
// utterance length.
template <class Real>
std::vector<AudioBuffer<Real>> make_clean_sources(const MixtureRecipe& recipe) {
  const int64_t len = int64_t(std::llround(recipe.utterance_s * kSampleRate));
  std::vector<AudioBuffer<Real>> cleans;
  for (size_t k = 0; k < recipe.speakers.size(); ++k)
    cleans.push_back(surrogate_speech<Real>(
        recipe.speakers[k], hash_mix(recipe.seed, uint64_t(k), 0x434Cull),
        len));
  return cleans;
}

template <class Real>
MixtureResult<Real> simulate_mixture(const MixtureOptions& opt, int64_t index) {
  const MixtureRecipe recipe = sample_recipe(opt, index);
  return synthesize_mixture(recipe, make_clean_sources<Real>(recipe));
}

// ============================================================================
// Datasets on disk
// ============================================================================

struct ManifestEntry {
  std::string id;
  uint64_t seed = 0;
  std::vector<uint32_t> speakers;
  std::string pattern;
  double gap_s = 0.0;
  double overlap_ratio = 0.0;
  double sir_db = 0.0;
  double snr_db = 0.0;
  int channels = 0;
  int64_t samples = 0;
  std::string mixture_path;
  std::vector<std::string> source_paths;
  std::string noise_path;
};

struct DatasetStats {
  int64_t count = 0;
  double mean_overlap = 0.0;
};

namespace detail {

inline std::string mixture_id(int64_t index) {
  std::string s = std::to_string(index);
  return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

}  // namespace detail

// Maps (recipe, slot) to the mono utterance for that speaker slot.
template <class Real>
using CleanProvider =
    std::function<AudioBuffer<Real>(const MixtureRecipe&, int64_t)>;

template <class Real>
CleanProvider<Real> surrogate_provider() {
  return [](const MixtureRecipe& recipe, int64_t slot) {
    const int64_t len =
        int64_t(std::llround(recipe.utterance_s * kSampleRate));
    return surrogate_speech<Real>(recipe.speakers[size_t(slot)],
                                  hash_mix(recipe.seed, uint64_t(slot),
                                           0x434Cull),
                                  len);
  };
}

// Provider backed by a directory of mono 16 kHz WAV files: speaker ids index
// the sorted listing, long files are cropped at a seeded offset, short ones
// tiled.  Lets the pipeline run on real recordings without shipping any.
template <class Real>
CleanProvider<Real> wav_dir_provider(const std::string& dir) {
  namespace fs = std::filesystem;
  auto files = std::make_shared<std::vector<std::string>>();
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".wav")
      files->push_back(entry.path().string());
  std::sort(files->begin(), files->end());
  if (files->empty())
    throw ContractError("speech dir '" + dir + "' contains no .wav files");
  return [files](const MixtureRecipe& recipe, int64_t slot) {
    const uint32_t speaker = recipe.speakers[size_t(slot)];
    const auto& path = (*files)[speaker % files->size()];
    auto wav = read_wav<Real>(path);
    require_sample_rate(wav, kSampleRate, path);
    if (wav.channels != 1) wav = take_channel(wav, 0);
    if (wav.length == 0)
      throw ContractError("clean source '" + path + "' is empty");
    const int64_t len =
        int64_t(std::llround(recipe.utterance_s * kSampleRate));
    AudioBuffer<Real> out(1, len);
    Rng rng(hash_mix(recipe.seed, uint64_t(slot), 0x435250ull));
    const int64_t start =
        wav.length > len ? rng.uniform_int(wav.length - len) : 0;
    for (int64_t i = 0; i < len; ++i)
      out.at(0, i) = wav.at(0, (start + i) % wav.length);
    return out;
  };
}

// Synthesizes n mixtures into out_dir and writes manifest.jsonl, one JSON
// record per line.  Synthesis runs in parallel; each worker owns its own
// files, and manifest order never depends on scheduling.
template <class Real>
DatasetStats generate_dataset(const MixtureOptions& opt, int64_t n,
                              const std::string& out_dir,
                              CleanProvider<Real> provider = nullptr) {
  namespace fs = std::filesystem;
  if (n < 0)
    throw ContractError("generate_dataset: negative mixture count");
  if (!provider) provider = surrogate_provider<Real>();
  fs::create_directories(out_dir);

  std::vector<std::string> lines(static_cast<size_t>(n));
  std::vector<double> overlaps(size_t(n), 0.0);
  parallel_for(n, [&](int64_t i) {
    const MixtureRecipe recipe = sample_recipe(opt, i);
    std::vector<AudioBuffer<Real>> cleans;
    for (size_t k = 0; k < recipe.speakers.size(); ++k)
      cleans.push_back(provider(recipe, int64_t(k)));
    const auto mix = synthesize_mixture(recipe, cleans);

    const std::string id = detail::mixture_id(i);
    nlohmann::json rec;
    rec["id"] = id;
    rec["seed"] = recipe.seed;
    rec["speakers"] = recipe.speakers;
    rec["pattern"] = pattern_name(recipe.pattern);
    rec["gap_s"] = recipe.gap_s;
    rec["sir_db"] = recipe.sir_db;
    rec["snr_db"] = recipe.snr_db;
    rec["utterance_s"] = recipe.utterance_s;
    rec["channels"] = recipe.channels;
    rec["samples"] = mix.mixture.length;
    rec["overlap_ratio"] = mix.overlap_ratio;
    if (std::isnan(mix.measured_sir_db))
      rec["measured_sir_db"] = nullptr;
    else
      rec["measured_sir_db"] = mix.measured_sir_db;
    if (std::isnan(mix.measured_snr_db))
      rec["measured_snr_db"] = nullptr;
    else
      rec["measured_snr_db"] = mix.measured_snr_db;

    const std::string mix_name = id + "_mix.wav";
    write_wav(out_dir + "/" + mix_name, mix.mixture);
    rec["mixture"] = mix_name;
    std::vector<std::string> src_names;
    for (size_t s = 0; s < mix.images.size(); ++s) {
      src_names.push_back(id + "_src" + std::to_string(s) + ".wav");
      write_wav(out_dir + "/" + src_names.back(), mix.images[s]);
    }
    rec["sources"] = src_names;
    const std::string noise_name = id + "_noise.wav";
    write_wav(out_dir + "/" + noise_name, mix.noise);
    rec["noise"] = noise_name;

    lines[size_t(i)] = rec.dump();
    overlaps[size_t(i)] = mix.overlap_ratio;
  });

  std::ofstream mf(out_dir + "/manifest.jsonl", std::ios::binary);
  if (!mf) throw FileFormatError("cannot write " + out_dir + "/manifest.jsonl");
  for (const auto& line : lines) mf << line << "\n";
  mf.close();

  DatasetStats stats;
  stats.count = n;
  for (double o : overlaps) stats.mean_overlap += o;
  if (n > 0) stats.mean_overlap /= double(n);
  return stats;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileFormatError("cannot open manifest '" + path + "'");
  const std::string dir = std::filesystem::path(path).parent_path().string();
  auto resolve = [&](const std::string& rel) {
    return dir.empty() ? rel : dir + "/" + rel;
  };

  std::vector<ManifestEntry> entries;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      ManifestEntry e;
      e.id = rec.at("id").get<std::string>();
      e.seed = rec.at("seed").get<uint64_t>();
      e.speakers = rec.at("speakers").get<std::vector<uint32_t>>();
      e.pattern = rec.at("pattern").get<std::string>();
      e.gap_s = rec.at("gap_s").get<double>();
      e.overlap_ratio = rec.at("overlap_ratio").get<double>();
      e.sir_db = rec.at("sir_db").get<double>();
      e.snr_db = rec.at("snr_db").get<double>();
      e.channels = rec.at("channels").get<int>();
      e.samples = rec.at("samples").get<int64_t>();
      e.mixture_path = resolve(rec.at("mixture").get<std::string>());
      for (const auto& s : rec.at("sources"))
        e.source_paths.push_back(resolve(s.get<std::string>()));
      e.noise_path = resolve(rec.at("noise").get<std::string>());
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FileFormatError("manifest '" + path + "' line " +
                            std::to_string(line_no) + ": " + ex.what());
    }
  }
  return entries;
}

}  // namespace css
