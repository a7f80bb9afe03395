#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, CRC32, bounded
// parallel_for.  Everything downstream includes this header.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace css {

// ============================================================================
// Errors
// ============================================================================
//
// Exit-code mapping used by the CLI: usage errors come from the flag parser
// (exit 1), every Error subclass below except InternalError is a data or
// contract problem (exit 2), InternalError is an invariant violation (exit 3).

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents do not line up (matmul mismatch, bad mask shape, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A configuration value is out of its valid range (even conv kernel,
// attn_dim not divisible by num_heads, nonpositive chunk sizes, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A runtime precondition on data was violated (mask outside [0,1],
// non-scalar loss, zero-length reference signal, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Chunk longer than the configured maximum.
class ChunkError : public Error {
 public:
  using Error::Error;
};

// Attention cache holds more frames than its configured capacity.
class CacheError : public Error {
 public:
  using Error::Error;
};

// Unreadable or corrupt file (bad magic, CRC mismatch, truncation, bad WAV).
class FileFormatError : public Error {
 public:
  using Error::Error;
};

// Source or microphone placed outside the room, degenerate room dims.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Operation requested on data that cannot support it (beamforming a
// single-channel recording).
class NotApplicableError : public Error {
 public:
  using Error::Error;
};

// A bug in this library, not in the caller's data.
class InternalError : public Error {
 public:
  using Error::Error;
};

// ============================================================================
// Small string helpers
// ============================================================================

template <class T>
std::string shape_to_string(const std::vector<T>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ============================================================================
// Deterministic RNG
// ============================================================================
//
// SplitMix64 core.  Chosen over std::mt19937 because the standard library
// distributions are not bit-reproducible across implementations; everything
// here is spelled out so a seed gives the same stream on every build.

inline uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d4a2fa9d6cfcfbull;
  return z ^ (z >> 31);
}

// Stateless mix of a seed with stream/step indices.  Used to derive
// independent draws as a pure function of (seed, indices), which is what
// makes checkpoint-resume land on the identical data order.
inline uint64_t hash_mix(uint64_t seed, uint64_t a, uint64_t b = 0,
                         uint64_t c = 0) {
  uint64_t s = seed;
  s ^= 0x9e3779b97f4a7c15ull + a;
  (void)splitmix64_next(s);
  s ^= 0xd1b54a32d192ed03ull + b;
  (void)splitmix64_next(s);
  s ^= 0x8cb92ba72f3d8dd7ull + c;
  return splitmix64_next(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform in [0, 1).  53-bit mantissa fill.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).  n must be positive.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw InternalError("Rng::uniform_int: n must be positive");
    // Modulo bias is < 2^-40 for the ranges used here (n << 2^64).
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller.  Caches the second draw.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Avoid log(0).
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ============================================================================
// CRC32 (IEEE 802.3 reflected, poly 0xEDB88320)
// ============================================================================

namespace detail {
inline const std::array<uint32_t, 256>& crc32_table() {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  return table;
}
}  // namespace detail

// Check value: crc32 of "123456789" is 0xCBF43926.
inline uint32_t crc32(const void* data, size_t len, uint32_t crc = 0) {
  const auto& table = detail::crc32_table();
  const auto* p = static_cast<const unsigned char*>(data);
  crc = ~crc;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
  return ~crc;
}

// ============================================================================
// parallel_for
// ============================================================================
//
// Static partition of [0, n) over worker threads.  Thread count is
// min(hardware, CSS_NUM_THREADS if set).  Each index is processed exactly
// once and workers write only to their own indices, so results do not depend
// on the thread count.

inline int max_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("CSS_NUM_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1 && v < 1024) hw = std::min<long>(hw, v);
  }
  return hw;
}

inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  const int threads = std::min<int64_t>(max_threads(), n);
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int64_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace css
