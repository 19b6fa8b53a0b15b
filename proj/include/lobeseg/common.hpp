#ifndef LOBESEG_COMMON_HPP
#define LOBESEG_COMMON_HPP

#include <cstdint>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lobeseg {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor/volume shape disagreements.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid scalar arguments (probabilities out of range, bad enum, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API contract (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid model/train/run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data (unknown label index, empty region, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// File I/O and format problems.
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class UnsupportedError : public IoError {
 public:
  using IoError::IoError;
};

namespace detail {
inline void concat_into(std::ostringstream&) {}
template <class A, class... Rest>
void concat_into(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  concat_into(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  detail::concat_into(os, args...);
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::random distributions are implementation-defined,
// so every stochastic path in the library goes through this generator.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Combine a seed with stream indices into an independent sub-seed.
inline std::uint64_t seed_mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ (a + 0x9E3779B97F4A7C15ull));
  h = splitmix64(h ^ (b + 0xC2B2AE3D27D4EB4Full));
  h = splitmix64(h ^ (c + 0x165667B19E3779F9ull));
  return h;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

class Pcg32 {
 public:
  explicit Pcg32(std::uint64_t seed, std::uint64_t stream = 0) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += splitmix64(seed);
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t next_u64() {
    std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform in [0,1).
  double next_double() { return next_u32() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Integer in [0, n).
  std::uint32_t below(std::uint32_t n) {
    return static_cast<std::uint32_t>(next_double() * n) % n;
  }

  // Standard normal via Box-Muller; one spare value cached.
  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = next_double();
    } while (u1 <= 1e-300);
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 1;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Worker-count control and a deterministic parallel_for. Work is split into
// fixed per-thread ranges, so results do not depend on scheduling order.

int num_threads();
void set_num_threads(int n);

// body(begin, end) is invoked on disjoint ranges covering [0, n).
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body,
                  std::int64_t grain = 1024);

}  // namespace lobeseg

#endif  // LOBESEG_COMMON_HPP
