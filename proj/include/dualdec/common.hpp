#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dualdec {

// Test and reference precision is 64-bit. Define DUALDEC_REAL_FLOAT to train
// in 32-bit; the test suite assumes double.
#ifdef DUALDEC_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

// ----------------------------- errors -----------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensors.
struct DimensionError : Error {
  using Error::Error;
};

// An attention row whose keys are all masked out.
struct DegenerateMaskError : Error {
  using Error::Error;
};

// NaN/Inf reached a place that requires finite values.
struct NumericError : Error {
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
struct DomainError : Error {
  using Error::Error;
};

// Malformed or empty user-supplied data.
struct InputError : Error {
  using Error::Error;
};

// Inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Unreadable, truncated or incompatible checkpoint.
struct CheckpointError : Error {
  using Error::Error;
};

// Broken internal invariant (e.g. a cycle in the autograd tape).
struct InternalError : Error {
  using Error::Error;
};

// ----------------------------- rng -----------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic RNG with stable output across platforms: xoshiro-free,
// splitmix64-seeded 64-bit state stream. Distributions are hand-rolled so
// results do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x5DEECE66DULL)) {}

  uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // [0, 1) with 53 bits of entropy
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased via rejection
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw DomainError("uniform_int: empty range");
    const uint64_t rem = std::numeric_limits<uint64_t>::max() % n;
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - rem;
    uint64_t v = next_u64();
    while (v > limit) v = next_u64();
    return v % n;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream, stable under the label.
  Rng fork(std::string_view label) const {
    return Rng(splitmix64(state_ ^ fnv1a(label)));
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Derives a component seed from a run seed and a component label, so one
// --seed flag drives every stochastic stage without streams colliding.
inline uint64_t derive_seed(uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ fnv1a(label));
}

// ----------------------------- token ids -----------------------------

using TokenId = int32_t;
using Ids = std::vector<TokenId>;

namespace specials {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr int kCount = 4;
}  // namespace specials

}  // namespace dualdec
