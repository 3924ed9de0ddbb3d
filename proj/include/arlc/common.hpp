// Shared basics: scalar type, deterministic RNG, error taxonomy.
#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace arlc {

#ifdef ARLC_REAL_FLOAT
using real_t = float;
#else
using real_t = double;
#endif

// ---- errors ----------------------------------------------------------
// ValidationError and its children map to CLI exit code 1, everything
// else derived from Error maps to exit code 2.

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValidationError : Error {
  using Error::Error;
};
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};
struct RangeError : ValidationError {
  using ValidationError::ValidationError;
};
struct ParseError : ValidationError {
  using ValidationError::ValidationError;
};
struct LoadError : ValidationError {
  using ValidationError::ValidationError;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct DegenerateInputError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// ---- deterministic RNG -----------------------------------------------
// splitmix64: identical streams on every platform for a given seed, which
// is what makes datasets and checkpoints reproducible byte-for-byte.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, n). Modulo bias is < n / 2^64, irrelevant at our sizes.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Uniform integer in [lo, hi], inclusive.
  int range(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller; deterministic, no cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream for (base, index), used for one-stream-
// per-puzzle generation.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  Rng r(base ^ (0x9e3779b97f4a7c15ull * (index + 1)));
  return r.next_u64();
}

}  // namespace arlc
