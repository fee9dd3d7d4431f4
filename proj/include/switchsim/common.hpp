#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace switchsim {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or indices that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration (maze files, run flags, task specs).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File-system or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown (singular systems, degenerate denominators).
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline void require_dims(bool ok, std::string_view what) {
  if (!ok) throw DimensionError(std::string(what));
}

// splitmix64 finalizer; used to derive independent seeds from (seed, index).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(mix64(seed) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

// FNV-1a, stable across platforms (std::hash is not).
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for a named pipeline stage: the stage name is hashed into the master seed.
inline std::uint64_t stage_seed(std::uint64_t master, std::string_view stage) {
  return derive_seed(master, fnv1a(stage));
}

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) via rejection sampling; platform independent.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) throw Error("uniform_index: empty range");
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

/// Standard normal draw via Box-Muller on uniform01 (std::normal_distribution is
/// implementation-defined, which would break cross-toolchain reproducibility).
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Draw an index from an unnormalized nonnegative weight vector.
template <typename Weights>
int sample_categorical(const Weights& w, Rng& rng) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) total += w[i];
  if (!(total > 0.0)) throw NumericalError("sample_categorical: zero total weight");
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc && w[i] > 0.0) return static_cast<int>(i);
  }
  // Rounding left u at the very top; take the last positive entry.
  for (Eigen::Index i = w.size() - 1; i >= 0; --i)
    if (w[i] > 0.0) return static_cast<int>(i);
  return 0;
}

/// Round-trip decimal rendering with 17 significant digits.
inline std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace switchsim
