// spkr/common.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef SPKR_COMMON_HPP_
#define SPKR_COMMON_HPP_

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace spkr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// Frames are stored one per row; row-major keeps a frame contiguous.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Base class of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline std::function<void(const std::string &)> &warning_sink() {
  static std::function<void(const std::string &)> sink =
      [](const std::string &msg) { std::cerr << "WARNING: " << msg << '\n'; };
  return sink;
}
}  // namespace detail

inline void Warn(const std::string &msg) { detail::warning_sink()(msg); }

/// Replaces the warning sink, returning the previous one.
inline std::function<void(const std::string &)> SetWarningSink(
    std::function<void(const std::string &)> sink) {
  return std::exchange(detail::warning_sink(), std::move(sink));
}

// ---------------------------------------------------------------------------
// Deterministic randomness.  std::mt19937_64 has a standardized output
// sequence; the std:: distributions do not, so the conversions below are ours
// and results are bit-identical across standard libraries.

inline std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t HashString(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t MixSeed(std::uint64_t a, std::uint64_t b) {
  return SplitMix64(a ^ SplitMix64(b + 0x632be59bd9b4e019ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(SplitMix64(seed)) {}

  std::uint64_t NextU64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t Below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::Below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do { x = engine_(); } while (x >= limit);
    return x % n;
  }

  /// Standard normal by Box-Muller.
  double Normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do { u1 = Uniform(); } while (u1 <= 0.0);
    const double u2 = Uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double Normal(double mean, double sd) { return mean + sd * Normal(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Small numeric helpers.

inline double LogSumExp(const double *x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

inline bool AllFinite(const Eigen::Ref<const Matrix> &m) { return m.allFinite(); }

/// ln det of a symmetric positive-definite matrix; throws if not PD.
inline double LogDetSpd(const Matrix &m, const char *what = "matrix") {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success)
    throw Error(std::string(what) + " is not positive definite");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

}  // namespace spkr

#endif  // SPKR_COMMON_HPP_
