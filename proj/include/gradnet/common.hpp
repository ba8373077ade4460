#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace gradnet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad geometry, bad config keys, incompatible shapes.
struct ConfigError : Error {
  using Error::Error;
};
struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};
// NaN/Inf where finite values are required.
struct NumericError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

/// Seeded generator with hand-rolled uniform/normal so streams are
/// bit-stable across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int uniform_int(int n) {
    return n <= 1 ? 0 : static_cast<int>(gen_() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace gradnet
