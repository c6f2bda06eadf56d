#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace rangevit {

// Generic runtime failure (bad shapes, bad arguments, numeric misuse).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file content. `offset` is the byte position of the fault when the
// reader can pin one down, -1 otherwise.
class FormatError : public Error {
 public:
  FormatError(const std::string& msg, int64_t offset = -1)
      : Error(offset >= 0 ? msg + " (byte offset " + std::to_string(offset) + ")" : msg),
        offset_(offset) {}
  int64_t offset() const { return offset_; }

 private:
  int64_t offset_;
};

// Invalid run configuration. Carries the offending key path, e.g. "train.epochs".
class ConfigError : public Error {
 public:
  ConfigError(const std::string& msg, const std::string& key_path)
      : Error(msg + " [key: " + key_path + "]"), key_path_(key_path) {}
  const std::string& key_path() const { return key_path_; }

 private:
  std::string key_path_;
};

#define RV_CHECK(cond, msg)                     \
  do {                                          \
    if (!(cond)) throw ::rangevit::Error(msg);  \
  } while (0)

struct Size2 {
  int h = 0;
  int w = 0;
};

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }

// Seeded RNG with hand-rolled distributions so streams do not depend on the
// standard library's unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next() { return engine_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw Error("Rng::uniform_int: n must be positive");
    int64_t v = static_cast<int64_t>(uniform() * static_cast<double>(n));
    return v < n ? v : n - 1;
  }

  // standard normal via Box-Muller; caches the second draw
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    cache_ = mag * std::sin(2.0 * kPi * u2);
    has_cache_ = true;
    return mag * std::cos(2.0 * kPi * u2);
  }

  // normal(0, std) truncated to +-bound_sigmas standard deviations by rejection
  double trunc_normal(double std_dev, double bound_sigmas = 2.0) {
    double v = normal();
    while (std::fabs(v) > bound_sigmas) v = normal();
    return v * std_dev;
  }

 private:
  std::mt19937_64 engine_;
  double cache_ = 0.0;
  bool has_cache_ = false;
};

}  // namespace rangevit
