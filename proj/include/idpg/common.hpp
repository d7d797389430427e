#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace idpg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or rank mismatch, empty or overlong sequences.
struct DimensionError : Error { using Error::Error; };
// Invalid configuration values (divisibility, unknown enum, bad combination).
struct ConfigError : Error { using Error::Error; };
// Out-of-range ids: vocab ids, bias indices, layer indices.
struct IndexError : Error { using Error::Error; };
// Malformed input files; message carries the line number.
struct ParseError : Error { using Error::Error; };
// API misuse: non-scalar loss, repeated backward, mixed-precision tape.
struct ContractError : Error { using Error::Error; };
// Metric undefined on the given inputs (zero variance, zero vector).
struct MetricError : Error { using Error::Error; };
// Raised when optimization produces non-finite losses or gradients.
struct DivergenceError : Error { using Error::Error; };

enum class DType { f32, f64 };

inline const char* dtype_name(DType dt) {
  return dt == DType::f32 ? "f32" : "f64";
}

inline double round_to(DType dt, double v) {
  return dt == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// std:: distributions are not, so the transforms are spelled out here to
// keep runs bit-reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller with a cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Unbiased integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (-n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t x = engine_();
      if (x >= threshold) return x % n;
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace idpg
