#pragma once

// Counter-based random streams.
//
// Every stream is identified by a key derived from (experiment seed, purpose
// tag, up to two extra words such as client id and round). Output i of a
// stream is
//
//     mix64(key + (i + 1) * 0x9E3779B97F4A7C15)
//
// where mix64 is the SplitMix64 finalizer
//
//     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//     z =  z ^ (z >> 31)
//
// Distributions are implemented here rather than taken from <random>, whose
// distribution algorithms are implementation-defined; results are therefore
// identical on every platform with IEEE-754 doubles.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace fnsm {

namespace tag {
inline constexpr std::uint64_t kSynth = 0x73796e7468ull;       // "synth"
inline constexpr std::uint64_t kSplit = 0x73706c6974ull;       // "split"
inline constexpr std::uint64_t kPartition = 0x706172746eull;   // "partn"
inline constexpr std::uint64_t kInit = 0x696e6974ull;          // "init"
inline constexpr std::uint64_t kBatch = 0x6261746368ull;       // "batch"
inline constexpr std::uint64_t kSample = 0x73616d706cull;      // "sampl"
inline constexpr std::uint64_t kSurface = 0x7375726661ull;     // "surfa"
inline constexpr std::uint64_t kQuadratic = 0x7175616472ull;   // "quadr"
}  // namespace tag

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a = 0, std::uint64_t b = 0) noexcept
      : key_(derive(seed, purpose, a, b)) {}

  std::uint64_t next_u64() noexcept { return mix64(key_ + (++counter_) * kGolden); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1); safe for log().
  double uniform_open() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  // Box-Muller; the second variate is kept for the next call.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  // log of a Gamma(shape, 1) variate. Marsaglia-Tsang; shapes below one use
  // Gamma(shape) = Gamma(shape + 1) * U^(1/shape), kept in log space so that
  // tiny shapes do not underflow.
  double log_gamma_variate(double shape) noexcept {
    if (shape < 1.0) {
      const double boosted = log_gamma_variate(shape + 1.0);
      return boosted + std::log(uniform_open()) / shape;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
    }
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a,
                                        std::uint64_t b) noexcept {
    std::uint64_t k = mix64(seed + kGolden);
    k = mix64(k ^ (purpose + 1 * kGolden));
    k = mix64(k ^ (a + 2 * kGolden));
    k = mix64(k ^ (b + 3 * kGolden));
    return k;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fnsm
