#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace frieren {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Folds a list of identifiers (seed, round, client, purpose, ...) into one seed.
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x6A09E667F3BCC909ULL;
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

/// Purpose tags for derive_seed so streams never alias.
enum class Stream : std::uint64_t {
  kInit = 1,
  kLabels = 2,
  kRender = 3,
  kPartition = 4,
  kSampling = 5,
  kLocal = 6,
  kPretrain = 7,
  kSemisupSplit = 8,
  kGradcheck = 9,
};

/**
 * Explicit random stream. Every stochastic operation takes one of these by
 * reference so results are a pure function of the stream state.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal(double sigma = 1.0) { return sigma == 0.0 ? 0.0 : std::normal_distribution<double>(0.0, sigma)(eng_); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(eng_);
  }
  std::mt19937_64& engine() noexcept { return eng_; }

 private:
  std::mt19937_64 eng_;
};

/// Deterministic standard normal from a 64-bit key (Box-Muller on two hashed uniforms).
inline double hashed_normal(std::uint64_t key) noexcept {
  const auto a = mix64(key);
  const auto b = mix64(a ^ 0xD1B54A32D192ED03ULL);
  const double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace frieren
