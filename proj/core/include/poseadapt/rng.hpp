#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace poseadapt {

// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Counter-based generator: draw i of a stream is a pure function of
// (key, i). Substreams are derived by hashing a path of tags onto the
// seed, so independent purposes (landmarks, trajectories, dropout masks,
// batch shuffles) never consume from each other's sequences. All output
// is built from 64-bit integer mixing, portable across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}

  // A stream keyed by (seed, path...). Same arguments, same sequence.
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = mix64(seed + 0x9e3779b97f4a7c15ull);
    for (std::uint64_t p : path) {
      k = mix64(k ^ mix64(p + 0x6a09e667f3bcc909ull));
    }
    return Rng(k);
  }

  std::uint64_t next_u64() {
    return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ull);
  }

  // Uniform in [0, 1), 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller, spare value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_int(i)]);
    }
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stream tags. Keeping them in one place avoids accidental collisions
// between modules that derive substreams from the same seed.
namespace rng_tag {
inline constexpr std::uint64_t kLandmarks = 1;
inline constexpr std::uint64_t kTrajectory = 2;
inline constexpr std::uint64_t kOrientation = 3;
inline constexpr std::uint64_t kJitter = 4;
inline constexpr std::uint64_t kParamInit = 5;
inline constexpr std::uint64_t kDropout = 6;
inline constexpr std::uint64_t kShuffle = 7;
inline constexpr std::uint64_t kRotationTask = 8;
inline constexpr std::uint64_t kLabeledSubset = 9;
inline constexpr std::uint64_t kGradCheck = 10;
inline constexpr std::uint64_t kProbe = 11;
}  // namespace rng_tag

}  // namespace poseadapt
