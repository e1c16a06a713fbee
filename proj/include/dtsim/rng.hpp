#pragma once

#include <cstdint>

namespace dtsim {

/// Counter-based random stream: every draw is a pure function of
/// (seed, up to three keys), so values do not depend on evaluation
/// order or thread count. Sub-streams are derived with fork().
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed) {}

  RngStream fork(std::uint64_t label) const {
    return RngStream(mix(seed_ ^ mix(label ^ 0x8e9b'5c1d'3a7f'2406ULL)));
  }

  std::uint64_t bits(std::uint64_t a, std::uint64_t b = 0,
                     std::uint64_t c = 0) const {
    std::uint64_t h = mix(seed_ ^ mix(a));
    h = mix(h ^ mix(b ^ 0x6a09'e667'f3bc'c909ULL));
    h = mix(h ^ mix(c ^ 0xbb67'ae85'84ca'a73bULL));
    return h;
  }

  /// Uniform draw strictly inside (0, 1).
  double uniform(std::uint64_t a, std::uint64_t b = 0,
                 std::uint64_t c = 0) const {
    return (static_cast<double>(bits(a, b, c) >> 11) + 0.5) *
           (1.0 / 9007199254740992.0);
  }

  /// Uniform draw on [lo, hi).
  double uniform_in(double lo, double hi, std::uint64_t a, std::uint64_t b = 0,
                    std::uint64_t c = 0) const {
    return lo + (hi - lo) * uniform(a, b, c);
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e37'79b9'7f4a'7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58'476d'1ce4'e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d0'49bb'1331'11ebULL;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
};

/// Labels for the sub-streams hanging off one root seed.
namespace rng_lane {
constexpr std::uint64_t kParamSample = 1;
constexpr std::uint64_t kVirtualCoin = 2;
constexpr std::uint64_t kGumbelLink = 3;
constexpr std::uint64_t kGumbelMerge = 4;
constexpr std::uint64_t kObsNoise = 5;
constexpr std::uint64_t kObsCoverage = 6;
constexpr std::uint64_t kIteration = 7;
}  // namespace rng_lane

}  // namespace dtsim
