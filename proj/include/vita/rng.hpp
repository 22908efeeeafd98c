#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vita {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Independent stream seed for a named consumer, stable under reordering.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64(seed ^ fnv1a(name));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) + index);
}

/// Normal(0, std) truncated to +-2 std by rejection.
class TruncatedNormal {
 public:
  explicit TruncatedNormal(double stddev) : dist_(0.0, 1.0), std_(stddev) {}

  template <typename Engine>
  double operator()(Engine& rng) {
    for (;;) {
      const double z = dist_(rng);
      if (z >= -2.0 && z <= 2.0) return z * std_;
    }
  }

 private:
  std::normal_distribution<double> dist_;
  double std_;
};

}  // namespace vita
