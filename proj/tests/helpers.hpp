#pragma once

#include <doctest.h>

#include <filesystem>
#include <random>
#include <string>

#include "vita/scenegen.hpp"
#include "vita/tensor.hpp"

namespace vita::test {

template <typename S>
Tensor<S> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(u(rng));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename S>
Tensor<S> random_binary(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(rng() & 1);
  return t;
}

inline Mask random_mask(Index h, Index w, std::uint64_t seed, double p = 0.5) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(p);
  Mask m(h, w);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = b(rng) ? 1 : 0;
  return m;
}

/// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vita_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Small deterministic dataset shared by several suites.
inline const Dataset& small_dataset() {
  static const Dataset d = [] {
    GenerateOptions o;
    o.scenes = 8;
    o.seed = 5;
    o.scene_side = 128;
    o.tolerance_pp = 100;
    return generate_dataset(o);
  }();
  return d;
}

}  // namespace vita::test
