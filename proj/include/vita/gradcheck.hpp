#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vita/tensor.hpp"

namespace vita {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
  bool trainable = true;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-5;
  std::size_t samples = 50;  // coordinates to probe; 0 probes every coordinate
  std::uint64_t seed = 0;
  // Perturbed evaluations reuse the ReLU activation pattern of the base
  // point, so the central difference measures the slope of the same linear
  // piece the analytic gradient describes.
  bool freeze_kinks = true;
  // |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double denominator_floor = 1e-8;
};

struct GradCheckEntry {
  std::string tensor;
  Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = false;
  bool aborted = false;
  std::string diagnostic;

  std::map<std::string, double> max_error_by_tensor() const {
    std::map<std::string, double> out;
    for (const auto& e : entries) out[e.tensor] = std::max(out[e.tensor], e.rel_error);
    return out;
  }
};

double relative_error(double analytic, double numeric, double floor);

/// Compares reverse-mode gradients of loss_fn against central differences on
/// a random subset of parameter coordinates. loss_fn must rebuild the graph
/// from the current parameter values on every call.
template <typename Scalar>
GradCheckReport grad_check(const std::function<Tensor<Scalar>()>& loss_fn,
                           const std::vector<NamedTensor<Scalar>>& params,
                           const GradCheckOptions& options = {});

}  // namespace vita
