#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vita/gradcheck.hpp"

namespace vita {

struct GradSuiteCase {
  std::string name;
  GradCheckReport report;
};

/// Finite-difference check of every differentiable op, plus the full toy
/// dual-head loss, in 64-bit.
std::vector<GradSuiteCase> run_gradient_suite(std::uint64_t seed = 0, const GradCheckOptions& options = {},
                                              bool include_model = true);

/// One row per case: name, probes, max relative error, verdict.
std::string format_gradient_table(const std::vector<GradSuiteCase>& cases, double tolerance);

}  // namespace vita
