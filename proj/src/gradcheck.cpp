#include "vita/gradcheck.hpp"

#include <cmath>
#include <random>
#include <set>

#include "vita/ops.hpp"

namespace vita {

namespace {

struct KinkScope {
  ~KinkScope() { kinks::reset(); }
};

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename S>
GradCheckReport grad_check(const std::function<Tensor<S>()>& loss_fn,
                           const std::vector<NamedTensor<S>>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  KinkScope scope;

  for (const auto& p : params) {
    p.tensor.storage()->requires_grad = true;
    Tensor<S>(p.tensor).zero_grad();
  }
  Tape<S>::local().clear();

  kinks::set_state(options.freeze_kinks ? kinks::State::record : kinks::State::off);
  Tensor<S> loss = loss_fn();
  if (!loss.all_finite()) {
    report.aborted = true;
    report.diagnostic = "loss is not finite at the base point";
    Tape<S>::local().clear();
    return report;
  }
  backward(loss);

  std::vector<std::pair<std::size_t, Index>> coords;
  Index total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  if (options.samples == 0 || static_cast<Index>(options.samples) >= total) {
    for (std::size_t t = 0; t < params.size(); ++t) {
      for (Index i = 0; i < params[t].tensor.numel(); ++i) coords.emplace_back(t, i);
    }
  } else {
    std::vector<std::size_t> nonempty;
    for (std::size_t t = 0; t < params.size(); ++t) {
      if (params[t].tensor.numel() > 0) nonempty.push_back(t);
    }
    std::mt19937_64 rng(options.seed);
    std::set<std::pair<std::size_t, Index>> seen;
    while (coords.size() < options.samples) {
      const std::size_t t = nonempty[std::uniform_int_distribution<std::size_t>(0, nonempty.size() - 1)(rng)];
      const Index i = std::uniform_int_distribution<Index>(0, params[t].tensor.numel() - 1)(rng);
      if (seen.insert({t, i}).second) coords.emplace_back(t, i);
    }
  }

  const S h = static_cast<S>(options.step);
  report.passed = true;
  for (const auto& [t, i] : coords) {
    Tensor<S> param = params[t].tensor;
    const S original = param.at(i);
    const S analytic = param.has_grad() ? param.grad()[static_cast<std::size_t>(i)] : S(0);
    S plus, minus;
    {
      NoGradGuard guard;
      param.at(i) = original + h;
      if (options.freeze_kinks) kinks::set_state(kinks::State::replay);
      plus = loss_fn().item();
      param.at(i) = original - h;
      if (options.freeze_kinks) kinks::set_state(kinks::State::replay);
      minus = loss_fn().item();
      param.at(i) = original;
    }
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      report.aborted = true;
      report.passed = false;
      report.diagnostic = "non-finite loss when perturbing " + params[t].name + "[" +
                          std::to_string(i) + "]";
      return report;
    }
    GradCheckEntry e;
    e.tensor = params[t].name;
    e.index = i;
    e.analytic = static_cast<double>(analytic);
    e.numeric = (static_cast<double>(plus) - static_cast<double>(minus)) / (2.0 * options.step);
    e.rel_error = relative_error(e.analytic, e.numeric, options.denominator_floor);
    e.pass = e.rel_error < options.tolerance;
    report.passed = report.passed && e.pass;
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    report.entries.push_back(e);
  }
  return report;
}

template GradCheckReport grad_check(const std::function<Tensor<float>()>&,
                                    const std::vector<NamedTensor<float>>&, const GradCheckOptions&);
template GradCheckReport grad_check(const std::function<Tensor<double>()>&,
                                    const std::vector<NamedTensor<double>>&,
                                    const GradCheckOptions&);

}  // namespace vita
