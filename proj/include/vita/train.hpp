#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vita/dataio.hpp"
#include "vita/model.hpp"

namespace vita {

struct LossConfig {
  double lambda_a = 1.0;
  double lambda_o = 0.25;
  void validate() const;
};

template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> amodal;    // L_A
  Tensor<Scalar> occluded;  // L_O, undefined for the single head
  Tensor<Scalar> total;
};

/// lambda_a * L_A + lambda_o * L_O. The occluded term is dropped from the
/// graph when lambda_o is zero.
template <typename Scalar>
LossTerms<Scalar> total_loss(const Prediction<Scalar>& pred, const Tensor<Scalar>& gt_amodal,
                             const Tensor<Scalar>& gt_occluded, const LossConfig& cfg);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  void validate() const;
};

inline constexpr double kToyLearningRate = 1e-3;
inline constexpr double kBaseLearningRate = 5e-6;

template <typename Scalar>
class AdamW {
 public:
  AdamW(std::vector<NamedTensor<Scalar>> params, AdamWConfig config);

  /// One decoupled-decay Adam update using the current gradients.
  void step();

  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const std::vector<Tensor<Scalar>>& first_moments() const { return m_; }
  const std::vector<Tensor<Scalar>>& second_moments() const { return v_; }

 private:
  std::vector<NamedTensor<Scalar>> params_;
  std::vector<Tensor<Scalar>> m_, v_;
  AdamWConfig config_;
  std::uint64_t t_ = 0;
};

struct LossLogEntry {
  int step = 0;
  double loss_a = 0;
  double loss_o = 0;
  double loss_total = 0;
  bool operator==(const LossLogEntry&) const = default;
};

std::string to_jsonl(const LossLogEntry& e);

struct FitOptions {
  int steps = 500;
  int batch_size = 8;
  AdamWConfig optimizer;
  LossConfig loss;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> log_path;
  std::optional<std::filesystem::path> checkpoint_path;
};

struct FitResult {
  std::vector<LossLogEntry> log;
};

/// Non-finite loss during fit. The model holds the last good parameters.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, int step) : NumericError(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

FitResult fit(AmodalSegmenter<float>& model, std::span<const RoISample> samples, const FitOptions& options);

}  // namespace vita
