#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vita/dataio.hpp"
#include "vita/model.hpp"
#include "vita/train.hpp"

namespace vita {

/// |a & b| / |a | b|; 1 when both are empty.
double iou(const Mask& a, const Mask& b);

/// 1 where prob >= thr.
Mask threshold_mask(const Plane& prob, double thr = 0.5);

/// Thresholded model output for one RoI.
struct BinaryPrediction {
  Mask amodal;
  std::optional<Mask> occluded;  // absent for the single head
};

/// Dual: amodal & !occluded. Single: amodal & input visible mask.
Mask derive_visible_prediction(const BinaryPrediction& pred, const Mask& input_visible);
/// Dual: the occluded output. Single: amodal & !input visible mask.
Mask derive_occluded_prediction(const BinaryPrediction& pred, const Mask& input_visible);

struct InstanceScore {
  std::string scene_id;
  int instance_id = 0;
  OcclusionBin bin = OcclusionBin::low;
  double iou_a = 0, iou_v = 0, iou_o = 0;
};

struct EvalReport {
  double miou_a = 0, miou_v = 0, miou_o = 0;
  std::array<std::optional<double>, 3> miou_o_by_bin;  // empty when a bin has no samples
  std::array<std::size_t, 3> count_by_bin{0, 0, 0};
  double t_inf_ms = 0;
  double t_inf_std_ms = 0;
  std::size_t n_samples = 0;
  std::string config_fingerprint;
  std::vector<InstanceScore> instances;

  std::string to_json() const;
};

/// Scores predictions against RoI ground truth; timing fields stay zero.
EvalReport score_predictions(std::span<const RoISample> samples, std::span<const BinaryPrediction> preds);

struct EvalOptions {
  double threshold = 0.5;
  std::uint64_t seed = 0;  // order of the timed passes
  int warmup = 3;
};

BinaryPrediction predict_roi(AmodalSegmenter<float>& model, const RoISample& sample, double threshold);

/// Runs the model once per sample (batch 1, eval mode) and scores the outputs.
EvalReport evaluate(AmodalSegmenter<float>& model, std::span<const RoISample> samples, const EvalOptions& options);

struct SweepRow {
  double lambda_o = 0;
  double miou_a = 0, miou_v = 0, miou_o = 0;
};

std::vector<SweepRow> lambda_sweep(const std::function<AmodalSegmenter<float>()>& build,
                                   std::span<const RoISample> train_samples,
                                   std::span<const RoISample> eval_samples, const std::vector<double>& lambdas,
                                   const FitOptions& base);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace vita
