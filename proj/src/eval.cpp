#include "vita/eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include <json.hpp>

#include "vita/errors.hpp"
#include "vita/rng.hpp"

namespace vita {

double iou(const Mask& a, const Mask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError("iou: mask shapes differ (" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                        " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  }
  const Index inter = ((a != 0) && (b != 0)).count();
  const Index uni = ((a != 0) || (b != 0)).count();
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Mask threshold_mask(const Plane& prob, double thr) {
  return (prob.cast<double>() >= thr).cast<std::uint8_t>();
}

Mask derive_visible_prediction(const BinaryPrediction& pred, const Mask& input_visible) {
  if (pred.occluded) return ((pred.amodal != 0) && (*pred.occluded == 0)).cast<std::uint8_t>();
  return ((pred.amodal != 0) && (input_visible != 0)).cast<std::uint8_t>();
}

Mask derive_occluded_prediction(const BinaryPrediction& pred, const Mask& input_visible) {
  if (pred.occluded) return *pred.occluded;
  return ((pred.amodal != 0) && (input_visible == 0)).cast<std::uint8_t>();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["miou_a"] = miou_a;
  j["miou_v"] = miou_v;
  j["miou_o"] = miou_o;
  nlohmann::ordered_json bins;
  for (OcclusionBin b : {OcclusionBin::low, OcclusionBin::medium, OcclusionBin::high}) {
    const auto k = static_cast<std::size_t>(b);
    nlohmann::ordered_json e;
    e["count"] = count_by_bin[k];
    e["miou_o"] = miou_o_by_bin[k] ? nlohmann::ordered_json(*miou_o_by_bin[k]) : nlohmann::ordered_json(nullptr);
    bins[to_string(b)] = e;
  }
  j["by_occ_bin"] = bins;
  j["t_inf_ms"] = t_inf_ms;
  j["t_inf_std_ms"] = t_inf_std_ms;
  j["n_samples"] = n_samples;
  j["config_fingerprint"] = config_fingerprint;
  nlohmann::ordered_json inst = nlohmann::ordered_json::array();
  for (const auto& s : instances) {
    inst.push_back({{"scene_id", s.scene_id},
                    {"instance_id", s.instance_id},
                    {"occ_bin", to_string(s.bin)},
                    {"iou_a", s.iou_a},
                    {"iou_v", s.iou_v},
                    {"iou_o", s.iou_o}});
  }
  j["instances"] = inst;
  return j.dump(2);
}

EvalReport score_predictions(std::span<const RoISample> samples, std::span<const BinaryPrediction> preds) {
  if (samples.empty()) throw ContractError("evaluate: split is empty");
  if (samples.size() != preds.size()) throw ContractError("evaluate: one prediction per sample required");
  EvalReport r;
  r.n_samples = samples.size();
  std::array<double, 3> bin_sum{0, 0, 0};
  double sa = 0, sv = 0, so = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const RoISample& s = samples[i];
    const BinaryPrediction& p = preds[i];
    InstanceScore sc;
    sc.scene_id = s.scene_id;
    sc.instance_id = s.instance_id;
    sc.bin = s.bin;
    sc.iou_a = iou(p.amodal, s.amodal);
    sc.iou_v = iou(derive_visible_prediction(p, s.roi.visible), s.visible);
    sc.iou_o = iou(derive_occluded_prediction(p, s.roi.visible), s.occluded);
    sa += sc.iou_a;
    sv += sc.iou_v;
    so += sc.iou_o;
    const auto b = static_cast<std::size_t>(s.bin);
    bin_sum[b] += sc.iou_o;
    r.count_by_bin[b] += 1;
    r.instances.push_back(std::move(sc));
  }
  const auto n = static_cast<double>(samples.size());
  r.miou_a = sa / n;
  r.miou_v = sv / n;
  r.miou_o = so / n;
  for (std::size_t b = 0; b < 3; ++b) {
    if (r.count_by_bin[b] > 0) r.miou_o_by_bin[b] = bin_sum[b] / static_cast<double>(r.count_by_bin[b]);
  }
  return r;
}

namespace {

BinaryPrediction binarize(const Prediction<float>& out, double threshold) {
  BinaryPrediction p;
  p.amodal = threshold_mask(tensor_plane(out.amodal, 0), threshold);
  if (out.has_occluded()) p.occluded = threshold_mask(tensor_plane(out.occluded, 0), threshold);
  return p;
}

}  // namespace

BinaryPrediction predict_roi(AmodalSegmenter<float>& model, const RoISample& sample, double threshold) {
  NoGradGuard guard;
  const std::size_t zero = 0;
  const Tensor<float> x = input_batch(std::span(&sample, 1), std::span(&zero, 1));
  return binarize(model.forward(x, Mode::eval), threshold);
}

EvalReport evaluate(AmodalSegmenter<float>& model, std::span<const RoISample> samples, const EvalOptions& o) {
  if (samples.empty()) throw ContractError("evaluate: split is empty");
  NoGradGuard guard;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(o.seed, "eval.order"));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Tensor<float>> inputs(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t k = i;
    inputs[i] = input_batch(samples, std::span(&k, 1));
  }
  for (int w = 0; w < o.warmup; ++w) (void)model.forward(inputs[order[static_cast<std::size_t>(w) % order.size()]], Mode::eval);

  std::vector<BinaryPrediction> preds(samples.size());
  std::vector<double> ms;
  ms.reserve(samples.size());
  for (std::size_t i : order) {
    const auto t0 = std::chrono::steady_clock::now();
    const Prediction<float> out = model.forward(inputs[i], Mode::eval);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    preds[i] = binarize(out, o.threshold);
  }

  EvalReport r = score_predictions(samples, preds);
  const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  double var = 0;
  for (double v : ms) var += (v - mean) * (v - mean);
  r.t_inf_ms = mean;
  r.t_inf_std_ms = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
  r.config_fingerprint = model.config().fingerprint();
  return r;
}

std::vector<SweepRow> lambda_sweep(const std::function<AmodalSegmenter<float>()>& build,
                                   std::span<const RoISample> train_samples,
                                   std::span<const RoISample> eval_samples, const std::vector<double>& lambdas,
                                   const FitOptions& base) {
  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    AmodalSegmenter<float> model = build();
    if (model.config().head_kind != HeadKind::dual) throw ConfigError("lambda_sweep needs the dual head");
    FitOptions o = base;
    o.loss.lambda_o = lambda;
    fit(model, train_samples, o);
    EvalOptions eo;
    eo.seed = base.seed;
    eo.warmup = 0;
    const EvalReport r = evaluate(model, eval_samples, eo);
    rows.push_back({lambda, r.miou_a, r.miou_v, r.miou_o});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "lambda_o,miou_a,miou_v,miou_o\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%.6g,%.6f,%.6f,%.6f\n", r.lambda_o, r.miou_a, r.miou_v, r.miou_o);
    out += line;
  }
  return out;
}

}  // namespace vita
