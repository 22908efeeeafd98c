#include "vita/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "vita/checkpoint.hpp"
#include "vita/errors.hpp"
#include "vita/rng.hpp"

namespace vita {

void LossConfig::validate() const {
  if (!(lambda_a >= 0) || !(lambda_o >= 0) || !std::isfinite(lambda_a) || !std::isfinite(lambda_o)) {
    throw ConfigError("loss weights must be finite and non-negative");
  }
}

template <typename S>
LossTerms<S> total_loss(const Prediction<S>& pred, const Tensor<S>& gt_amodal, const Tensor<S>& gt_occluded,
                        const LossConfig& cfg) {
  cfg.validate();
  if (cfg.lambda_o > 0) {
    if (!pred.has_occluded()) throw ContractError("total_loss: lambda_o > 0 needs an occluded prediction");
    if (!gt_occluded.defined()) throw ContractError("total_loss: lambda_o > 0 needs occluded ground truth");
  }
  LossTerms<S> out;
  out.amodal = bce_loss(pred.amodal, gt_amodal);
  out.total = scale(out.amodal, static_cast<S>(cfg.lambda_a));
  if (cfg.lambda_o > 0) {
    out.occluded = bce_loss(pred.occluded, gt_occluded);
    out.total = add(out.total, scale(out.occluded, static_cast<S>(cfg.lambda_o)));
  } else if (pred.has_occluded() && gt_occluded.defined()) {
    NoGradGuard guard;
    out.occluded = bce_loss(pred.occluded, gt_occluded);
  }
  return out;
}

template LossTerms<float> total_loss(const Prediction<float>&, const Tensor<float>&, const Tensor<float>&,
                                     const LossConfig&);
template LossTerms<double> total_loss(const Prediction<double>&, const Tensor<double>&, const Tensor<double>&,
                                      const LossConfig&);

void AdamWConfig::validate() const {
  if (!(lr >= 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0) ||
      !(weight_decay >= 0)) {
    throw ConfigError("invalid AdamW hyperparameters");
  }
}

template <typename S>
AdamW<S>::AdamW(std::vector<NamedTensor<S>> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.shape(), S(0));
    v_.emplace_back(p.tensor.shape(), S(0));
  }
}

template <typename S>
void AdamW<S>::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) throw ContractError("AdamW: parameter " + p.name + " has no gradient");
  }
  ++t_;
  const double lr = config_.lr, b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - lr * config_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor<S> p = params_[k].tensor;
    S* w = p.data();
    const S* g = p.grad().data();
    S* m = m_[k].data();
    S* v = v_[k].data();
    for (Index i = 0; i < p.numel(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1 - b1) * gi;
      const double vi = b2 * v[i] + (1 - b2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      const double wi = w[i] * decay;
      w[i] = static_cast<S>(wi - lr * (mi / c1) / (std::sqrt(vi / c2) + config_.eps));
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

std::string to_jsonl(const LossLogEntry& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["loss_a"] = e.loss_a;
  j["loss_o"] = e.loss_o;
  j["loss_total"] = e.loss_total;
  return j.dump();
}

FitResult fit(AmodalSegmenter<float>& model, std::span<const RoISample> samples, const FitOptions& o) {
  if (samples.empty()) throw ContractError("fit: dataset is empty");
  if (o.steps < 0 || o.batch_size < 1) throw ConfigError("fit: steps must be >= 0 and batch size >= 1");
  o.loss.validate();
  const bool dual = model.config().head_kind == HeadKind::dual;
  if (!dual && o.loss.lambda_o > 0) {
    throw ConfigError("fit: the single head cannot train with lambda_o > 0");
  }

  auto& params = model.parameters();
  AdamW<float> opt(params.trainable(), o.optimizer);
  std::mt19937_64 rng(derive_seed(o.seed, "fit.shuffle"));

  std::ofstream log_file;
  if (o.log_path) {
    log_file.open(*o.log_path, std::ios::trunc);
    if (!log_file) throw FormatError("cannot open training log " + o.log_path->string());
  }

  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(o.batch_size), samples.size());

  std::vector<std::vector<float>> last_good;
  auto snapshot = [&] {
    last_good.clear();
    for (const auto& e : params.entries()) last_good.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
  };
  auto restore = [&] {
    const auto& entries = params.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      Tensor<float> t = entries[k].tensor;
      std::copy(last_good[k].begin(), last_good[k].end(), t.data());
    }
  };
  snapshot();

  FitResult result;
  for (int step = 1; step <= o.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < batch) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::sort(idx.begin(), idx.end());

    const Tensor<float> x = input_batch(samples, idx);
    const Tensor<float> ya = amodal_batch(samples, idx);
    const Tensor<float> yo = dual ? occluded_batch(samples, idx) : Tensor<float>();

    params.zero_grad();
    LossTerms<float> terms;
    try {
      const Prediction<float> pred = model.forward(x, Mode::train);
      terms = total_loss(pred, ya, yo, o.loss);
      if (!terms.total.all_finite()) throw NumericError("non-finite loss");
      backward(terms.total);
    } catch (const NumericError& e) {
      Tape<float>::local().clear();
      restore();
      if (o.checkpoint_path) save_checkpoint(model, *o.checkpoint_path);
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what(), step);
    }
    // Parameters (and the running statistics just updated) are finite here.
    snapshot();
    opt.step();

    LossLogEntry entry{step, terms.amodal.item(), terms.occluded.defined() ? terms.occluded.item() : 0.0,
                       terms.total.item()};
    if (log_file) log_file << to_jsonl(entry) << '\n' << std::flush;
    result.log.push_back(entry);
  }
  if (o.checkpoint_path) save_checkpoint(model, *o.checkpoint_path);
  return result;
}

}  // namespace vita
