#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vita/gradcheck.hpp"
#include "vita/ops.hpp"
#include "vita/tensor.hpp"

namespace vita {

enum class HeadKind { single, dual };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);

struct DecoderStage {
  Index channels = 0;
  Index side = 0;
  bool operator==(const DecoderStage&) const = default;
};

/// Architecture hyperparameters. The decoder input [embed_dim, 1, 1] is
/// implicit; decoder_schedule lists the four upsampling stages that follow.
struct ModelConfig {
  Index image_side = 64;
  Index patch_size = 8;
  Index embed_dim = 96;
  Index depth = 4;
  Index heads = 4;
  Index mlp_ratio = 4;
  std::vector<DecoderStage> decoder_schedule{{64, 8}, {48, 16}, {32, 32}, {16, 64}};
  HeadKind head_kind = HeadKind::dual;
  std::uint64_t seed = 0;

  static ModelConfig toy(HeadKind kind = HeadKind::dual);
  /// ViT-B encoder with the full-resolution decoder schedule.
  static ModelConfig base(HeadKind kind = HeadKind::dual);
  static ModelConfig preset(std::string_view name, HeadKind kind);

  void validate() const;
  Index grid_side() const { return image_side / patch_size; }
  Index tokens() const { return grid_side() * grid_side(); }
  /// Channels after the first prediction-head conv (and of each dual branch's
  /// last stage).
  Index head_hidden() const { return decoder_schedule.back().channels / 2; }

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
  /// Stable hex digest of the serialized configuration.
  std::string fingerprint() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct FeatureVector {
  Tensor<Scalar> values;  // [N, D]
};

template <typename Scalar>
struct Prediction {
  Tensor<Scalar> amodal;    // [N, 1, S, S]
  Tensor<Scalar> occluded;  // [N, 1, S, S], undefined for the single head
  bool has_occluded() const { return occluded.defined(); }
};

/// Named intermediate shapes captured during a forward pass.
using StageTrace = std::vector<std::pair<std::string, Shape>>;

template <typename Scalar>
class ParameterSet {
 public:
  Tensor<Scalar> add(std::string name, Tensor<Scalar> t, bool trainable) {
    t.set_requires_grad(trainable);
    entries_.push_back({std::move(name), t, trainable});
    return t;
  }
  const std::vector<NamedTensor<Scalar>>& entries() const { return entries_; }
  std::vector<NamedTensor<Scalar>> trainable() const {
    std::vector<NamedTensor<Scalar>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e);
    }
    return out;
  }
  const NamedTensor<Scalar>* find(std::string_view name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }
  Tensor<Scalar> at(std::string_view name) const {
    const auto* e = find(name);
    if (e == nullptr) throw ContractError("unknown parameter " + std::string(name));
    return e->tensor;
  }
  Index trainable_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.trainable ? e.tensor.numel() : 0;
    return n;
  }
  void zero_grad() {
    for (auto& e : entries_) {
      if (e.trainable) e.tensor.zero_grad();
    }
  }

 private:
  std::vector<NamedTensor<Scalar>> entries_;
};

struct DecoderLayout {
  int shared_blocks = 0;
  int amodal_branch_blocks = 0;
  int occluded_branch_blocks = 0;
  int amodal_head_convs = 0;
  int occluded_head_convs = 0;
};

/// Copies the RGB patch-projection weights [D,3,p,p] and appends a fourth
/// input channel equal to their mean.
template <typename Scalar>
Tensor<Scalar> adapt_input_weights(const Tensor<Scalar>& rgb_weights);

/// ViT encoder plus single- or dual-head convolutional decoder.
template <typename Scalar>
class AmodalSegmenter {
 public:
  explicit AmodalSegmenter(ModelConfig config);

  AmodalSegmenter(AmodalSegmenter&&) noexcept = default;
  AmodalSegmenter& operator=(AmodalSegmenter&&) noexcept = default;
  AmodalSegmenter(const AmodalSegmenter&) = delete;
  AmodalSegmenter& operator=(const AmodalSegmenter&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }
  DecoderLayout layout() const;

  /// [N,4,S,S] -> [N,T,D] patch tokens with positional embeddings.
  Tensor<Scalar> patch_embed(const Tensor<Scalar>& input) const;
  FeatureVector<Scalar> encode(const Tensor<Scalar>& input, StageTrace* trace = nullptr) const;
  Prediction<Scalar> decode(const FeatureVector<Scalar>& features, Mode mode,
                            StageTrace* trace = nullptr);
  Prediction<Scalar> forward(const Tensor<Scalar>& input, Mode mode, StageTrace* trace = nullptr);

  /// Installs pretrained RGB patch-projection weights via adapt_input_weights.
  void load_rgb_patch_weights(const Tensor<Scalar>& rgb_weights);

  /// Overwrites every tensor (parameters and running statistics) by name.
  void copy_state_from(const ParameterSet<Scalar>& other);

 private:
  struct LayerNormLayer {
    Tensor<Scalar> gamma, beta;
  };
  struct LinearLayer {
    Tensor<Scalar> w, b;
  };
  struct EncoderBlock {
    LayerNormLayer ln1;
    AttentionWeights<Scalar> attn;
    LayerNormLayer ln2;
    LinearLayer fc1, fc2;
  };
  struct BatchNormLayer {
    Tensor<Scalar> gamma, beta;
    BatchNormState<Scalar> stats;
  };
  struct DecoderBlock {
    Tensor<Scalar> up_w, up_b;
    Index up_kernel = 2, up_stride = 2;
    Tensor<Scalar> conv_w;
    BatchNormLayer bn;
  };
  struct ChannelReduce {
    Tensor<Scalar> w;
    BatchNormLayer bn;
  };

  Tensor<Scalar> weight(const std::string& name, Shape shape);
  Tensor<Scalar> zeros(const std::string& name, Shape shape);
  Tensor<Scalar> ones(const std::string& name, Shape shape);
  BatchNormLayer make_bn(const std::string& name, Index channels);
  DecoderBlock make_block(const std::string& name, Index in, Index out, Index kernel, Index stride);

  Tensor<Scalar> run_block(const Tensor<Scalar>& x, DecoderBlock& block, Mode mode) const;
  Tensor<Scalar> run_bn(const Tensor<Scalar>& x, BatchNormLayer& bn, Mode mode) const;

  ModelConfig config_;
  ParameterSet<Scalar> params_;

  Tensor<Scalar> patch_w_, patch_b_, pos_embed_;
  std::vector<EncoderBlock> blocks_;
  LayerNormLayer final_norm_;

  std::vector<DecoderBlock> shared_;
  ChannelReduce amodal_reduce_, occluded_reduce_;
  std::vector<DecoderBlock> amodal_branch_, occluded_branch_;
  Tensor<Scalar> amodal_head_w1_, amodal_head_b1_, amodal_head_w2_, amodal_head_b2_;
  Tensor<Scalar> occluded_head_w_, occluded_head_b_;
};

}  // namespace vita
