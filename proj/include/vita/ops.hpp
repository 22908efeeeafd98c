#pragma once

#include <vector>

#include "vita/tensor.hpp"

// Differentiable tensor operations. Every op records a backward rule on the
// thread-local tape when recording is enabled and any input requires grad.
// Instantiated for float and double.

namespace vita {

enum class Activation { relu, gelu, sigmoid };
enum class Mode { train, eval };

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// x[..., in] * w[in, out] + b[out]. Bias may be undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b);

/// Cross-correlation. w is [F, C, k, k]; bias [F] may be undefined.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& bias,
                      Index stride, Index padding);

/// Adjoint of conv2d. w is [C, F, k, k]; output side (H-1)*stride - 2*padding + k.
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                const Tensor<Scalar>& bias, Index stride, Index padding);

template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;

  static BatchNormState fresh(Index channels) {
    return {Tensor<Scalar>(Shape{channels}, Scalar(0)), Tensor<Scalar>(Shape{channels}, Scalar(1))};
  }
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization over (N, H, W). In train mode the running
/// statistics are updated in place (unbiased variance, momentum 0.1).
template <typename Scalar>
Tensor<Scalar> batch_norm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                            const Tensor<Scalar>& beta, BatchNormState<Scalar>& state, Mode mode,
                            double eps = kBatchNormEps, double momentum = kBatchNormMomentum);

/// Normalization over the last dimension.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, double eps = 1e-6);

template <typename Scalar>
struct AttentionWeights {
  Tensor<Scalar> qkv_w;  // [D, 3D]
  Tensor<Scalar> qkv_b;  // [3D]
  Tensor<Scalar> out_w;  // [D, D]
  Tensor<Scalar> out_b;  // [D]
};

/// Scaled dot-product self-attention over x[N, T, D]. When probs is non-null
/// it receives the attention matrices as [N, heads, T, T].
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& x, const AttentionWeights<Scalar>& w,
                                    Index heads, Tensor<Scalar>* probs = nullptr);

template <typename Scalar>
Tensor<Scalar> elementwise(const Tensor<Scalar>& x, Activation f);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return elementwise(x, Activation::relu);
}
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  return elementwise(x, Activation::gelu);
}
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return elementwise(x, Activation::sigmoid);
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// a + b where b's shape equals a trailing suffix of a's shape.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

/// [N, D, h, w] -> [N, h*w, D]
template <typename Scalar>
Tensor<Scalar> tokens_from_grid(const Tensor<Scalar>& x);

/// [N, T, D] -> [N, D]
template <typename Scalar>
Tensor<Scalar> mean_tokens(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);

/// Stacks equally shaped tensors along a new leading axis.
template <typename Scalar>
Tensor<Scalar> stack(const std::vector<Tensor<Scalar>>& items);

/// Mean binary cross-entropy; predictions are clamped to [1e-7, 1-1e-7].
template <typename Scalar>
Tensor<Scalar> bce_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target);

inline constexpr double kProbabilityClamp = 1e-7;

/// Freezing of ReLU activation patterns, used by finite-difference checks so
/// that perturbed evaluations stay on the same linear piece as the base
/// point. Thread-local.
namespace kinks {
enum class State { off, record, replay };
void set_state(State s);
State state();
void reset();
std::size_t recorded_layers();
}  // namespace kinks

}  // namespace vita
