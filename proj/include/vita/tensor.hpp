#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vita/errors.hpp"

namespace vita {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Buffers start on Eigen's maximum alignment so vectorized reductions take
/// the same path regardless of where the allocator placed them.
template <typename Scalar>
using AlignedVector = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

template <typename Scalar>
struct TensorStorage {
  Shape shape;
  AlignedVector<Scalar> data;
  AlignedVector<Scalar> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;

  Scalar* ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
    return grad.data();
  }
};

/// Dense row-major tensor with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// the computation tape relies on to route gradients back to parameters.
/// Use clone() for an independent copy.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : s_(std::make_shared<TensorStorage<Scalar>>()) {
    for (Index d : shape) {
      if (d < 0) throw DimensionError("negative tensor dimension in " + shape_str(shape));
    }
    s_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    s_->shape = std::move(shape);
  }

  template <typename Alloc>
  Tensor(Shape shape, const std::vector<Scalar, Alloc>& values) : s_(std::make_shared<TensorStorage<Scalar>>()) {
    if (static_cast<Index>(values.size()) != shape_numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data.assign(values.begin(), values.end());
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, std::vector<Scalar>{v}); }

  bool defined() const { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  Index dim(std::size_t i) const { return s_->shape.at(i); }
  Index numel() const { return static_cast<Index>(s_->data.size()); }

  Scalar* data() { return s_->data.data(); }
  const Scalar* data() const { return s_->data.data(); }
  std::span<Scalar> values() { return s_->data; }
  std::span<const Scalar> values() const { return s_->data; }
  Scalar& at(Index i) { return s_->data[static_cast<std::size_t>(i)]; }
  Scalar at(Index i) const { return s_->data[static_cast<std::size_t>(i)]; }

  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  Eigen::Map<Matrix> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return Eigen::Map<Matrix>(data(), rows, cols);
  }
  Eigen::Map<const Matrix> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return Eigen::Map<const Matrix>(data(), rows, cols);
  }
  Eigen::Map<Array> array() { return Eigen::Map<Array>(data(), numel()); }
  Eigen::Map<const Array> array() const { return Eigen::Map<const Array>(data(), numel()); }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const Scalar> grad() const { return s_->grad; }
  std::span<Scalar> grad() { return s_->grad; }
  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape());
    return Tensor(shape(), s_->grad);
  }
  void zero_grad() { s_->grad.assign(s_->data.size(), Scalar(0)); }
  void clear_grad() { s_->grad.clear(); }

  bool all_finite() const {
    return std::all_of(s_->data.begin(), s_->data.end(), [](Scalar v) { return std::isfinite(v); });
  }

  /// Deep copy of the values, detached from any tape.
  Tensor clone() const { return Tensor(shape(), s_->data); }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(s_->data.size());
    std::transform(s_->data.begin(), s_->data.end(), out.begin(),
                   [](Scalar v) { return static_cast<Other>(v); });
    return Tensor<Other>(shape(), std::move(out));
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const std::shared_ptr<TensorStorage<Scalar>>& storage() const { return s_; }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != numel()) {
      throw DimensionError("cannot view " + shape_str(shape()) + " as " + std::to_string(rows) +
                           "x" + std::to_string(cols));
    }
  }

  std::shared_ptr<TensorStorage<Scalar>> s_;
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Per-thread record of differentiable operations in execution order.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };

  static Tape& local() {
    thread_local Tape tape;
    return tape;
  }

  void record(const char* op, std::function<void()> fn) { nodes_.push_back({op, std::move(fn)}); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Runs every backward rule once, newest first, then clears the tape.
  std::size_t replay() {
    std::vector<Node> nodes;
    nodes.swap(nodes_);
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) it->backward();
    return nodes.size();
  }

 private:
  std::vector<Node> nodes_;
};

/// Backpropagates from a single-element loss. Returns the number of tape
/// nodes visited.
template <typename Scalar>
std::size_t backward(const Tensor<Scalar>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw ContractError("loss is not connected to any trainable tensor");
  if (!loss.all_finite()) throw NumericError("backward() on a non-finite loss");
  loss.storage()->ensure_grad()[0] += Scalar(1);
  return Tape<Scalar>::local().replay();
}

}  // namespace vita
