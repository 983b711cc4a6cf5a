// Copyright 2026 The rscnn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rscnn {

/// Raised whenever operand shapes do not satisfy an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  void accumulate(std::size_t i, T g) { grad[i] += g; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

/// Handle to a node of the differentiation graph. Copies alias the same node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access; intended for leaves (parameters, inputs).
  std::span<T> data() { return node_->value; }
  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Per-channel batch-normalization state. Scale and shift are trainable.
template <typename T>
struct BatchNormState {
  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels);

  std::size_t channels() const { return running_mean.size(); }

  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);
  Tensor<T> scale;
  Tensor<T> shift;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kCosineMinNorm = 1e-12;

enum class ElementwiseKind { add, mul, relu };
enum class ReduceKind { max, mean, sum };
enum class LossKind { softmax_cross_entropy, cosine };

// Linear algebra and elementwise ------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Binary kinds broadcast over singleton axes of equal-rank operands.
template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a,
                      const std::optional<Tensor<T>>& b = std::nullopt);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseKind::add, a, std::optional<Tensor<T>>(b));
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseKind::mul, a, std::optional<Tensor<T>>(b));
}
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return elementwise(ElementwiseKind::relu, a);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// Reductions ----------------------------------------------------------------

/// Removes `axis`. Max routes gradient to the first maximizing element.
template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& t, std::size_t axis);

/// Reduces contiguous row groups of a 2-D tensor: group g covers rows
/// [offsets[g], offsets[g+1]). Every group must be non-empty.
template <typename T>
Tensor<T> segment_reduce(ReduceKind kind, const Tensor<T>& t,
                         std::span<const std::size_t> offsets);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& t);

// Structural ------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape);

/// out[i] = t[indices[i]] for a 2-D tensor; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> indices);

/// Concatenates 2-D tensors with equal row counts along the column axis.
template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts);

// Normalization and regularization ------------------------------------------

/// Training mode normalizes with batch statistics and folds them into the
/// running statistics using state.momentum; inference uses running stats.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& t, BatchNormState<T>& state, bool training);

/// Inverted dropout; identity when not training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& t, double rate, bool training, std::mt19937_64& rng);

/// Scales each row of a 2-D tensor to unit Euclidean norm (norm floored at eps).
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& t, double eps = kCosineMinNorm);

// Losses ----------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

template <typename T>
Tensor<T> cosine_loss(const Tensor<T>& prediction, const Tensor<T>& target);

/// Dispatch form: cross-entropy targets are class indices stored as values.
template <typename T>
Tensor<T> loss(LossKind kind, const Tensor<T>& prediction, const Tensor<T>& target);

// Differentiation -------------------------------------------------------------

/// Accumulates d(loss)/d(x) into every reachable tensor with requires_grad,
/// then releases the recorded graph.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace rscnn
