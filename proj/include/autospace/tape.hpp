#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "autospace/tensor.hpp"

namespace autospace {

enum class PrimitiveKind {
  kConv2d,
  kBatchNorm2d,
  kRelu,
  kAdd,
  kMul,
  kGlobalAvgPool,
  kAvgPool2d,
  kLinear,
  kSoftmaxCrossEntropy,
  kScale,
  kZeroLike,
  kSum,
};

std::string_view primitive_name(PrimitiveKind kind);

struct Conv2dAttrs {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

struct BatchNormAttrs {
  bool training = true;
  // Only meaningful in training mode; false gives batch statistics without
  // touching the running estimates (used for one-shot evaluation).
  bool update_running = true;
  double momentum = 0.1;
  double eps = 1e-3;
};

struct PoolAttrs {
  int kernel = 2;
};

struct CrossEntropyAttrs {
  std::vector<int> labels;
};

using PrimitiveAttrs =
    std::variant<std::monostate, Conv2dAttrs, BatchNormAttrs, PoolAttrs, CrossEntropyAttrs>;

/// Records primitive applications for reverse-mode differentiation.
///
/// An application is recorded only when at least one input requires a
/// gradient. backward() replays the records in reverse order, which is a
/// valid reverse topological order because inputs always precede outputs.
/// One tape per forward pass; discard it after backward().
class Tape {
 public:
  explicit Tape(Precision precision = Precision::kFloat32) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }

  /// Generic entry point; operand order per kind:
  ///   conv2d: x, w        batchnorm2d: x, gamma, beta, running_mean, running_var
  ///   linear: x, w, b     scale: x, s (one element)     others: unary or binary
  Tensor apply(PrimitiveKind kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs = {});

  Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dAttrs& attrs);
  Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                     Tensor running_var, const BatchNormAttrs& attrs);
  Tensor relu(const Tensor& x);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor global_avg_pool(const Tensor& x);
  Tensor avg_pool2d(const Tensor& x, const PoolAttrs& attrs);
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
  /// Mean cross-entropy of softmax(logits) against integer labels.
  Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
  Tensor scale(const Tensor& x, const Tensor& s);
  Tensor zero_like(const Tensor& x);
  Tensor sum(const Tensor& x);

  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  /// Multiply-accumulate operations executed by conv2d and linear so far.
  std::uint64_t macs() const { return macs_; }

 private:
  struct Node {
    PrimitiveKind kind;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  Tensor finish(PrimitiveKind kind, Tensor out);
  bool tracking(std::initializer_list<const Tensor*> inputs) const;
  void record(PrimitiveKind kind, std::initializer_list<const Tensor*> inputs, const Tensor& out,
              std::function<void()> backward);
  void seal_gradients(const Node& node) const;

  Precision precision_;
  std::vector<Node> nodes_;
  std::uint64_t macs_ = 0;
};

}  // namespace autospace
