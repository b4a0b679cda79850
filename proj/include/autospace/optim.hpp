#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "autospace/tensor.hpp"

namespace autospace {

/// Momentum SGD with L2 weight decay. Velocity buffers are keyed by tensor
/// identity, so a parameter keeps its velocity across supernet rebuilds.
class SgdState {
 public:
  SgdState(double momentum = 0.9, double weight_decay = 1e-4)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }
  std::size_t tracked() const { return velocity_.size(); }

 private:
  friend void sgd_step(std::span<Tensor> params, SgdState& state, double lr);
  double momentum_;
  double weight_decay_;
  struct Slot {
    Tensor param;  // keeps the key alive
    std::vector<double> v;
  };
  std::unordered_map<const TensorImpl*, Slot> velocity_;
};

/// v <- momentum*v + grad + decay*param; param <- param - lr*v; then clears
/// the gradients. Throws std::invalid_argument if any param lacks a gradient.
void sgd_step(std::span<Tensor> params, SgdState& state, double lr);

struct LrSchedule {
  double base = 0.1;
  int warmup_epochs = 0;
  int total_epochs = 1;
};

/// Linear warmup followed by cosine decay to zero.
double lr_at(const LrSchedule& schedule, int epoch);

}  // namespace autospace
