#include "autospace/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace autospace {

void sgd_step(std::span<Tensor> params, SgdState& state, double lr) {
  for (const Tensor& p : params) {
    if (!p.has_grad()) throw std::invalid_argument("sgd_step: parameter " + p.shape().str() + " has no gradient");
  }
  for (Tensor& p : params) {
    auto& slot = state.velocity_[p.id()];
    if (slot.v.empty()) {
      slot.param = p;
      slot.v.assign(p.numel(), 0.0);
    }
    auto data = p.data();
    auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      slot.v[i] = state.momentum_ * slot.v[i] + grad[i] + state.weight_decay_ * data[i];
      data[i] -= lr * slot.v[i];
    }
    p.clear_grad();
  }
}

double lr_at(const LrSchedule& s, int epoch) {
  if (epoch < 0 || epoch >= s.total_epochs) {
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0," +
                            std::to_string(s.total_epochs) + ")");
  }
  if (epoch < s.warmup_epochs) return s.base * (epoch + 1) / s.warmup_epochs;
  const int span = s.total_epochs - s.warmup_epochs;
  const double progress = static_cast<double>(epoch - s.warmup_epochs) / span;
  return 0.5 * s.base * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace autospace
