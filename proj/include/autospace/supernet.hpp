#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "autospace/blocks.hpp"
#include "autospace/optim.hpp"
#include "autospace/population.hpp"

namespace autospace {

struct Batch;
class BatchSource;

/// Network skeleton shared by every supernet and derived architecture:
/// 3x3 stride-2 stem, L cell layers, global pooling and a linear head.
struct ChannelPlan {
  int image_channels = 3;
  int image_h = 16;
  int image_w = 16;
  int stem_channels = 16;
  std::vector<int> channels{16, 16, 32, 32, 64, 64};
  std::vector<int> strides{1, 2, 1, 2, 1, 1};
  int classes = 10;

  int layers() const { return static_cast<int>(channels.size()); }
  int stem_h() const { return (image_h - 1) / 2 + 1; }
  int stem_w() const { return (image_w - 1) / 2 + 1; }
  /// Shape seen by layer l; throws on an inconsistent plan.
  LayerShape layer_shape(int layer) const;
  void validate() const;
};

std::uint64_t stem_madds(const ChannelPlan& plan);
std::uint64_t head_madds(const ChannelPlan& plan);

enum class GateMode { kFullSum, kBinaryGate };

std::vector<double> softmax(std::span<const double> logits);

/// Fitness gradient: softmax Jacobian applied to the gate
/// gradients, then scaled per path.
std::vector<double> alpha_grad(std::span<const double> probs, std::span<const double> gate_grads,
                               std::span<const double> scale);

/// K cells in parallel mixed by softmax(alpha).
class MixedLayer {
 public:
  MixedLayer(std::vector<Cell> cells, std::vector<GenomeId> ids, std::vector<double> alpha,
             std::vector<std::uint64_t> participation);

  int k() const { return static_cast<int>(cells_.size()); }
  const std::vector<Cell>& cells() const { return cells_; }
  const std::vector<GenomeId>& ids() const { return ids_; }
  std::vector<double>& alpha() { return alpha_; }
  const std::vector<double>& alpha() const { return alpha_; }
  std::vector<std::uint64_t>& participation() { return participation_; }
  const std::vector<std::uint64_t>& participation() const { return participation_; }
  std::vector<double> probabilities() const { return softmax(alpha_); }

  /// Mixture forward. kBinaryGate samples a single path from `gate_rng`.
  Tensor forward(Tape& tape, const Tensor& x, BnMode mode, GateMode gate, Rng* gate_rng);
  /// Forward through one path only, gate fixed to 1.
  Tensor forward_path(Tape& tape, const Tensor& x, BnMode mode, int path);

  /// dL/dg_k from the last backward pass; zero for paths not evaluated.
  std::vector<double> gate_grads() const;
  /// Paths evaluated by the last forward.
  const std::vector<int>& active_paths() const { return active_; }
  const std::vector<double>& last_probabilities() const { return probs_; }

  /// Gradient for alpha with the n/n' compensation, n = supernet_iters,
  /// n' = this path's participation (scale 1 when n' is zero).
  std::vector<double> alpha_grad(std::span<const double> gate_grads, std::uint64_t supernet_iters) const;

 private:
  std::vector<Cell> cells_;
  std::vector<GenomeId> ids_;
  std::vector<double> alpha_;
  std::vector<std::uint64_t> participation_;
  std::vector<Tensor> gates_;
  std::vector<double> probs_;
  std::vector<int> active_;
};

struct LayerAlphas {
  std::vector<GenomeId> ids;
  std::vector<double> alpha;
  std::vector<std::uint64_t> participation;
};

class Supernet {
 public:
  /// Realizes the sampled cells. Weights are looked up by
  /// "L{layer}/G{id}/..." so cells seen before keep their trained values.
  static Supernet assemble(const std::vector<std::vector<Member>>& sampled, const ChannelPlan& plan,
                           WeightStore& store, Rng& init_rng);

  const ChannelPlan& plan() const { return plan_; }
  std::vector<MixedLayer>& layers() { return layers_; }
  const std::vector<MixedLayer>& layers() const { return layers_; }

  GateMode gate_mode = GateMode::kFullSum;
  /// Total supernet training iterations so far (n in the gradient scaling).
  std::uint64_t iterations = 0;

  Tensor forward(Tape& tape, const Tensor& batch, BnMode mode, Rng* gate_rng = nullptr);
  /// Single architecture: one fixed path per layer.
  Tensor forward_path(Tape& tape, const Tensor& batch, std::span<const int> choice, BnMode mode);

  /// Learnable parameters touched by the last forward.
  std::vector<Tensor> active_parameters() const;
  std::vector<Tensor> parameters() const;

  std::vector<LayerAlphas> extract_alphas() const;

 private:
  Supernet(ChannelPlan plan, ConvBlock stem, Dense head, std::vector<MixedLayer> layers)
      : plan_(std::move(plan)), stem_(std::move(stem)), head_(std::move(head)), layers_(std::move(layers)) {}

  Tensor head(Tape& tape, const Tensor& x) const;

  ChannelPlan plan_;
  ConvBlock stem_;
  Dense head_;
  std::vector<MixedLayer> layers_;
  std::vector<int> fixed_choice_;  // set by forward_path, empty for mixture forwards
};

/// Builds the stem and head blocks the supernet uses.
ConvBlock make_stem(const ChannelPlan& plan, WeightStore& store, Rng& init_rng);
Dense make_head(const ChannelPlan& plan, WeightStore& store, Rng& init_rng);

struct TrainStepOptions {
  int steps = 1;
  double lr = 0.1;
  double alpha_lr = 1e-3;
  bool scale_alpha_grads = true;
  Precision precision = Precision::kFloat32;
};

/// Cross-entropy training: SGD on weights, gradient descent on alphas.
/// Returns the loss of every iteration.
std::vector<double> train_steps(Supernet& net, BatchSource& data, const TrainStepOptions& options, SgdState& opt,
                                Rng& gate_rng);

}  // namespace autospace
