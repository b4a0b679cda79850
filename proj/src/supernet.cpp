#include "autospace/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "autospace/dataset.hpp"

namespace autospace {

LayerShape ChannelPlan::layer_shape(int layer) const {
  validate();
  if (layer < 0 || layer >= layers()) throw std::out_of_range("layer index " + std::to_string(layer));
  LayerShape s;
  s.c_in = layer == 0 ? stem_channels : channels[layer - 1];
  s.c_out = channels[layer];
  s.h = stem_h();
  s.w = stem_w();
  for (int l = 0; l < layer; ++l) {
    s.h /= strides[l];
    s.w /= strides[l];
  }
  s.stride = strides[layer];
  return s;
}

void ChannelPlan::validate() const {
  if (image_channels <= 0 || image_h <= 0 || image_w <= 0 || stem_channels <= 0 || classes < 2) {
    throw std::invalid_argument("channel plan: image dims, stem channels and classes must be positive");
  }
  if (channels.empty()) throw std::invalid_argument("channel plan: no layers");
  if (channels.size() != strides.size()) {
    throw std::invalid_argument("channel plan: " + std::to_string(channels.size()) + " channel entries but " +
                                std::to_string(strides.size()) + " strides");
  }
  int h = stem_h(), w = stem_w();
  for (std::size_t l = 0; l < channels.size(); ++l) {
    if (channels[l] <= 0) throw std::invalid_argument("channel plan: layer " + std::to_string(l) + " has no channels");
    if (strides[l] < 1 || h % strides[l] != 0 || w % strides[l] != 0) {
      throw std::invalid_argument("channel plan: stride " + std::to_string(strides[l]) + " at layer " +
                                  std::to_string(l) + " does not divide " + std::to_string(h) + "x" +
                                  std::to_string(w));
    }
    h /= strides[l];
    w /= strides[l];
  }
}

std::uint64_t stem_madds(const ChannelPlan& plan) {
  return 9ULL * plan.image_channels * plan.stem_channels * plan.stem_h() * plan.stem_w();
}

std::uint64_t head_madds(const ChannelPlan& plan) {
  return static_cast<std::uint64_t>(plan.channels.back()) * plan.classes;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= z;
  return p;
}

std::vector<double> alpha_grad(std::span<const double> probs, std::span<const double> gate_grads,
                               std::span<const double> scale) {
  const std::size_t k = probs.size();
  if (gate_grads.size() != k || scale.size() != k) throw std::invalid_argument("alpha_grad: length mismatch");
  // sum_k gg_k p_k (delta_ik - p_i) = p_i (gg_i - <gg, p>)
  double mean = 0.0;
  for (std::size_t j = 0; j < k; ++j) mean += gate_grads[j] * probs[j];
  std::vector<double> g(k);
  for (std::size_t i = 0; i < k; ++i) g[i] = probs[i] * (gate_grads[i] - mean) * scale[i];
  return g;
}

MixedLayer::MixedLayer(std::vector<Cell> cells, std::vector<GenomeId> ids, std::vector<double> alpha,
                       std::vector<std::uint64_t> participation)
    : cells_(std::move(cells)), ids_(std::move(ids)), alpha_(std::move(alpha)), participation_(std::move(participation)) {
  if (cells_.empty()) throw std::invalid_argument("mixed layer needs at least one cell");
  if (ids_.size() != cells_.size() || alpha_.size() != cells_.size() || participation_.size() != cells_.size()) {
    throw std::invalid_argument("mixed layer: cells, ids, alphas and counters differ in length");
  }
  const LayerShape& s = cells_.front().shape();
  for (const Cell& c : cells_) {
    const LayerShape& o = c.shape();
    if (o.c_in != s.c_in || o.c_out != s.c_out || o.h != s.h || o.w != s.w || o.stride != s.stride) {
      throw std::invalid_argument("mixed layer: cells disagree on layer shape");
    }
  }
}

Tensor MixedLayer::forward(Tape& tape, const Tensor& x, BnMode mode, GateMode gate, Rng* gate_rng) {
  probs_ = softmax(alpha_);
  gates_.assign(cells_.size(), Tensor());
  active_.clear();
  if (gate == GateMode::kBinaryGate) {
    if (gate_rng == nullptr) throw std::invalid_argument("binary gating needs a random stream");
    std::discrete_distribution<int> pick(probs_.begin(), probs_.end());
    const int k = pick(*gate_rng);
    active_.push_back(k);
    gates_[k] = Tensor::scalar(1.0, true);
    return tape.scale(cells_[k].forward(tape, x, mode), gates_[k]);
  }
  Tensor out;
  for (int k = 0; k < this->k(); ++k) {
    active_.push_back(k);
    gates_[k] = Tensor::scalar(probs_[k], true);
    Tensor term = tape.scale(cells_[k].forward(tape, x, mode), gates_[k]);
    out = out.defined() ? tape.add(out, term) : term;
  }
  return out;
}

Tensor MixedLayer::forward_path(Tape& tape, const Tensor& x, BnMode mode, int path) {
  if (path < 0 || path >= k()) throw std::out_of_range("path " + std::to_string(path) + " of " + std::to_string(k()));
  probs_ = softmax(alpha_);
  gates_.assign(cells_.size(), Tensor());
  active_ = {path};
  gates_[path] = Tensor::scalar(1.0, true);
  return tape.scale(cells_[path].forward(tape, x, mode), gates_[path]);
}

std::vector<double> MixedLayer::gate_grads() const {
  std::vector<double> g(cells_.size(), 0.0);
  for (int k : active_) {
    if (gates_[k].defined() && gates_[k].has_grad()) g[k] = gates_[k].grad()[0];
  }
  return g;
}

std::vector<double> MixedLayer::alpha_grad(std::span<const double> gate_grads, std::uint64_t supernet_iters) const {
  std::vector<double> scale(cells_.size(), 1.0);
  for (std::size_t i = 0; i < scale.size(); ++i) {
    if (participation_[i] > 0) scale[i] = static_cast<double>(supernet_iters) / static_cast<double>(participation_[i]);
  }
  const std::vector<double> p = probs_.empty() ? probabilities() : probs_;
  return autospace::alpha_grad(p, gate_grads, scale);
}

ConvBlock make_stem(const ChannelPlan& plan, WeightStore& store, Rng& init_rng) {
  return ConvBlock(store, "stem/conv", plan.image_channels, plan.stem_channels, 3, {.stride = 2, .padding = 1}, true,
                   init_rng);
}

Dense make_head(const ChannelPlan& plan, WeightStore& store, Rng& init_rng) {
  return Dense(store, "head/fc", plan.channels.back(), plan.classes, init_rng);
}

Supernet Supernet::assemble(const std::vector<std::vector<Member>>& sampled, const ChannelPlan& plan,
                            WeightStore& store, Rng& init_rng) {
  plan.validate();
  if (static_cast<int>(sampled.size()) != plan.layers()) {
    throw std::invalid_argument("assemble: " + std::to_string(sampled.size()) + " sampled layers for a " +
                                std::to_string(plan.layers()) + "-layer plan");
  }
  const std::size_t k = sampled.front().size();
  ConvBlock stem = make_stem(plan, store, init_rng);
  std::vector<MixedLayer> layers;
  for (int l = 0; l < plan.layers(); ++l) {
    const auto& members = sampled[l];
    if (members.empty() || members.size() != k) {
      throw std::invalid_argument("assemble: layer " + std::to_string(l) + " has " + std::to_string(members.size()) +
                                  " cells, expected " + std::to_string(k));
    }
    const LayerShape shape = plan.layer_shape(l);
    std::vector<Cell> cells;
    std::vector<GenomeId> ids;
    std::vector<double> alpha;
    std::vector<std::uint64_t> participation;
    for (const Member& m : members) {
      const std::string prefix = "L" + std::to_string(l) + "/G" + std::to_string(m.id()) + "/";
      cells.emplace_back(m.genome, shape, store, prefix, init_rng);
      ids.push_back(m.id());
      alpha.push_back(m.fitness);
      participation.push_back(m.participation);
    }
    layers.emplace_back(std::move(cells), std::move(ids), std::move(alpha), std::move(participation));
  }
  Dense head = make_head(plan, store, init_rng);
  return Supernet(plan, std::move(stem), std::move(head), std::move(layers));
}

Tensor Supernet::head(Tape& tape, const Tensor& x) const { return head_.forward(tape, tape.global_avg_pool(x)); }

namespace {

void check_input(const ChannelPlan& plan, const Tensor& batch) {
  const Shape& s = batch.shape();
  if (s.rank() != 4 || s[1] != plan.image_channels || s[2] != plan.image_h || s[3] != plan.image_w) {
    throw ShapeError("supernet input " + s.str() + " does not match plan " + std::to_string(plan.image_channels) +
                     "x" + std::to_string(plan.image_h) + "x" + std::to_string(plan.image_w));
  }
}

}  // namespace

Tensor Supernet::forward(Tape& tape, const Tensor& batch, BnMode mode, Rng* gate_rng) {
  check_input(plan_, batch);
  fixed_choice_.clear();
  Tensor x = stem_.forward(tape, batch, mode);
  for (MixedLayer& layer : layers_) x = layer.forward(tape, x, mode, gate_mode, gate_rng);
  return head(tape, x);
}

Tensor Supernet::forward_path(Tape& tape, const Tensor& batch, std::span<const int> choice, BnMode mode) {
  check_input(plan_, batch);
  if (choice.size() != layers_.size()) throw std::invalid_argument("forward_path: one choice per layer required");
  fixed_choice_.assign(choice.begin(), choice.end());
  Tensor x = stem_.forward(tape, batch, mode);
  for (std::size_t l = 0; l < layers_.size(); ++l) x = layers_[l].forward_path(tape, x, mode, choice[l]);
  return head(tape, x);
}

std::vector<Tensor> Supernet::active_parameters() const {
  std::vector<Tensor> params;
  stem_.collect(params);
  for (const MixedLayer& layer : layers_) {
    for (int k : layer.active_paths()) layer.cells()[k].collect(params);
  }
  head_.collect(params);
  return params;
}

std::vector<Tensor> Supernet::parameters() const {
  std::vector<Tensor> params;
  stem_.collect(params);
  for (const MixedLayer& layer : layers_) {
    for (const Cell& c : layer.cells()) c.collect(params);
  }
  head_.collect(params);
  return params;
}

std::vector<LayerAlphas> Supernet::extract_alphas() const {
  std::vector<LayerAlphas> out;
  for (const MixedLayer& layer : layers_) out.push_back({layer.ids(), layer.alpha(), layer.participation()});
  return out;
}

std::vector<double> train_steps(Supernet& net, BatchSource& data, const TrainStepOptions& options, SgdState& opt,
                                Rng& gate_rng) {
  if (options.steps < 1) throw std::invalid_argument("train_steps: steps must be at least 1");
  std::vector<double> losses;
  losses.reserve(options.steps);
  for (int step = 0; step < options.steps; ++step) {
    try {
      Batch batch = data.next();
      Tape tape(options.precision);
      Tensor logits = net.forward(tape, batch.images, BnMode::kTrain, &gate_rng);
      Tensor loss = tape.softmax_cross_entropy(logits, batch.labels);
      tape.backward(loss);

      ++net.iterations;
      for (MixedLayer& layer : net.layers()) {
        for (int k : layer.active_paths()) ++layer.participation()[k];
        const std::vector<double> gg = layer.gate_grads();
        std::vector<double> g;
        if (options.scale_alpha_grads) {
          g = layer.alpha_grad(gg, net.iterations);
        } else {
          g = alpha_grad(layer.last_probabilities(), gg, std::vector<double>(layer.k(), 1.0));
        }
        for (int i = 0; i < layer.k(); ++i) layer.alpha()[i] -= options.alpha_lr * g[i];
      }
      std::vector<Tensor> params = net.active_parameters();
      sgd_step(params, opt, options.lr);
      losses.push_back(loss.item());
    } catch (const NumericDivergence& e) {
      throw NumericDivergence(std::string(e.what()) + " at supernet iteration " + std::to_string(net.iterations));
    }
  }
  return losses;
}

}  // namespace autospace
