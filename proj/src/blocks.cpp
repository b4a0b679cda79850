#include "autospace/blocks.hpp"

#include <cmath>

namespace autospace {

namespace {

Tensor bind_weight(WeightStore& store, const std::string& key, const Shape& shape, bool learnable,
            const WeightStore::Init& init) {
  Tensor t = store.get_or_create(key, init);
  if (t.shape() != shape) {
    throw ShapeError("weight store key " + key + " holds " + t.shape().str() + ", expected " + shape.str());
  }
  t.set_requires_grad(learnable);
  return t;
}

Tensor normal_init(const Shape& shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape.numel());
  for (double& x : v) x = static_cast<float>(dist(rng));
  return Tensor::from(shape, std::move(v));
}

}  // namespace

BatchNormAttrs bn_attrs(BnMode mode) {
  BatchNormAttrs a;
  a.training = mode != BnMode::kEval;
  a.update_running = mode == BnMode::kTrain;
  return a;
}

ConvBlock::ConvBlock(WeightStore& store, const std::string& prefix, int c_in, int c_out, int kernel,
                     Conv2dAttrs attrs, bool relu, Rng& init_rng)
    : attrs_(attrs), relu_(relu) {
  const int fan_in = (c_in / attrs.groups) * kernel * kernel;
  const Shape wshape{c_out, c_in / attrs.groups, kernel, kernel};
  weight_ = bind_weight(store, prefix + ".conv.w", wshape, true,
                 [&] { return normal_init(wshape, std::sqrt(2.0 / fan_in), init_rng); });
  const Shape cshape{c_out};
  bn_.gamma = bind_weight(store, prefix + ".bn.gamma", cshape, true, [&] { return Tensor::full(cshape, 1.0); });
  bn_.beta = bind_weight(store, prefix + ".bn.beta", cshape, true, [&] { return Tensor::zeros(cshape); });
  bn_.running_mean = bind_weight(store, prefix + ".bn.mean", cshape, false, [&] { return Tensor::zeros(cshape); });
  bn_.running_var = bind_weight(store, prefix + ".bn.var", cshape, false, [&] { return Tensor::full(cshape, 1.0); });
}

Tensor ConvBlock::forward(Tape& tape, const Tensor& x, BnMode mode) const {
  Tensor y = tape.conv2d(x, weight_, attrs_);
  y = tape.batchnorm2d(y, bn_.gamma, bn_.beta, bn_.running_mean, bn_.running_var, bn_attrs(mode));
  return relu_ ? tape.relu(y) : y;
}

void ConvBlock::collect(std::vector<Tensor>& params) const {
  params.push_back(weight_);
  params.push_back(bn_.gamma);
  params.push_back(bn_.beta);
}

Dense::Dense(WeightStore& store, const std::string& prefix, int in, int out, Rng& init_rng) {
  const Shape wshape{out, in};
  weight_ = bind_weight(store, prefix + ".w", wshape, true, [&] { return normal_init(wshape, std::sqrt(1.0 / in), init_rng); });
  bias_ = bind_weight(store, prefix + ".b", Shape{out}, true, [&] { return Tensor::zeros(Shape{out}); });
}

void Dense::collect(std::vector<Tensor>& params) const {
  params.push_back(weight_);
  params.push_back(bias_);
}

Cell::Cell(const CellGenome& genome, const LayerShape& shape, WeightStore& store, const std::string& prefix,
           Rng& init_rng)
    : genome_(genome), shape_(shape) {
  shape.validate();
  const int inner = genome.ratio * shape.c_in;
  in_ = ConvBlock(store, prefix + "in", shape.c_in, inner, 1, {}, true, init_rng);
  edges_.resize(kEdgeCount);
  for (int e = 0; e < kEdgeCount; ++e) {
    const std::string name = prefix + "e" + std::to_string(e);
    switch (genome.edges[e]) {
      case Op::kZero:
      case Op::kIdentity: break;
      case Op::kConv1x1: edges_[e] = ConvBlock(store, name, inner, inner, 1, {}, true, init_rng); break;
      case Op::kConv3x3:
        edges_[e] = ConvBlock(store, name, inner, inner, 3, {.stride = 1, .padding = 1}, true, init_rng);
        break;
      case Op::kDwConv3x3:
        edges_[e] = ConvBlock(store, name, inner, inner, 3, {.stride = 1, .padding = 1, .groups = inner}, true,
                              init_rng);
        break;
    }
  }
  out_ = ConvBlock(store, prefix + "out", inner, shape.c_out, 1, {}, false, init_rng);
}

Tensor Cell::apply_edge(Tape& tape, int edge, const Tensor& x, BnMode mode) const {
  switch (genome_.edges[edge]) {
    case Op::kZero: return tape.zero_like(x);
    case Op::kIdentity: return x;
    default: return edges_[edge].forward(tape, x, mode);
  }
}

Tensor Cell::forward(Tape& tape, const Tensor& x, BnMode mode) const {
  Tensor base = x;
  if (shape_.stride > 1) base = tape.avg_pool2d(base, {.kernel = shape_.stride});
  base = in_.forward(tape, base, mode);
  Tensor a = base, b = base;
  for (int e = 0; e < 3; ++e) a = apply_edge(tape, e, a, mode);
  for (int e = 3; e < 6; ++e) b = apply_edge(tape, e, b, mode);
  Tensor merged = genome_.agg == Aggregation::kAdd ? tape.add(a, b) : tape.mul(a, b);
  return out_.forward(tape, merged, mode);
}

void Cell::collect(std::vector<Tensor>& params) const {
  in_.collect(params);
  for (int e = 0; e < kEdgeCount; ++e) {
    const Op op = genome_.edges[e];
    if (op != Op::kZero && op != Op::kIdentity) edges_[e].collect(params);
  }
  out_.collect(params);
}

}  // namespace autospace
