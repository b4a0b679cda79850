#pragma once

#include <string>
#include <vector>

#include "autospace/genome.hpp"
#include "autospace/tape.hpp"
#include "autospace/weight_store.hpp"

namespace autospace {

/// How batch normalization behaves during a forward pass.
enum class BnMode {
  kTrain,       // batch statistics, running estimates updated
  kBatchStats,  // batch statistics, running estimates untouched (one-shot evaluation)
  kEval,        // running estimates
};

BatchNormAttrs bn_attrs(BnMode mode);

struct BatchNormParams {
  Tensor gamma, beta, running_mean, running_var;
};

/// Conv -> BatchNorm -> optional ReLU, parameters bound through a WeightStore
/// under "<prefix>.conv.w", "<prefix>.bn.{gamma,beta,mean,var}".
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(WeightStore& store, const std::string& prefix, int c_in, int c_out, int kernel, Conv2dAttrs attrs,
            bool relu, Rng& init_rng);

  Tensor forward(Tape& tape, const Tensor& x, BnMode mode) const;
  void collect(std::vector<Tensor>& params) const;

 private:
  Tensor weight_;
  BatchNormParams bn_;
  Conv2dAttrs attrs_;
  bool relu_ = true;
};

/// Fully connected layer under "<prefix>.w" and "<prefix>.b".
class Dense {
 public:
  Dense() = default;
  Dense(WeightStore& store, const std::string& prefix, int in, int out, Rng& init_rng);

  Tensor forward(Tape& tape, const Tensor& x) const { return tape.linear(x, weight_, bias_); }
  void collect(std::vector<Tensor>& params) const;

 private:
  Tensor weight_, bias_;
};

/// One realized cell: IN (optional avg-pool downsampling + 1x1 expansion),
/// two branches of three edge operators, aggregation, OUT 1x1 projection
/// without ReLU.
class Cell {
 public:
  Cell(const CellGenome& genome, const LayerShape& shape, WeightStore& store, const std::string& prefix,
       Rng& init_rng);

  Tensor forward(Tape& tape, const Tensor& x, BnMode mode) const;
  void collect(std::vector<Tensor>& params) const;
  const CellGenome& genome() const { return genome_; }
  const LayerShape& shape() const { return shape_; }

 private:
  Tensor apply_edge(Tape& tape, int edge, const Tensor& x, BnMode mode) const;

  CellGenome genome_;
  LayerShape shape_;
  ConvBlock in_;
  std::vector<ConvBlock> edges_;  // default-constructed for ZERO / IDENTITY
  ConvBlock out_;
};

}  // namespace autospace
