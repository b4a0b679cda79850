#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "autospace/dataset.hpp"
#include "autospace/population.hpp"
#include "autospace/supernet.hpp"
#include "autospace/weight_store.hpp"

namespace autospace {

struct Architecture {
  std::vector<CellGenome> layers;

  void validate(const ChannelPlan& plan) const;
};

/// Stem + head + every layer's cell cost.
std::uint64_t total_madds(const Architecture& arch, const ChannelPlan& plan);

struct ArtifactMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// {"version":1,"layers":[genome..],"total_madds":n,"meta":{...}}
nlohmann::json architecture_to_json(const Architecture& arch, const ChannelPlan& plan, const ArtifactMeta& meta);
Architecture architecture_from_json(const nlohmann::json& j);

enum class SearchAlgo { kGradient, kRandom };

struct SearchConfig {
  double lambda = 1e-8;  // per MAdd
  SearchAlgo algo = SearchAlgo::kGradient;
  double budget = std::numeric_limits<double>::infinity();  // total MAdds cap, random search
  int epochs = 5;
  int candidates = 50;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double beta_lr = 0.1;
  std::uint64_t seed = 0;
  Precision precision = Precision::kFloat32;

  void validate() const;
};

class BudgetInfeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// K-path supernet over the subspace cells; weights keyed by the cells'
/// genome ids so evolved weights are reused. Alphas start at zero.
Supernet build_subspace_supernet(const SearchSpace& space, const ChannelPlan& plan, WeightStore& store, Rng& init_rng);

/// Per-layer madds of each path.
std::vector<std::vector<double>> path_madds(const Supernet& net);

/// Sum over layers of softmax(beta)-weighted cell cost, plus stem and head.
double expected_madds(const Supernet& net);

struct RegularizedLoss {
  double cross_entropy = 0.0;
  double expected_madds = 0.0;
  double total = 0.0;
  /// d total / d beta per layer; filled only when requested.
  std::vector<std::vector<double>> beta_grads;
  /// The regularizer's share of beta_grads.
  std::vector<std::vector<double>> regularizer_grads;
};

/// CE + lambda * E[MAdds] on one batch (full mixture, BN batch statistics).
RegularizedLoss regularized_loss(Supernet& net, const Batch& batch, double lambda, Precision precision,
                                 bool with_grads);

struct Candidate {
  std::vector<int> choice;
  std::uint64_t madds = 0;
  double accuracy = 0.0;
};

struct SearchResult {
  Architecture arch;
  std::vector<int> choice;
  std::vector<std::vector<double>> beta;  // gradient search only
  std::vector<Candidate> evaluated;       // random search only
};

std::vector<int> argmax_choice(const Supernet& net);
Architecture architecture_of(const Supernet& net, std::span<const int> choice);

SearchResult gradient_search(const SearchSpace& space, const DataSplits& data, const SearchConfig& cfg,
                             const ChannelPlan& plan, WeightStore& store);

/// Uniform single-path training of the shared weights.
void train_one_shot(Supernet& net, const Dataset& train, const SearchConfig& cfg);
/// Validation accuracy of one path per layer with shared weights.
double one_shot_accuracy(Supernet& net, std::span<const int> choice, const Dataset& val, int batch_size,
                         Precision precision);
/// Exhaustive when cfg.candidates >= K^L, otherwise uniform draws.
SearchResult evaluate_candidates(Supernet& net, const Dataset& val, const SearchConfig& cfg);

SearchResult random_search(const SearchSpace& space, const DataSplits& data, const SearchConfig& cfg,
                           const ChannelPlan& plan, WeightStore& store);

struct FinalTrainConfig {
  int epochs = 10;
  int warmup_epochs = 1;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 32;
  std::uint64_t seed = 0;
  Precision precision = Precision::kFloat32;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct FinalResult {
  double accuracy = 0.0;
  std::vector<EpochMetrics> epochs;
};

/// Fresh single-path network trained with warmup + cosine; top-1 on data.val.
FinalResult train_final(const Architecture& arch, const DataSplits& data, const ChannelPlan& plan,
                        const FinalTrainConfig& cfg);

/// Predictions vs labels.
double top1(const Tensor& logits, std::span<const int> labels);

/// Plain stack of 3x3 Conv-BN-ReLU layers, global pooling and a linear head.
struct PlainNetSpec {
  int depth = 2;
  int width = 8;
};

class PlainNet {
 public:
  PlainNet(const PlainNetSpec& spec, int in_channels, int classes, WeightStore& store, const std::string& prefix,
           Rng& init_rng);
  Tensor forward(Tape& tape, const Tensor& x, BnMode mode) const;
  std::vector<Tensor> parameters() const;

 private:
  std::vector<ConvBlock> convs_;
  Dense head_;
};

struct RankTestConfig {
  std::vector<PlainNetSpec> nets{{2, 8}, {4, 8}, {6, 8}};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int standalone_epochs = 10;
  int max_epochs = 10;
  int batch_size = 32;
  double lr = 0.05;
  double alpha_lr = 0.2;
  double alpha_init_std = 1e-3;
  std::uint64_t data_seed = 0;
  Precision precision = Precision::kFloat32;
};

struct RankRow {
  std::uint64_t seed = 0;
  std::vector<double> alpha_init;
  std::vector<double> alpha_final;
  int rank_epoch = -1;  // first epoch (1-based) from which the ordering holds to the horizon; -1 if never
};

struct RankReport {
  std::vector<double> standalone_accuracy;
  bool valid = false;  // standalone accuracies strictly increasing
  std::vector<RankRow> rows;
  int recovered() const;
};

/// Standalone accuracy per net (fresh init from `seed`).
double standalone_accuracy(const PlainNetSpec& spec, const DataSplits& data, const RankTestConfig& cfg,
                           std::uint64_t seed);

RankReport rank_test(const DataSplits& data, const RankTestConfig& cfg);

std::string rank_report_csv(const RankReport& report, const std::string& header_comment);
std::string metrics_csv(const FinalResult& result, const std::string& header_comment);

}  // namespace autospace
