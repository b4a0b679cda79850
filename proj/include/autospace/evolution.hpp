#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "autospace/dataset.hpp"
#include "autospace/population.hpp"
#include "autospace/supernet.hpp"
#include "autospace/weight_store.hpp"

namespace autospace {

/// IRB-equivalent cell: conv1x1 -> dwconv3x3 -> conv1x1 on one branch,
/// the other branch zeroed, ratio 6, additive aggregation.
CellGenome default_reference();

/// Twice the reference cell's cost at the plan's most expensive layer.
double default_madds_max(const ChannelPlan& plan);

struct EvolutionConfig {
  ChannelPlan plan;
  int k = 4;
  int population = 25;
  int tournament = 5;
  int n_offspring = -1;          // -1: K
  int f = 10;                    // iterations per generation
  int total_iterations = 40;     // T
  double tau = 4.0 / 30.0;
  double epsilon = 0.9;
  double alpha_lr = 1e-3;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double madds_max = 0.0;        // 0: default_madds_max(plan)
  std::optional<CellGenome> reference = default_reference();
  bool reference_schedule = true;  // false: the reference never constrains mutation
  bool reject_annihilating = true;  // keep cells whose output is identically zero out of the populations
  int n_mut = 1;
  int batch_size = 32;
  std::uint64_t seed = 0;
  GateMode gate_mode = GateMode::kFullSum;
  Precision precision = Precision::kFloat32;
  bool scale_alpha_grads = true;

  int offspring() const { return n_offspring < 0 ? k : n_offspring; }
  int generations() const { return total_iterations / f; }
  double budget() const { return madds_max > 0.0 ? madds_max : default_madds_max(plan); }
  void validate() const;
};

/// True iff the reference constraint applies at `iteration` (first half of T).
bool reference_schedule(const EvolutionConfig& cfg, std::uint64_t iteration);

struct GenerationStats {
  int generation = 0;
  int layer = 0;
  double mean_fitness = 0.0;
  double max_fitness = 0.0;
};

struct EvolutionTrace {
  std::vector<double> losses;                  // one per training iteration
  std::vector<GenerationStats> generations;    // one per generation per layer
  std::vector<double> generation_seconds;      // wall clock, not part of any artifact
};

/// Stand-in for supernet training: returns alpha* for each sampled member,
/// aligned with `sampled`.
using Scorer =
    std::function<std::vector<std::vector<double>>(int generation, const std::vector<std::vector<Member>>& sampled)>;

struct EvolutionResult {
  SearchSpace space;
  EvolutionTrace trace;
  std::vector<LayerPopulation> populations;
  WeightStore store;
};

/// Sample -> assemble -> train f iterations -> write back -> spawn, for T/f
/// generations; then top-K per layer. `train` may be empty when a scorer
/// replaces training. On failure the exception is rethrown after `partial`
/// (if given) receives the trace so far.
EvolutionResult run_evolution(const EvolutionConfig& cfg, const Dataset* train, const Scorer& scorer = {},
                              EvolutionTrace* partial = nullptr);

struct SpeedupRow {
  std::uint64_t seed = 0;
  bool reference = false;
  int checkpoint = 0;        // iteration index
  double mean_loss = 0.0;    // mean over the max(f, T/8) iterations ending at the checkpoint
};

struct SpeedupReport {
  std::vector<SpeedupRow> rows;
  int checkpoint_25 = 0;
  int seeds_won_25 = 0;      // seeds whose reference arm is lower at the 25% checkpoint
  int seeds = 0;
};

/// Paired runs per seed: reference schedule on vs permanently off.
SpeedupReport speedup_experiment(const EvolutionConfig& cfg, const Dataset& train, const std::vector<std::uint64_t>& seeds);

/// "iteration,loss" rows.
std::string loss_trace_csv(const EvolutionTrace& trace, const std::string& header_comment);
/// "generation,layer,mean_fitness,max_fitness" rows.
std::string generation_trace_csv(const EvolutionTrace& trace, const std::string& header_comment);
std::string speedup_csv(const SpeedupReport& report, const std::string& header_comment);

}  // namespace autospace
