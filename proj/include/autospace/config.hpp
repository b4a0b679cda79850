#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "autospace/dataset.hpp"
#include "autospace/evolution.hpp"
#include "autospace/search.hpp"

namespace autospace {

/// Bad or inconsistent configuration; the CLI maps it to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | idx | cifar
  SynthSpec synth;
  std::string images, labels;       // idx
  std::vector<std::string> files;   // cifar
  double train_fraction = 0.8;      // idx / cifar
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Precision precision = Precision::kFloat32;
  DatasetSpec dataset;
  EvolutionConfig evolution;  // plan image dims and classes follow the dataset
  SearchConfig search;
  FinalTrainConfig train;
  RankTestConfig rank_test;
  DatasetSpec rank_dataset;
  int speedup_seeds = 3;
  std::string hash;  // content hash of the canonical config document
};

/// Parses and validates. Unknown keys are errors. Relative dataset paths
/// resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Loads or generates the dataset and splits it into train/val.
DataSplits load_dataset(const DatasetSpec& spec);

/// Copies the dataset's image geometry and class count into the plan.
void fit_plan_to_data(ChannelPlan& plan, const Dataset& data);

/// "# config_hash=...,seed=...,version=...\n" for CSV artifacts.
std::string csv_provenance(const RunConfig& cfg);

}  // namespace autospace
