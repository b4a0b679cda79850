// autospace command-line driver: evolve, search, train, madds, rank-test, speedup.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "autospace/canonical_json.hpp"
#include "autospace/config.hpp"
#include "autospace/evolution.hpp"
#include "autospace/io.hpp"
#include "autospace/search.hpp"
#include "autospace/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace autospace;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

// Malformed inputs named on the command line count as configuration errors.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json read_json(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": invalid JSON at byte offset " + std::to_string(e.byte));
  }
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, to_canonical_json(j)); }

json plan_to_json(const ChannelPlan& p) {
  return {{"image_channels", p.image_channels}, {"image_h", p.image_h}, {"image_w", p.image_w},
          {"stem_channels", p.stem_channels},   {"channels", p.channels}, {"strides", p.strides},
          {"classes", p.classes}};
}

ChannelPlan plan_from_json(const json& j) {
  ChannelPlan p;
  p.image_channels = j.at("image_channels").get<int>();
  p.image_h = j.at("image_h").get<int>();
  p.image_w = j.at("image_w").get<int>();
  p.stem_channels = j.at("stem_channels").get<int>();
  p.channels = j.at("channels").get<std::vector<int>>();
  p.strides = j.at("strides").get<std::vector<int>>();
  p.classes = j.at("classes").get<int>();
  p.validate();
  return p;
}

struct Loaded {
  RunConfig cfg;
  DataSplits data;
};

Loaded load(const std::string& config_path) {
  Loaded l{load_run_config(config_path), {}};
  l.data = load_dataset(l.cfg.dataset);
  fit_plan_to_data(l.cfg.evolution.plan, l.data.train);
  try {
    l.cfg.evolution.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return l;
}

fs::path prepare_out(const std::string& out) {
  fs::create_directories(out);
  return fs::path(out);
}

int cmd_evolve(const std::string& config, const std::string& out_dir) {
  Loaded l = load(config);
  const fs::path out = prepare_out(out_dir);
  EvolutionResult r = run_evolution(l.cfg.evolution, &l.data.train);
  r.space.config_hash = l.cfg.hash;
  write_json(out / "search_space.json", search_space_to_json(r.space));
  const std::string prov = csv_provenance(l.cfg);
  write_file_atomic(out / "trace.csv", loss_trace_csv(r.trace, prov));
  write_file_atomic(out / "generations.csv", generation_trace_csv(r.trace, prov));
  r.store.save(out / "weights.aswt");
  std::printf("generations=%d iterations=%d final_loss=%.6f\n", l.cfg.evolution.generations(),
              l.cfg.evolution.total_iterations, r.trace.losses.empty() ? 0.0 : r.trace.losses.back());
  return kOk;
}

int cmd_search(const std::string& space_path, const std::string& config, const std::string& algo,
               const std::string& weights, const std::string& out_dir) {
  Loaded l = load(config);
  SearchSpace space;
  try {
    space = search_space_from_json(read_json(space_path));
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  } catch (const GenomeParseError& e) {
    throw InputError(e.what());
  }
  if (static_cast<int>(space.layers.size()) != l.cfg.evolution.plan.layers()) {
    throw ConfigError("search space has " + std::to_string(space.layers.size()) + " layers, plan has " +
                      std::to_string(l.cfg.evolution.plan.layers()));
  }
  fs::path wpath = weights.empty() ? fs::path(space_path).parent_path() / "weights.aswt" : fs::path(weights);
  WeightStore store;
  if (fs::exists(wpath)) {
    store = WeightStore::load(wpath);
  } else if (!weights.empty()) {
    throw InputError("weights file " + wpath.string() + " not found");
  }
  SearchConfig sc = l.cfg.search;
  if (!algo.empty()) sc.algo = algo == "random" ? SearchAlgo::kRandom : SearchAlgo::kGradient;
  const fs::path out = prepare_out(out_dir);
  const ChannelPlan& plan = l.cfg.evolution.plan;
  SearchResult r = sc.algo == SearchAlgo::kGradient ? gradient_search(space, l.data, sc, plan, store)
                                                    : random_search(space, l.data, sc, plan, store);
  json arch = architecture_to_json(r.arch, plan, {l.cfg.hash, l.cfg.seed});
  arch["meta"]["plan"] = plan_to_json(plan);
  arch["meta"]["algo"] = sc.algo == SearchAlgo::kGradient ? "gradient" : "random";
  write_json(out / "architecture.json", arch);
  std::printf("total_madds=%llu\n", static_cast<unsigned long long>(total_madds(r.arch, plan)));
  return kOk;
}

int cmd_train(const std::string& arch_path, const std::string& config, const std::string& out_dir) {
  Loaded l = load(config);
  Architecture arch;
  try {
    arch = architecture_from_json(read_json(arch_path));
    arch.validate(l.cfg.evolution.plan);
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  } catch (const GenomeParseError& e) {
    throw InputError(e.what());
  }
  const fs::path out = prepare_out(out_dir);
  const FinalResult r = train_final(arch, l.data, l.cfg.evolution.plan, l.cfg.train);
  write_file_atomic(out / "metrics.csv", metrics_csv(r, csv_provenance(l.cfg)));
  std::printf("final_top1=%.6f\n", r.accuracy);
  return kOk;
}

LayerShape parse_shape(const std::string& s) {
  LayerShape shape;
  char x1 = 0, x2 = 0;
  std::istringstream in(s);
  if (!(in >> shape.c_in >> x1 >> shape.h >> x2 >> shape.w) || x1 != 'x' || x2 != 'x' || !in.eof()) {
    throw InputError("--shape expects CxHxW, got \"" + s + "\"");
  }
  shape.c_out = shape.c_in;
  try {
    shape.validate();
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  return shape;
}

int cmd_madds(const std::string& arch_path, const std::string& genome_path, const std::string& shape) {
  if (!arch_path.empty()) {
    const json j = read_json(arch_path);
    try {
      const Architecture arch = architecture_from_json(j);
      if (j.contains("meta") && j["meta"].contains("plan")) {
        std::printf("%llu\n", static_cast<unsigned long long>(total_madds(arch, plan_from_json(j["meta"]["plan"]))));
      } else {
        std::printf("%llu\n", j.at("total_madds").get<unsigned long long>());
      }
    } catch (const json::exception& e) {
      throw InputError(arch_path + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw InputError(e.what());
    } catch (const GenomeParseError& e) {
      throw InputError(e.what());
    }
    return kOk;
  }
  if (genome_path.empty() || shape.empty()) throw InputError("madds needs --arch, or --genome together with --shape");
  CellGenome g;
  try {
    g = genome_from_json(read_json(genome_path), genome_path);
  } catch (const GenomeParseError& e) {
    throw InputError(e.what());
  }
  std::printf("%llu\n", static_cast<unsigned long long>(madds(g, parse_shape(shape))));
  return kOk;
}

int cmd_rank_test(const std::string& config, const std::string& out_dir) {
  const RunConfig cfg = load_run_config(config);
  const DataSplits data = load_dataset(cfg.rank_dataset);
  const fs::path out = prepare_out(out_dir);
  const RankReport r = rank_test(data, cfg.rank_test);
  write_file_atomic(out / "rank_report.csv", rank_report_csv(r, csv_provenance(cfg)));
  if (!r.valid) {
    std::printf("invalid: standalone accuracies are not strictly increasing\n");
    return kRuntimeError;
  }
  std::printf("recovered=%d/%zu\n", r.recovered(), r.rows.size());
  return kOk;
}

int cmd_speedup(const std::string& config, int seeds, const std::string& out_dir) {
  Loaded l = load(config);
  const int n = seeds > 0 ? seeds : l.cfg.speedup_seeds;
  if (n < 3) throw ConfigError("--seeds must be at least 3");
  std::vector<std::uint64_t> list;
  for (int i = 0; i < n; ++i) list.push_back(l.cfg.seed + static_cast<std::uint64_t>(i));
  const fs::path out = prepare_out(out_dir);
  const SpeedupReport r = speedup_experiment(l.cfg.evolution, l.data.train, list);
  write_file_atomic(out / "speedup.csv", speedup_csv(r, csv_provenance(l.cfg)));
  std::printf("checkpoint=%d reference_wins=%d/%d\n", r.checkpoint_25, r.seeds_won_25, r.seeds);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"autospace: evolve cell search spaces and search architectures inside them"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  std::string config, out, space, algo, weights, arch, genome, shape;
  int seeds = 0;

  auto* evolve = app.add_subcommand("evolve", "run evolution and emit search_space.json");
  evolve->add_option("--config", config, "run config JSON")->required();
  evolve->add_option("--out", out, "output directory")->required();

  auto* search = app.add_subcommand("search", "search an architecture inside a search space");
  search->add_option("--space", space, "search_space.json")->required();
  search->add_option("--config", config, "run config JSON")->required();
  search->add_option("--algo", algo, "gradient or random")->check(CLI::IsMember({"gradient", "random"}));
  search->add_option("--weights", weights, "inherited weights (default: weights.aswt next to the space)");
  search->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a searched architecture from scratch");
  train->add_option("--arch", arch, "architecture.json")->required();
  train->add_option("--config", config, "run config JSON")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* madds_cmd = app.add_subcommand("madds", "print multiply-add counts");
  auto* arch_opt = madds_cmd->add_option("--arch", arch, "architecture.json");
  auto* genome_opt = madds_cmd->add_option("--genome", genome, "genome JSON");
  madds_cmd->add_option("--shape", shape, "CxHxW for --genome")->needs(genome_opt);
  arch_opt->excludes(genome_opt);

  auto* rank = app.add_subcommand("rank-test", "fitness ranking robustness test");
  rank->add_option("--config", config, "run config JSON")->required();
  rank->add_option("--out", out, "output directory")->required();

  auto* speedup = app.add_subcommand("speedup", "reference-genome convergence comparison");
  speedup->add_option("--config", config, "run config JSON")->required();
  speedup->add_option("--seeds", seeds, "number of paired seeds (>= 3)");
  speedup->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::CallForVersion& e) {
    std::cout << kToolVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kConfigError;
  }

  if (const char* threads = std::getenv("AUTOSPACE_THREADS"); threads != nullptr && std::string(threads) != "1") {
    std::cerr << "note: AUTOSPACE_THREADS=" << threads << " ignored; execution is single-threaded\n";
  }

  try {
    if (*evolve) return cmd_evolve(config, out);
    if (*search) return cmd_search(space, config, algo, weights, out);
    if (*train) return cmd_train(arch, config, out);
    if (*madds_cmd) return cmd_madds(arch, genome, shape);
    if (*rank) return cmd_rank_test(config, out);
    if (*speedup) return cmd_speedup(config, seeds, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DatasetError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}
