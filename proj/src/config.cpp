#include "autospace/config.hpp"

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "autospace/canonical_json.hpp"
#include "autospace/io.hpp"
#include "autospace/version.hpp"

namespace autospace {

using json = nlohmann::json;

namespace {

// Reads one JSON object, rejecting wrongly typed values and unknown keys.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }

  void read(const std::string& key, int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    out = v.get<int>();
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      fail(key, "expected a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }
  void read(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) fail(key, "expected a number");
    out = v.get<double>();
    if (!std::isfinite(out)) fail(key, "must be finite");
  }
  void read(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    out = v.get<bool>();
  }
  void read(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) fail(key, "expected a string");
    out = v.get<std::string>();
  }
  void read(const std::string& key, std::vector<int>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) fail(key, "expected an array of integers");
    out.clear();
    for (const json& e : v) {
      if (!e.is_number_integer()) fail(key, "expected an array of integers");
      out.push_back(e.get<int>());
    }
  }

  const json& at(const std::string& key) const { return j_.at(key); }
  std::string path(const std::string& key) const { return where_ + "." + key; }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(where_ + "." + key + ": " + msg);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.contains(key)) throw ConfigError(where_ + ": unknown key \"" + key + "\"");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

Precision parse_precision(const std::string& s) {
  if (s == "float32") return Precision::kFloat32;
  if (s == "float64") return Precision::kFloat64;
  throw ConfigError("precision: expected \"float32\" or \"float64\", got \"" + s + "\"");
}

DatasetSpec parse_dataset(const json& j, const std::string& where, std::uint64_t seed,
                          const std::filesystem::path& base_dir) {
  DatasetSpec d;
  d.synth.seed = seed;
  d.split_seed = seed;
  Section s(j, where);
  s.read("kind", d.kind);
  if (d.kind == "synthetic") {
    std::string pattern = "blobs";
    s.read("pattern", pattern);
    if (pattern == "blobs") {
      d.synth.pattern = SynthPattern::kBlobs;
    } else if (pattern == "pairs") {
      d.synth.pattern = SynthPattern::kPairs;
    } else {
      s.fail("pattern", "expected \"blobs\" or \"pairs\"");
    }
    s.read("classes", d.synth.classes);
    s.read("per_class", d.synth.per_class);
    s.read("channels", d.synth.channels);
    s.read("height", d.synth.height);
    s.read("width", d.synth.width);
    s.read("seed", d.synth.seed);
    if (d.synth.classes < 2) s.fail("classes", "must be at least 2");
    if (d.synth.per_class < 5) s.fail("per_class", "must be at least 5");
    if (d.synth.channels < 1 || d.synth.height < 1 || d.synth.width < 1) s.fail("channels", "image dims must be positive");
    if (d.synth.pattern == SynthPattern::kPairs && (d.synth.classes != 2 || d.synth.width < 19)) {
      s.fail("pattern", "pairs needs classes = 2 and width >= 19");
    }
  } else if (d.kind == "idx") {
    s.read("images", d.images);
    s.read("labels", d.labels);
    if (d.images.empty() || d.labels.empty()) throw ConfigError(where + ": idx needs \"images\" and \"labels\"");
    d.images = (base_dir / d.images).string();
    d.labels = (base_dir / d.labels).string();
  } else if (d.kind == "cifar") {
    if (s.has("files")) {
      const json& f = s.at("files");
      if (!f.is_array() || f.empty()) s.fail("files", "expected a non-empty array of paths");
      for (const json& p : f) {
        if (!p.is_string()) s.fail("files", "expected a non-empty array of paths");
        d.files.push_back((base_dir / p.get<std::string>()).string());
      }
    }
    if (d.files.empty()) throw ConfigError(where + ": cifar needs \"files\"");
  } else {
    s.fail("kind", "expected \"synthetic\", \"idx\" or \"cifar\"");
  }
  if (d.kind != "synthetic") {
    s.read("train_fraction", d.train_fraction);
    s.read("split_seed", d.split_seed);
    if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0)) s.fail("train_fraction", "must be in (0, 1)");
  }
  s.finish();
  return d;
}

void plan_from_spec(ChannelPlan& plan, const DatasetSpec& d) {
  if (d.kind == "synthetic") {
    plan.image_channels = d.synth.channels;
    plan.image_h = d.synth.height;
    plan.image_w = d.synth.width;
    plan.classes = d.synth.classes;
  } else if (d.kind == "cifar") {
    plan.image_channels = 3;
    plan.image_h = plan.image_w = 32;
    plan.classes = 10;
  }
}

void parse_plan(const json& j, ChannelPlan& plan) {
  Section s(j, "plan");
  s.read("stem_channels", plan.stem_channels);
  s.read("channels", plan.channels);
  s.read("strides", plan.strides);
  s.finish();
}

void parse_evolution(const json& j, EvolutionConfig& e) {
  Section s(j, "evolution");
  s.read("k", e.k);
  s.read("population", e.population);
  s.read("tournament", e.tournament);
  s.read("n_offspring", e.n_offspring);
  s.read("f", e.f);
  s.read("total_iterations", e.total_iterations);
  s.read("tau", e.tau);
  s.read("epsilon", e.epsilon);
  s.read("alpha_lr", e.alpha_lr);
  s.read("lr", e.lr);
  s.read("momentum", e.momentum);
  s.read("weight_decay", e.weight_decay);
  s.read("madds_max", e.madds_max);
  s.read("n_mut", e.n_mut);
  s.read("batch_size", e.batch_size);
  s.read("scale_alpha_grads", e.scale_alpha_grads);
  s.read("reference_schedule", e.reference_schedule);
  s.read("reject_annihilating", e.reject_annihilating);
  if (s.has("reference")) {
    const json& r = s.at("reference");
    if (r.is_null()) {
      e.reference.reset();
    } else {
      try {
        e.reference = genome_from_json(r, "evolution.reference");
      } catch (const std::exception& ex) {
        throw ConfigError(ex.what());
      }
    }
  }
  std::string gate = "full_sum";
  s.read("gate_mode", gate);
  if (gate == "full_sum") {
    e.gate_mode = GateMode::kFullSum;
  } else if (gate == "binary_gate") {
    e.gate_mode = GateMode::kBinaryGate;
  } else {
    s.fail("gate_mode", "expected \"full_sum\" or \"binary_gate\"");
  }
  s.finish();
}

void parse_search(const json& j, SearchConfig& c) {
  Section s(j, "search");
  s.read("lambda", c.lambda);
  if (s.has("budget")) {
    const json& b = s.at("budget");
    if (b.is_null()) {
      c.budget = std::numeric_limits<double>::infinity();
    } else {
      s.read("budget", c.budget);
    }
  }
  std::string algo = "gradient";
  s.read("algo", algo);
  if (algo == "gradient") {
    c.algo = SearchAlgo::kGradient;
  } else if (algo == "random") {
    c.algo = SearchAlgo::kRandom;
  } else {
    s.fail("algo", "expected \"gradient\" or \"random\"");
  }
  s.read("epochs", c.epochs);
  s.read("candidates", c.candidates);
  s.read("batch_size", c.batch_size);
  s.read("lr", c.lr);
  s.read("momentum", c.momentum);
  s.read("weight_decay", c.weight_decay);
  s.read("beta_lr", c.beta_lr);
  s.finish();
}

void parse_train(const json& j, FinalTrainConfig& t) {
  Section s(j, "train");
  s.read("epochs", t.epochs);
  s.read("warmup_epochs", t.warmup_epochs);
  s.read("lr", t.lr);
  s.read("momentum", t.momentum);
  s.read("weight_decay", t.weight_decay);
  s.read("batch_size", t.batch_size);
  s.finish();
  if (t.epochs < 0 || t.warmup_epochs < 0) throw ConfigError("train: epochs must be non-negative");
  if (t.batch_size < 1) throw ConfigError("train.batch_size: must be positive");
  if (!(t.lr > 0.0)) throw ConfigError("train.lr: must be positive");
}

void parse_rank_test(const json& j, RunConfig& cfg, const std::filesystem::path& base_dir) {
  Section s(j, "rank_test");
  RankTestConfig& r = cfg.rank_test;
  if (s.has("nets")) {
    const json& nets = s.at("nets");
    if (!nets.is_array()) s.fail("nets", "expected an array");
    r.nets.clear();
    for (const json& n : nets) {
      Section ns(n, "rank_test.nets[" + std::to_string(r.nets.size()) + "]");
      PlainNetSpec spec;
      ns.read("depth", spec.depth);
      ns.read("width", spec.width);
      ns.finish();
      if (spec.depth < 1 || spec.width < 1) throw ConfigError("rank_test.nets: depth and width must be positive");
      r.nets.push_back(spec);
    }
    if (r.nets.size() < 2) s.fail("nets", "needs at least two nets");
  }
  if (s.has("seeds")) {
    const json& seeds = s.at("seeds");
    if (!seeds.is_array() || seeds.empty()) s.fail("seeds", "expected a non-empty array");
    r.seeds.clear();
    for (const json& v : seeds) {
      if (!v.is_number_unsigned()) s.fail("seeds", "expected non-negative integers");
      r.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  s.read("standalone_epochs", r.standalone_epochs);
  s.read("max_epochs", r.max_epochs);
  s.read("batch_size", r.batch_size);
  s.read("lr", r.lr);
  s.read("alpha_lr", r.alpha_lr);
  s.read("alpha_init_std", r.alpha_init_std);
  s.read("data_seed", r.data_seed);
  if (s.has("dataset")) cfg.rank_dataset = parse_dataset(s.at("dataset"), "rank_test.dataset", cfg.seed, base_dir);
  s.finish();
  if (r.max_epochs < 1 || r.standalone_epochs < 1 || r.batch_size < 1) {
    throw ConfigError("rank_test: epochs and batch size must be positive");
  }
}

}  // namespace

RunConfig parse_run_config(const json& j, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  Section s(j, "config");
  s.read("seed", cfg.seed);
  std::string precision = "float32";
  s.read("precision", precision);
  cfg.precision = parse_precision(precision);

  cfg.dataset.synth.seed = cfg.seed;
  cfg.dataset.split_seed = cfg.seed;
  if (s.has("dataset")) cfg.dataset = parse_dataset(s.at("dataset"), "dataset", cfg.seed, base_dir);
  cfg.rank_dataset.synth = {.classes = 2, .per_class = 300, .channels = 1, .height = 8, .width = 20,
                            .seed = cfg.seed, .pattern = SynthPattern::kPairs};
  if (s.has("plan")) parse_plan(s.at("plan"), cfg.evolution.plan);
  if (s.has("evolution")) parse_evolution(s.at("evolution"), cfg.evolution);
  if (s.has("search")) parse_search(s.at("search"), cfg.search);
  if (s.has("train")) parse_train(s.at("train"), cfg.train);
  if (s.has("rank_test")) parse_rank_test(s.at("rank_test"), cfg, base_dir);
  s.read("speedup_seeds", cfg.speedup_seeds);
  s.finish();

  cfg.evolution.seed = cfg.search.seed = cfg.train.seed = cfg.seed;
  cfg.evolution.precision = cfg.search.precision = cfg.train.precision = cfg.rank_test.precision = cfg.precision;
  if (cfg.rank_test.data_seed == 0) cfg.rank_test.data_seed = cfg.seed;
  plan_from_spec(cfg.evolution.plan, cfg.dataset);
  if (cfg.speedup_seeds < 3) throw ConfigError("speedup_seeds: must be at least 3");

  try {
    cfg.search.validate();
    if (cfg.dataset.kind != "idx") cfg.evolution.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  cfg.hash = content_hash(to_canonical_json(j, false));
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON at byte offset " + std::to_string(e.byte));
  }
  return parse_run_config(j, path.parent_path());
}

DataSplits load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "synthetic") return synth_dataset(spec.synth);
  if (spec.kind == "idx") return split_dataset(load_idx(spec.images, spec.labels), spec.train_fraction, spec.split_seed);
  std::vector<std::filesystem::path> paths(spec.files.begin(), spec.files.end());
  return split_dataset(load_cifar_binary(paths), spec.train_fraction, spec.split_seed);
}

void fit_plan_to_data(ChannelPlan& plan, const Dataset& data) {
  plan.image_channels = data.channels();
  plan.image_h = data.height();
  plan.image_w = data.width();
  plan.classes = data.classes;
}

std::string csv_provenance(const RunConfig& cfg) {
  return "# config_hash=" + cfg.hash + ",seed=" + std::to_string(cfg.seed) + ",version=" + std::string(kToolVersion) +
         "\n";
}

}  // namespace autospace
