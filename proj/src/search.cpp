#include "autospace/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "autospace/version.hpp"

namespace autospace {

using json = nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<double> ones(std::size_t n) { return std::vector<double>(n, 1.0); }

void clear_grads(std::vector<Tensor> params) {
  for (Tensor& p : params) p.clear_grad();
}

}  // namespace

void Architecture::validate(const ChannelPlan& plan) const {
  if (static_cast<int>(layers.size()) != plan.layers()) {
    throw std::invalid_argument("architecture has " + std::to_string(layers.size()) + " layers, plan has " +
                                std::to_string(plan.layers()));
  }
}

std::uint64_t total_madds(const Architecture& arch, const ChannelPlan& plan) {
  arch.validate(plan);
  std::uint64_t total = stem_madds(plan) + head_madds(plan);
  for (int l = 0; l < plan.layers(); ++l) total += madds(arch.layers[l], plan.layer_shape(l));
  return total;
}

json architecture_to_json(const Architecture& arch, const ChannelPlan& plan, const ArtifactMeta& meta) {
  json layers = json::array();
  for (const CellGenome& g : arch.layers) layers.push_back(genome_to_json(g));
  return json{{"version", 1},
              {"layers", layers},
              {"total_madds", total_madds(arch, plan)},
              {"meta",
               {{"config_hash", meta.config_hash}, {"seed", meta.seed}, {"tool_version", std::string(kToolVersion)}}}};
}

Architecture architecture_from_json(const json& j) {
  if (!j.is_object() || j.value("version", 0) != 1) throw GenomeParseError("architecture: expected version 1", 0);
  if (!j.contains("layers") || !j["layers"].is_array() || j["layers"].empty()) {
    throw GenomeParseError("architecture: missing \"layers\"", 0);
  }
  Architecture arch;
  for (const json& g : j["layers"]) {
    arch.layers.push_back(genome_from_json(g, "architecture layer " + std::to_string(arch.layers.size())));
  }
  return arch;
}

void SearchConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("search config: " + m); };
  if (!(lambda >= 0.0)) fail("lambda must be non-negative");
  if (!(budget > 0.0)) fail("budget must be positive");
  if (epochs < 1) fail("epochs must be at least 1");
  if (candidates < 1) fail("candidate count must be positive");
  if (batch_size < 1) fail("batch size must be positive");
  if (lr < 0.0 || beta_lr < 0.0) fail("learning rates must be non-negative");
}

Supernet build_subspace_supernet(const SearchSpace& space, const ChannelPlan& plan, WeightStore& store,
                                 Rng& init_rng) {
  space.validate();
  GenomeId next = 1;
  for (const auto& layer : space.layers) {
    for (const SpaceCell& c : layer) next = std::max(next, c.genome.id + 1);
  }
  std::vector<std::vector<Member>> sampled;
  for (const auto& layer : space.layers) {
    std::vector<Member> members;
    std::set<GenomeId> seen;
    for (const SpaceCell& c : layer) {
      Member m;
      m.genome = c.genome;
      // Cells without a usable id get fresh ones (and therefore fresh weights).
      if (m.genome.id == 0 || seen.contains(m.genome.id)) m.genome.id = next++;
      seen.insert(m.genome.id);
      members.push_back(m);
    }
    sampled.push_back(std::move(members));
  }
  return Supernet::assemble(sampled, plan, store, init_rng);
}

std::vector<std::vector<double>> path_madds(const Supernet& net) {
  std::vector<std::vector<double>> out;
  for (const MixedLayer& layer : net.layers()) {
    std::vector<double> m;
    for (const Cell& c : layer.cells()) m.push_back(static_cast<double>(madds(c.genome(), c.shape())));
    out.push_back(std::move(m));
  }
  return out;
}

double expected_madds(const Supernet& net) {
  double total = static_cast<double>(stem_madds(net.plan()) + head_madds(net.plan()));
  const auto m = path_madds(net);
  for (std::size_t l = 0; l < m.size(); ++l) {
    const std::vector<double> p = net.layers()[l].probabilities();
    for (std::size_t k = 0; k < p.size(); ++k) total += p[k] * m[l][k];
  }
  return total;
}

RegularizedLoss regularized_loss(Supernet& net, const Batch& batch, double lambda, Precision precision,
                                 bool with_grads) {
  const GateMode saved = net.gate_mode;
  net.gate_mode = GateMode::kFullSum;
  Tape tape(precision);
  Tensor logits = net.forward(tape, batch.images, BnMode::kBatchStats);
  net.gate_mode = saved;
  Tensor ce = tape.softmax_cross_entropy(logits, batch.labels);

  RegularizedLoss r;
  r.cross_entropy = ce.item();
  r.expected_madds = expected_madds(net);
  r.total = r.cross_entropy + lambda * r.expected_madds;
  if (with_grads) {
    tape.backward(ce);
    const auto m = path_madds(net);
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      const MixedLayer& layer = net.layers()[l];
      const std::vector<double>& p = layer.last_probabilities();
      std::vector<double> cost(p.size());
      for (std::size_t k = 0; k < p.size(); ++k) cost[k] = lambda * m[l][k];
      std::vector<double> gg = layer.gate_grads();
      for (std::size_t k = 0; k < p.size(); ++k) gg[k] += cost[k];
      r.beta_grads.push_back(alpha_grad(p, gg, ones(p.size())));
      r.regularizer_grads.push_back(alpha_grad(p, cost, ones(p.size())));
    }
    // Weight gradients from the validation pass must not leak into the next weight step.
    clear_grads(net.parameters());
  }
  return r;
}

std::vector<int> argmax_choice(const Supernet& net) {
  std::vector<int> choice;
  for (const MixedLayer& layer : net.layers()) {
    const auto& a = layer.alpha();
    choice.push_back(static_cast<int>(std::max_element(a.begin(), a.end()) - a.begin()));
  }
  return choice;
}

Architecture architecture_of(const Supernet& net, std::span<const int> choice) {
  Architecture arch;
  for (std::size_t l = 0; l < net.layers().size(); ++l) arch.layers.push_back(net.layers()[l].cells()[choice[l]].genome());
  return arch;
}

SearchResult gradient_search(const SearchSpace& space, const DataSplits& data, const SearchConfig& cfg,
                             const ChannelPlan& plan, WeightStore& store) {
  cfg.validate();
  Rng init_rng(derive_seed(cfg.seed, 1));
  Supernet net = build_subspace_supernet(space, plan, store, init_rng);
  for (MixedLayer& layer : net.layers()) std::fill(layer.alpha().begin(), layer.alpha().end(), 0.0);
  net.gate_mode = GateMode::kFullSum;

  BatchIterator train(data.train, cfg.batch_size, derive_seed(cfg.seed, 2));
  BatchIterator val(data.val, cfg.batch_size, derive_seed(cfg.seed, 3));
  SgdState opt(cfg.momentum, cfg.weight_decay);
  const LrSchedule schedule{cfg.lr, 0, cfg.epochs};
  const int per_epoch = std::max(1, train.batches_per_epoch());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    for (int b = 0; b < per_epoch; ++b) {
      {
        Batch batch = train.next();
        Tape tape(cfg.precision);
        Tensor logits = net.forward(tape, batch.images, BnMode::kTrain);
        tape.backward(tape.softmax_cross_entropy(logits, batch.labels));
        std::vector<Tensor> params = net.parameters();
        sgd_step(params, opt, lr);
      }
      const RegularizedLoss r = regularized_loss(net, val.next(), cfg.lambda, cfg.precision, true);
      for (std::size_t l = 0; l < net.layers().size(); ++l) {
        auto& beta = net.layers()[l].alpha();
        for (std::size_t k = 0; k < beta.size(); ++k) beta[k] -= cfg.beta_lr * r.beta_grads[l][k];
      }
    }
  }
  SearchResult result;
  result.choice = argmax_choice(net);
  result.arch = architecture_of(net, result.choice);
  for (const MixedLayer& layer : net.layers()) result.beta.push_back(layer.alpha());
  return result;
}

void train_one_shot(Supernet& net, const Dataset& train, const SearchConfig& cfg) {
  for (MixedLayer& layer : net.layers()) std::fill(layer.alpha().begin(), layer.alpha().end(), 0.0);
  net.gate_mode = GateMode::kBinaryGate;
  BatchIterator batches(train, cfg.batch_size, derive_seed(cfg.seed, 2));
  Rng gate_rng(derive_seed(cfg.seed, 4));
  SgdState opt(cfg.momentum, cfg.weight_decay);
  const LrSchedule schedule{cfg.lr, 0, cfg.epochs};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    TrainStepOptions o;
    o.steps = std::max(1, batches.batches_per_epoch());
    o.lr = lr_at(schedule, epoch);
    o.alpha_lr = 0.0;
    o.precision = cfg.precision;
    train_steps(net, batches, o, opt, gate_rng);
  }
}

double top1(const Tensor& logits, std::span<const int> labels) {
  const int n = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("top1: label count mismatch");
  if (n == 0) return 0.0;
  auto d = logits.data();
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const double* row = d.data() + static_cast<std::size_t>(i) * c;
    correct += static_cast<int>(std::max_element(row, row + c) - row) == labels[i];
  }
  return static_cast<double>(correct) / n;
}

double one_shot_accuracy(Supernet& net, std::span<const int> choice, const Dataset& val, int batch_size,
                         Precision precision) {
  double correct = 0.0;
  for (const Batch& b : sequential_batches(val, batch_size)) {
    Tape tape(precision);
    correct += top1(net.forward_path(tape, b.images, choice, BnMode::kBatchStats), b.labels) * b.labels.size();
  }
  return correct / val.size();
}

SearchResult evaluate_candidates(Supernet& net, const Dataset& val, const SearchConfig& cfg) {
  const int L = static_cast<int>(net.layers().size());
  const int K = net.layers().front().k();
  double space_size = std::pow(static_cast<double>(K), L);
  const bool exhaustive = static_cast<double>(cfg.candidates) >= space_size;
  const std::uint64_t count = exhaustive ? static_cast<std::uint64_t>(space_size) : cfg.candidates;
  Rng rng(derive_seed(cfg.seed, 5));
  std::uniform_int_distribution<int> pick(0, K - 1);

  SearchResult result;
  std::uint64_t min_madds = std::numeric_limits<std::uint64_t>::max();
  int best = -1;
  std::vector<int> choice(L);
  for (std::uint64_t i = 0; i < count; ++i) {
    if (exhaustive) {
      std::uint64_t rest = i;
      for (int l = L - 1; l >= 0; --l) {
        choice[l] = static_cast<int>(rest % K);
        rest /= K;
      }
    } else {
      for (int& c : choice) c = pick(rng);
    }
    const std::uint64_t cost = total_madds(architecture_of(net, choice), net.plan());
    min_madds = std::min(min_madds, cost);
    if (static_cast<double>(cost) >= cfg.budget) continue;
    Candidate cand{choice, cost, one_shot_accuracy(net, choice, val, cfg.batch_size, cfg.precision)};
    if (best < 0 || cand.accuracy > result.evaluated[best].accuracy) best = static_cast<int>(result.evaluated.size());
    result.evaluated.push_back(std::move(cand));
  }
  if (best < 0) {
    throw BudgetInfeasible("budget infeasible: no sampled architecture under " + fmt(cfg.budget) +
                           " MAdds; minimum sampled MAdds " + std::to_string(min_madds));
  }
  result.choice = result.evaluated[best].choice;
  result.arch = architecture_of(net, result.choice);
  return result;
}

SearchResult random_search(const SearchSpace& space, const DataSplits& data, const SearchConfig& cfg,
                           const ChannelPlan& plan, WeightStore& store) {
  cfg.validate();
  Rng init_rng(derive_seed(cfg.seed, 1));
  Supernet net = build_subspace_supernet(space, plan, store, init_rng);
  train_one_shot(net, data.train, cfg);
  return evaluate_candidates(net, data.val, cfg);
}

namespace {

double eval_accuracy(Supernet& net, std::span<const int> choice, const Dataset& val, int batch_size,
                     Precision precision) {
  double correct = 0.0;
  for (const Batch& b : sequential_batches(val, batch_size)) {
    Tape tape(precision);
    correct += top1(net.forward_path(tape, b.images, choice, BnMode::kEval), b.labels) * b.labels.size();
  }
  return correct / val.size();
}

}  // namespace

FinalResult train_final(const Architecture& arch, const DataSplits& data, const ChannelPlan& plan,
                        const FinalTrainConfig& cfg) {
  arch.validate(plan);
  if (cfg.epochs < 0) throw std::invalid_argument("train_final: negative epoch count");
  WeightStore store;
  Rng init_rng(derive_seed(cfg.seed, 1));
  std::vector<std::vector<Member>> sampled;
  for (const CellGenome& g : arch.layers) {
    Member m;
    m.genome = g;
    m.genome.id = 1;
    sampled.push_back({m});
  }
  Supernet net = Supernet::assemble(sampled, plan, store, init_rng);
  const std::vector<int> choice(arch.layers.size(), 0);

  FinalResult result;
  BatchIterator batches(data.train, cfg.batch_size, derive_seed(cfg.seed, 2));
  SgdState opt(cfg.momentum, cfg.weight_decay);
  const LrSchedule schedule{cfg.lr, std::min(cfg.warmup_epochs, cfg.epochs), std::max(1, cfg.epochs)};
  const int per_epoch = std::max(1, batches.batches_per_epoch());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    double loss_sum = 0.0;
    for (int b = 0; b < per_epoch; ++b) {
      Batch batch = batches.next();
      Tape tape(cfg.precision);
      Tensor loss = tape.softmax_cross_entropy(net.forward_path(tape, batch.images, choice, BnMode::kTrain), batch.labels);
      tape.backward(loss);
      std::vector<Tensor> params = net.parameters();
      sgd_step(params, opt, lr);
      loss_sum += loss.item();
    }
    const double acc = eval_accuracy(net, choice, data.val, cfg.batch_size, cfg.precision);
    result.epochs.push_back({epoch, lr, loss_sum / per_epoch, acc});
  }
  result.accuracy = result.epochs.empty() ? eval_accuracy(net, choice, data.val, cfg.batch_size, cfg.precision)
                                          : result.epochs.back().val_accuracy;
  return result;
}

PlainNet::PlainNet(const PlainNetSpec& spec, int in_channels, int classes, WeightStore& store,
                   const std::string& prefix, Rng& init_rng) {
  if (spec.depth < 1 || spec.width < 1) throw std::invalid_argument("plain net needs positive depth and width");
  int c = in_channels;
  for (int i = 0; i < spec.depth; ++i) {
    convs_.emplace_back(store, prefix + "/c" + std::to_string(i), c, spec.width, 3, Conv2dAttrs{.stride = 1, .padding = 1},
                        true, init_rng);
    c = spec.width;
  }
  head_ = Dense(store, prefix + "/fc", c, classes, init_rng);
}

Tensor PlainNet::forward(Tape& tape, const Tensor& x, BnMode mode) const {
  Tensor h = x;
  for (const ConvBlock& b : convs_) h = b.forward(tape, h, mode);
  return head_.forward(tape, tape.global_avg_pool(h));
}

std::vector<Tensor> PlainNet::parameters() const {
  std::vector<Tensor> p;
  for (const ConvBlock& b : convs_) b.collect(p);
  head_.collect(p);
  return p;
}

int RankReport::recovered() const {
  return static_cast<int>(std::count_if(rows.begin(), rows.end(), [](const RankRow& r) { return r.rank_epoch > 0; }));
}

double standalone_accuracy(const PlainNetSpec& spec, const DataSplits& data, const RankTestConfig& cfg,
                           std::uint64_t seed) {
  WeightStore store;
  Rng init_rng(derive_seed(seed, 11));
  PlainNet net(spec, data.train.channels(), data.train.classes, store, "net", init_rng);
  BatchIterator batches(data.train, cfg.batch_size, derive_seed(seed, 12));
  SgdState opt;
  const LrSchedule schedule{cfg.lr, 0, cfg.standalone_epochs};
  for (int epoch = 0; epoch < cfg.standalone_epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    for (int b = 0; b < std::max(1, batches.batches_per_epoch()); ++b) {
      Batch batch = batches.next();
      Tape tape(cfg.precision);
      tape.backward(tape.softmax_cross_entropy(net.forward(tape, batch.images, BnMode::kTrain), batch.labels));
      std::vector<Tensor> params = net.parameters();
      sgd_step(params, opt, lr);
    }
  }
  double correct = 0.0;
  for (const Batch& b : sequential_batches(data.val, cfg.batch_size)) {
    Tape tape(cfg.precision);
    correct += top1(net.forward(tape, b.images, BnMode::kEval), b.labels) * b.labels.size();
  }
  return correct / data.val.size();
}

RankReport rank_test(const DataSplits& data, const RankTestConfig& cfg) {
  if (cfg.nets.size() < 2 || cfg.max_epochs < 1 || cfg.seeds.empty()) {
    throw std::invalid_argument("rank test needs at least two nets, one epoch and one seed");
  }
  RankReport report;
  for (const PlainNetSpec& spec : cfg.nets) report.standalone_accuracy.push_back(standalone_accuracy(spec, data, cfg, cfg.data_seed));
  report.valid = true;
  for (std::size_t i = 1; i < cfg.nets.size(); ++i) {
    report.valid = report.valid && report.standalone_accuracy[i] > report.standalone_accuracy[i - 1];
  }
  if (!report.valid) return report;

  const std::size_t k = cfg.nets.size();
  for (std::uint64_t seed : cfg.seeds) {
    WeightStore store;
    Rng init_rng(derive_seed(seed, 1));
    std::vector<PlainNet> nets;
    for (std::size_t i = 0; i < k; ++i) {
      nets.emplace_back(cfg.nets[i], data.train.channels(), data.train.classes, store, "net" + std::to_string(i), init_rng);
    }
    RankRow row;
    row.seed = seed;
    Rng alpha_rng(derive_seed(seed, 2));
    std::normal_distribution<double> init(0.0, cfg.alpha_init_std);
    for (std::size_t i = 0; i < k; ++i) row.alpha_init.push_back(init(alpha_rng));
    std::vector<double> alpha = row.alpha_init;

    std::vector<Tensor> params;
    for (const PlainNet& n : nets) {
      auto p = n.parameters();
      params.insert(params.end(), p.begin(), p.end());
    }
    BatchIterator batches(data.train, cfg.batch_size, derive_seed(seed, 3));
    SgdState opt;
    const LrSchedule schedule{cfg.lr, 0, cfg.max_epochs};
    std::vector<bool> ordered;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
      const double lr = lr_at(schedule, epoch);
      for (int b = 0; b < std::max(1, batches.batches_per_epoch()); ++b) {
        Batch batch = batches.next();
        Tape tape(cfg.precision);
        const std::vector<double> p = softmax(alpha);
        std::vector<Tensor> gates;
        Tensor out;
        for (std::size_t i = 0; i < k; ++i) {
          gates.push_back(Tensor::scalar(p[i], true));
          Tensor term = tape.scale(nets[i].forward(tape, batch.images, BnMode::kTrain), gates[i]);
          out = out.defined() ? tape.add(out, term) : term;
        }
        tape.backward(tape.softmax_cross_entropy(out, batch.labels));
        std::vector<double> gg(k);
        for (std::size_t i = 0; i < k; ++i) gg[i] = gates[i].grad()[0];
        // Every path runs every iteration, so n/n' is 1.
        const std::vector<double> g = alpha_grad(p, gg, ones(k));
        for (std::size_t i = 0; i < k; ++i) alpha[i] -= cfg.alpha_lr * g[i];
        sgd_step(params, opt, lr);
      }
      bool ok = true;
      for (std::size_t i = 1; i < k; ++i) ok = ok && alpha[i] > alpha[i - 1];
      ordered.push_back(ok);
    }
    for (int e = cfg.max_epochs; e >= 1 && ordered[e - 1]; --e) row.rank_epoch = e;
    row.alpha_final = alpha;
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string rank_report_csv(const RankReport& report, const std::string& header_comment) {
  std::ostringstream out;
  out << header_comment;
  out << "# standalone_accuracy=";
  for (std::size_t i = 0; i < report.standalone_accuracy.size(); ++i) {
    out << (i ? ";" : "") << fmt(report.standalone_accuracy[i]);
  }
  out << ",valid=" << (report.valid ? "true" : "false") << '\n';
  out << "seed";
  const std::size_t k = report.standalone_accuracy.size();
  for (std::size_t i = 0; i < k; ++i) out << ",alpha" << i + 1;
  out << ",rank_epoch\n";
  for (const RankRow& r : report.rows) {
    out << r.seed;
    for (double a : r.alpha_init) out << ',' << fmt(a);
    out << ',' << r.rank_epoch << '\n';
  }
  return out.str();
}

std::string metrics_csv(const FinalResult& result, const std::string& header_comment) {
  std::ostringstream out;
  out << header_comment << "epoch,lr,train_loss,val_accuracy\n";
  for (const EpochMetrics& m : result.epochs) {
    out << m.epoch << ',' << fmt(m.lr) << ',' << fmt(m.train_loss) << ',' << fmt(m.val_accuracy) << '\n';
  }
  return out.str();
}

}  // namespace autospace
