#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "autospace/dataset.hpp"
#include "autospace/supernet.hpp"
#include "support.hpp"

using namespace autospace;

namespace {

ChannelPlan tiny_plan(int layers = 2) {
  ChannelPlan plan;
  plan.image_channels = 2;
  plan.image_h = 8;
  plan.image_w = 8;
  plan.stem_channels = 4;
  plan.channels.assign(layers, 4);
  plan.strides.assign(layers, 1);
  if (layers > 1) plan.strides[1] = 2;
  plan.classes = 3;
  return plan;
}

std::vector<Member> sample(int k, Rng& rng, IdSource& ids, double fitness_std = 0.5) {
  std::normal_distribution<double> d(0.0, fitness_std);
  std::vector<Member> out;
  for (int i = 0; i < k; ++i) {
    Member m;
    m.genome = random_genome(rng, ids);
    m.fitness = d(rng);
    out.push_back(m);
  }
  return out;
}

std::vector<std::vector<Member>> sample_all(const ChannelPlan& plan, int k, Rng& rng, IdSource& ids) {
  std::vector<std::vector<Member>> out;
  for (int l = 0; l < plan.layers(); ++l) out.push_back(sample(k, rng, ids));
  return out;
}

Tensor input_for(const ChannelPlan& plan, int n, Rng& rng) {
  return oracle::random_tensor(Shape{n, plan.image_channels, plan.image_h, plan.image_w}, rng);
}

std::vector<double> copy_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// Replays a fixed list of batches forever.
class FixedBatches : public BatchSource {
 public:
  explicit FixedBatches(std::vector<Batch> batches) : batches_(std::move(batches)) {}
  Batch next() override { return batches_[i_++ % batches_.size()]; }

 private:
  std::vector<Batch> batches_;
  std::size_t i_ = 0;
};

}  // namespace

TEST_CASE("softmax is a probability vector") {
  Rng rng(1);
  std::normal_distribution<double> d(0.0, 10.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(1 + trial % 7);
    for (double& v : a) v = d(rng);
    const auto p = softmax(a);
    double s = 0.0;
    for (double v : p) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  const auto huge = softmax(std::vector<double>{1000.0, 1000.0});
  CHECK(huge[0] == doctest::Approx(0.5));
}

TEST_CASE("alpha_grad examples and properties") {
  const auto g = alpha_grad(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0}, std::vector<double>{1.0, 1.0});
  CHECK(g[0] == doctest::Approx(0.25));
  CHECK(g[1] == doctest::Approx(-0.25));

  Rng rng(2);
  std::normal_distribution<double> d;
  std::uniform_real_distribution<double> sc(1.0, 20.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + trial % 5;
    std::vector<double> a(k), gg(k), ones(k, 1.0), scale(k);
    for (int i = 0; i < k; ++i) {
      a[i] = d(rng);
      gg[i] = d(rng);
      scale[i] = sc(rng);
    }
    const auto p = softmax(a);
    const double c = d(rng);
    const auto flat = alpha_grad(p, std::vector<double>(k, c), ones);
    for (double v : flat) CHECK(std::abs(v) < 1e-12);

    const auto raw = alpha_grad(p, gg, ones);
    const auto scaled = alpha_grad(p, gg, scale);
    for (int i = 0; i < k; ++i) {
      CHECK(scaled[i] == doctest::Approx(raw[i] * scale[i]).epsilon(1e-12));
      CHECK((scaled[i] > 0) == (raw[i] > 0));
      // Explicit Jacobian sum: sum_k gg_k p_k (delta_ik - p_i).
      double jac = 0.0;
      for (int j = 0; j < k; ++j) jac += gg[j] * p[j] * ((i == j ? 1.0 : 0.0) - p[i]);
      CHECK(raw[i] == doctest::Approx(jac).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(alpha_grad(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, std::vector<double>{1.0}),
                  std::invalid_argument);
}

TEST_CASE("MixedLayer scaling uses n/n' and treats n'=0 as 1") {
  Rng rng(3);
  IdSource ids;
  const ChannelPlan plan = tiny_plan(1);
  WeightStore store;
  std::vector<std::vector<Member>> s{sample(3, rng, ids)};
  s[0][0].participation = 0;
  s[0][1].participation = 4;
  s[0][2].participation = 10;
  Supernet net = Supernet::assemble(s, plan, store, rng);
  const MixedLayer& layer = net.layers()[0];
  const std::vector<double> gg{0.3, -1.2, 0.8};
  const auto raw = alpha_grad(layer.probabilities(), gg, std::vector<double>(3, 1.0));
  const auto scaled = layer.alpha_grad(gg, 20);
  CHECK(scaled[0] == doctest::Approx(raw[0]));
  CHECK(scaled[1] == doctest::Approx(raw[1] * 5.0));
  CHECK(scaled[2] == doctest::Approx(raw[2] * 2.0));
}

TEST_CASE("assemble") {
  Rng rng(4);
  IdSource ids;
  const ChannelPlan plan = tiny_plan(2);
  WeightStore store;
  auto s = sample_all(plan, 3, rng, ids);

  Supernet net = Supernet::assemble(s, plan, store, rng);
  REQUIRE(net.layers().size() == 2);
  const auto alphas = net.extract_alphas();
  for (int l = 0; l < 2; ++l) {
    CHECK(net.layers()[l].k() == 3);
    for (int k = 0; k < 3; ++k) {
      CHECK(alphas[l].alpha[k] == s[l][k].fitness);
      CHECK(alphas[l].ids[k] == s[l][k].id());
    }
  }
  for (const std::string& key : store.keys()) {
    const bool known = key.rfind("stem/", 0) == 0 || key.rfind("head/", 0) == 0 ||
                       (key[0] == 'L' && key.find("/G") != std::string::npos);
    CHECK_MESSAGE(known, key);
  }

  SUBCASE("rebuild with identical samples binds the identical tensors") {
    const auto before = net.parameters();
    Supernet again = Supernet::assemble(s, plan, store, rng);
    const auto after = again.parameters();
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].same(after[i]));
  }
  SUBCASE("a genome absent for one regeneration keeps its trained weights") {
    const std::string key = "L0/G" + std::to_string(s[0][0].id()) + "/in.conv.w";
    store.at(key).data()[0] = 123.0;  // stands in for an update during run 1
    auto other = sample_all(plan, 3, rng, ids);
    const std::size_t keys_before = store.size();
    Supernet run2 = Supernet::assemble(other, plan, store, rng);
    CHECK(store.size() > keys_before);
    Supernet run3 = Supernet::assemble(s, plan, store, rng);
    CHECK(store.at(key).data()[0] == 123.0);
  }
  SUBCASE("stored keys never shrink across regenerations") {
    std::set<std::string> prev;
    for (int round = 0; round < 5; ++round) {
      Supernet::assemble(sample_all(plan, 3, rng, ids), plan, store, rng);
      const auto keys = store.keys();
      std::set<std::string> now(keys.begin(), keys.end());
      CHECK(std::includes(now.begin(), now.end(), prev.begin(), prev.end()));
      prev = now;
    }
  }
  SUBCASE("inconsistent inputs rejected") {
    auto ragged = s;
    ragged[1].pop_back();
    CHECK_THROWS_AS(Supernet::assemble(ragged, plan, store, rng), std::invalid_argument);
    auto short_list = s;
    short_list.pop_back();
    CHECK_THROWS_AS(Supernet::assemble(short_list, plan, store, rng), std::invalid_argument);
    ChannelPlan bad = plan;
    bad.strides = {1};
    CHECK_THROWS(Supernet::assemble(s, bad, store, rng));
    Tape tape(Precision::kFloat64);
    CHECK_THROWS_AS(net.forward(tape, Tensor::zeros(Shape{1, 3, 8, 8}), BnMode::kBatchStats), ShapeError);
  }
}

TEST_CASE("mixture forward") {
  Rng rng(5);
  IdSource ids;
  const ChannelPlan plan = tiny_plan(1);
  const LayerShape shape = plan.layer_shape(0);
  const Tensor x = oracle::random_tensor(Shape{2, shape.c_in, shape.h, shape.w}, rng);

  SUBCASE("K = 1 equals the single cell") {
    WeightStore store;
    auto s = sample(1, rng, ids);
    Supernet net = Supernet::assemble({s}, plan, store, rng);
    MixedLayer& layer = net.layers()[0];
    Tape tape(Precision::kFloat64);
    const auto mixed = copy_of(layer.forward(tape, x, BnMode::kBatchStats, GateMode::kFullSum, nullptr));
    const auto single = copy_of(layer.cells()[0].forward(tape, x, BnMode::kBatchStats));
    CHECK(mixed == single);
  }
  SUBCASE("equal alphas give the plain average") {
    WeightStore store;
    auto s = sample(4, rng, ids);
    for (Member& m : s) m.fitness = 0.7;
    Supernet net = Supernet::assemble({s}, plan, store, rng);
    MixedLayer& layer = net.layers()[0];
    Tape tape(Precision::kFloat64);
    const auto mixed = copy_of(layer.forward(tape, x, BnMode::kBatchStats, GateMode::kFullSum, nullptr));
    std::vector<double> avg(mixed.size(), 0.0);
    for (const Cell& c : layer.cells()) {
      const auto out = copy_of(c.forward(tape, x, BnMode::kBatchStats));
      for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += out[i] / 4.0;
    }
    CHECK(oracle::rel_err(mixed, avg) < 1e-12);
  }
  SUBCASE("matches a manual mixture to 1e-6") {
    for (int trial = 0; trial < 10; ++trial) {
      WeightStore store;
      auto s = sample(2 + trial % 4, rng, ids, 2.0);
      Supernet net = Supernet::assemble({s}, plan, store, rng);
      MixedLayer& layer = net.layers()[0];
      Tape tape(Precision::kFloat64);
      const auto mixed = copy_of(layer.forward(tape, x, BnMode::kBatchStats, GateMode::kFullSum, nullptr));
      // Independent weights: exp(a - max) / sum.
      const double amax = std::max_element(s.begin(), s.end(), [](auto& a, auto& b) { return a.fitness < b.fitness; })->fitness;
      double z = 0.0;
      for (const Member& m : s) z += std::exp(m.fitness - amax);
      std::vector<double> manual(mixed.size(), 0.0);
      for (std::size_t k = 0; k < s.size(); ++k) {
        const double p = std::exp(s[k].fitness - amax) / z;
        const auto out = copy_of(layer.cells()[k].forward(tape, x, BnMode::kBatchStats));
        for (std::size_t i = 0; i < manual.size(); ++i) manual[i] += p * out[i];
      }
      double worst = 0.0;
      for (std::size_t i = 0; i < manual.size(); ++i) worst = std::max(worst, std::abs(manual[i] - mixed[i]));
      CHECK(worst < 1e-6);
    }
  }
  SUBCASE("constant cell outputs mix to the same constant") {
    WeightStore store;
    auto s = sample(4, rng, ids, 3.0);
    for (Member& m : s) {
      m.genome.edges.fill(Op::kZero);
    }
    Supernet net = Supernet::assemble({s}, plan, store, rng);
    const double c = -1.75;
    for (const Member& m : s) {
      Tensor beta = store.at("L0/G" + std::to_string(m.id()) + "/out.bn.beta");
      for (double& v : beta.data()) v = c;
    }
    MixedLayer& layer = net.layers()[0];
    Tape tape(Precision::kFloat64);
    for (int rep = 0; rep < 3; ++rep) {
      for (double& a : layer.alpha()) a = std::normal_distribution<double>(0, 3)(rng);
      const auto out = copy_of(layer.forward(tape, x, BnMode::kBatchStats, GateMode::kFullSum, nullptr));
      for (double v : out) CHECK(v == doctest::Approx(c).epsilon(1e-12));
    }
  }
}

TEST_CASE("binary gate average matches the full sum") {
  Rng rng(6);
  IdSource ids;
  const ChannelPlan plan = tiny_plan(1);
  WeightStore store;
  Supernet net = Supernet::assemble({sample(3, rng, ids, 1.0)}, plan, store, rng);
  const Tensor x = input_for(plan, 2, rng);

  std::vector<double> full;
  {
    Tape tape(Precision::kFloat64);
    full = copy_of(net.forward(tape, x, BnMode::kBatchStats));
  }
  net.gate_mode = GateMode::kBinaryGate;
  // Cache per-path logits; each sampled forward is then exact for its path.
  constexpr int kSamples = 10000;
  std::vector<double> sum(full.size(), 0.0), sq(full.size(), 0.0);
  Rng gate(7);
  std::map<int, std::vector<double>> cache;
  for (int i = 0; i < kSamples; ++i) {
    std::vector<double> logits;
    if (i < 200) {
      Tape tape(Precision::kFloat64);
      logits = copy_of(net.forward(tape, x, BnMode::kBatchStats, &gate));
      cache[net.layers()[0].active_paths().at(0)] = logits;
    } else {
      // Same sampling law as the layer: discrete over softmax(alpha).
      std::discrete_distribution<int> pick(net.layers()[0].last_probabilities().begin(),
                                           net.layers()[0].last_probabilities().end());
      const int k = pick(gate);
      if (!cache.contains(k)) {
        Tape tape(Precision::kFloat64);
        cache[k] = copy_of(net.forward_path(tape, x, std::vector<int>{k}, BnMode::kBatchStats));
      }
      logits = cache[k];
    }
    for (std::size_t j = 0; j < logits.size(); ++j) {
      sum[j] += logits[j];
      sq[j] += logits[j] * logits[j];
    }
  }
  for (std::size_t j = 0; j < full.size(); ++j) {
    const double mean = sum[j] / kSamples;
    const double var = sq[j] / kSamples - mean * mean;
    const double se = std::sqrt(std::max(var, 0.0) / kSamples);
    CHECK(std::abs(mean - full[j]) <= 3 * se + 1e-12);
  }
  // Sampled forwards produced exactly one active path each time.
  Tape tape(Precision::kFloat64);
  net.forward(tape, x, BnMode::kBatchStats, &gate);
  CHECK(net.layers()[0].active_paths().size() == 1);
  net.gate_mode = GateMode::kBinaryGate;
  Tape t2(Precision::kFloat64);
  CHECK_THROWS_AS(net.forward(t2, x, BnMode::kBatchStats, nullptr), std::invalid_argument);
}

TEST_CASE("alpha gradient equals finite differences of the loss") {
  Rng rng(8);
  IdSource ids;
  const ChannelPlan plan = tiny_plan(2);
  WeightStore store;
  Supernet net = Supernet::assemble(sample_all(plan, 3, rng, ids), plan, store, rng);
  const Tensor x = input_for(plan, 3, rng);
  const std::vector<int> labels{0, 2, 1};
  auto loss_at = [&]() {
    Tape tape(Precision::kFloat64);
    return tape.softmax_cross_entropy(net.forward(tape, x, BnMode::kBatchStats), labels).item();
  };
  Tape tape(Precision::kFloat64);
  tape.backward(tape.softmax_cross_entropy(net.forward(tape, x, BnMode::kBatchStats), labels));
  // Collect analytic gradients first: later forwards replace the gate tensors.
  std::vector<std::vector<double>> analytic;
  for (const MixedLayer& layer : net.layers()) {
    analytic.push_back(
        alpha_grad(layer.last_probabilities(), layer.gate_grads(), std::vector<double>(layer.k(), 1.0)));
  }
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    MixedLayer& layer = net.layers()[l];
    std::vector<double> numeric(layer.k());
    const double h = 1e-5;
    for (int i = 0; i < layer.k(); ++i) {
      const double saved = layer.alpha()[i];
      layer.alpha()[i] = saved + h;
      const double up = loss_at();
      layer.alpha()[i] = saved - h;
      const double down = loss_at();
      layer.alpha()[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    CHECK(oracle::rel_err(analytic[l], numeric) < 1e-4);
  }
}

TEST_CASE("train_steps") {
  Rng rng(9);
  IdSource ids;
  SynthSpec spec;
  spec.classes = 3;
  spec.per_class = 40;
  spec.channels = 2;
  spec.height = 8;
  spec.width = 8;
  spec.seed = 11;
  const DataSplits data = synth_dataset(spec);
  const ChannelPlan plan = tiny_plan(2);

  SUBCASE("full sum: counters advance by f, loss decreases") {
    WeightStore store;
    Supernet net = Supernet::assemble(sample_all(plan, 3, rng, ids), plan, store, rng);
    BatchIterator it(data.train, 16, 1);
    SgdState opt(0.9, 1e-4);
    TrainStepOptions o;
    o.steps = 80;
    o.lr = 0.05;
    o.alpha_lr = 0.01;
    Rng gate(1);
    const auto losses = train_steps(net, it, o, opt, gate);
    REQUIRE(losses.size() == 80);
    for (const MixedLayer& layer : net.layers())
      for (auto p : layer.participation()) CHECK(p == 80);
    CHECK(net.iterations == 80);
    const double first = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10;
    const double last = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10;
    CHECK(last < first);
  }
  SUBCASE("binary gate: one participation per iteration per layer") {
    WeightStore store;
    Supernet net = Supernet::assemble(sample_all(plan, 3, rng, ids), plan, store, rng);
    net.gate_mode = GateMode::kBinaryGate;
    BatchIterator it(data.train, 16, 1);
    SgdState opt;
    TrainStepOptions o;
    o.steps = 12;
    Rng gate(2);
    train_steps(net, it, o, opt, gate);
    for (const MixedLayer& layer : net.layers()) {
      std::uint64_t total = 0;
      for (auto p : layer.participation()) total += p;
      CHECK(total == 12);
    }
  }
  SUBCASE("alpha_lr = 0 freezes alphas; write-back at eps = 1 reproduces them") {
    WeightStore store;
    auto s = sample_all(plan, 3, rng, ids);
    Supernet net = Supernet::assemble(s, plan, store, rng);
    const auto before = net.extract_alphas();
    BatchIterator it(data.train, 16, 1);
    SgdState opt;
    TrainStepOptions o;
    o.steps = 5;
    o.alpha_lr = 0.0;
    Rng gate(3);
    train_steps(net, it, o, opt, gate);
    const auto after = net.extract_alphas();
    for (int l = 0; l < 2; ++l) CHECK(after[l].alpha == before[l].alpha);

    for (auto& a : net.layers()[0].alpha()) a += 0.5;
    LayerPopulation pop(0, s[0]);
    const auto live = net.extract_alphas()[0];
    for (int k = 0; k < 3; ++k) writeback_fitness(pop, live.ids[k], live.alpha[k], 1.0);
    for (int k = 0; k < 3; ++k) CHECK(pop.get(live.ids[k]).fitness == live.alpha[k]);
  }
  SUBCASE("alphas move and stay finite with scaling on") {
    WeightStore store;
    Supernet net = Supernet::assemble(sample_all(plan, 3, rng, ids), plan, store, rng);
    net.gate_mode = GateMode::kBinaryGate;
    BatchIterator it(data.train, 16, 2);
    SgdState opt;
    TrainStepOptions o;
    o.steps = 10;
    o.alpha_lr = 0.1;
    const auto before = net.extract_alphas();
    Rng gate(4);
    train_steps(net, it, o, opt, gate);
    const auto after = net.extract_alphas();
    bool moved = false;
    for (int l = 0; l < 2; ++l)
      for (int k = 0; k < 3; ++k) {
        CHECK(std::isfinite(after[l].alpha[k]));
        moved = moved || after[l].alpha[k] != before[l].alpha[k];
      }
    CHECK(moved);
  }
  SUBCASE("steps = 0 rejected") {
    WeightStore store;
    Supernet net = Supernet::assemble(sample_all(plan, 3, rng, ids), plan, store, rng);
    BatchIterator it(data.train, 16, 1);
    SgdState opt;
    TrainStepOptions o;
    o.steps = 0;
    Rng gate(5);
    CHECK_THROWS_AS(train_steps(net, it, o, opt, gate), std::invalid_argument);
  }
  SUBCASE("divergence reports the iteration") {
    WeightStore store;
    Supernet net = Supernet::assemble(sample_all(plan, 3, rng, ids), plan, store, rng);
    Batch bad = data.train.gather(std::vector<int>{0, 1, 2, 3});
    bad.images.data()[0] = std::numeric_limits<double>::infinity();
    FixedBatches src({bad});
    SgdState opt;
    TrainStepOptions o;
    o.steps = 3;
    Rng gate(6);
    try {
      train_steps(net, src, o, opt, gate);
      FAIL("expected NumericDivergence");
    } catch (const NumericDivergence& e) {
      CHECK(std::string(e.what()).find("iteration") != std::string::npos);
    }
  }
}

TEST_CASE("realized cell MACs equal the closed-form count") {
  Rng rng(10);
  IdSource ids;
  for (int trial = 0; trial < 30; ++trial) {
    const CellGenome g = random_genome(rng, ids);
    const LayerShape s{3, 5, 6, 6, trial % 2 ? 2 : 1};
    WeightStore store;
    Cell cell(g, s, store, "c", rng);
    Tape tape(Precision::kFloat64);
    cell.forward(tape, oracle::random_tensor(Shape{1, s.c_in, s.h, s.w}, rng), BnMode::kBatchStats);
    CAPTURE(g.str());
    CHECK(tape.macs() == madds(g, s));
  }
}

TEST_CASE("annihilating cells ignore their input") {
  Rng rng(11);
  IdSource ids;
  const LayerShape s{3, 4, 5, 5, 1};
  int dead = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const CellGenome g = random_genome(rng, ids);
    WeightStore store;
    Cell cell(g, s, store, "c", rng);
    Tape tape(Precision::kFloat64);
    const Tensor a = cell.forward(tape, oracle::random_tensor(Shape{2, s.c_in, s.h, s.w}, rng), BnMode::kBatchStats);
    const Tensor b = cell.forward(tape, oracle::random_tensor(Shape{2, s.c_in, s.h, s.w}, rng), BnMode::kBatchStats);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
    CAPTURE(g.str());
    CHECK(annihilates(g) == (diff == 0.0));
    dead += annihilates(g);
  }
  CHECK(dead > 0);
  CHECK(dead < 200);
}
