#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "autospace/canonical_json.hpp"
#include "autospace/evolution.hpp"
#include "autospace/search.hpp"
#include "support.hpp"

using namespace autospace;

namespace {

ChannelPlan plan_for(int layers, int channels = 4, int classes = 3) {
  ChannelPlan plan;
  plan.image_channels = 2;
  plan.image_h = 8;
  plan.image_w = 8;
  plan.stem_channels = 4;
  plan.channels.assign(layers, channels);
  plan.strides.assign(layers, 1);
  plan.strides.back() = 2;
  plan.classes = classes;
  return plan;
}

DataSplits data_for(const ChannelPlan& plan, int per_class = 30, std::uint64_t seed = 5) {
  SynthSpec spec;
  spec.classes = plan.classes;
  spec.per_class = per_class;
  spec.channels = plan.image_channels;
  spec.height = plan.image_h;
  spec.width = plan.image_w;
  spec.seed = seed;
  return synth_dataset(spec);
}

SearchSpace random_space(int layers, int k, Rng& rng) {
  IdSource ids;
  SearchSpace space;
  for (int l = 0; l < layers; ++l) {
    std::vector<SpaceCell> cells;
    for (int i = 0; i < k; ++i) cells.push_back({random_genome(rng, ids), 0.0});
    space.layers.push_back(cells);
  }
  return space;
}

Batch first_batch(const Dataset& d, int n) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  return d.gather(idx);
}

}  // namespace

TEST_CASE("total_madds equals the brute-force oracle") {
  Rng rng(1);
  IdSource ids;
  std::uniform_int_distribution<int> ch(1, 8), dim(2, 8), layers(1, 3), coin(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    ChannelPlan plan;
    plan.image_channels = ch(rng);
    plan.image_h = dim(rng);
    plan.image_w = dim(rng);
    plan.stem_channels = ch(rng);
    plan.classes = 2 + trial % 5;
    plan.channels.clear();
    plan.strides.clear();
    int h = plan.stem_h(), w = plan.stem_w();
    Architecture arch;
    for (int l = 0, n = layers(rng); l < n; ++l) {
      plan.channels.push_back(ch(rng));
      const int s = (coin(rng) && h % 2 == 0 && w % 2 == 0) ? 2 : 1;
      plan.strides.push_back(s);
      h /= s;
      w /= s;
      arch.layers.push_back(random_genome(rng, ids));
    }
    CHECK(total_madds(arch, plan) == oracle::walk_network(arch.layers, plan));

    // The realized network's tape agrees for a single image.
    WeightStore store;
    std::vector<std::vector<Member>> sampled;
    for (const CellGenome& g : arch.layers) sampled.push_back({Member{g}});
    Supernet net = Supernet::assemble(sampled, plan, store, rng);
    Tape tape(Precision::kFloat64);
    net.forward_path(tape, oracle::random_tensor(Shape{1, plan.image_channels, plan.image_h, plan.image_w}, rng),
                     std::vector<int>(arch.layers.size(), 0), BnMode::kBatchStats);
    CHECK(tape.macs() == total_madds(arch, plan));
  }
}

TEST_CASE("total_madds examples") {
  const ChannelPlan plan = plan_for(3);
  Architecture zero;
  CellGenome g;
  g.edges.fill(Op::kZero);
  g.ratio = 1;
  zero.layers.assign(3, g);
  // stem + head + per layer (IN conv + OUT conv), counted by hand-written loops.
  std::uint64_t expected = oracle::walk_conv(2, 4, 3, 1, 4, 4) + 4 * 3;
  for (int l = 0; l < 3; ++l) {
    const int hw = l == 2 ? 2 : 4;
    expected += oracle::walk_conv(4, 4, 1, 1, hw, hw) * 2;
  }
  CHECK(total_madds(zero, plan) == expected);

  Rng rng(2);
  IdSource ids;
  for (int trial = 0; trial < 10; ++trial) {
    Architecture a;
    for (int l = 0; l < 3; ++l) a.layers.push_back(random_genome(rng, ids));
    ChannelPlan big = plan;
    big.image_h *= 2;
    big.image_w *= 2;
    const std::uint64_t head = head_madds(plan);
    CHECK(total_madds(a, big) - head == 4 * (total_madds(a, plan) - head));
  }
  Architecture short_arch = zero;
  short_arch.layers.pop_back();
  CHECK_THROWS(total_madds(short_arch, plan));
}

TEST_CASE("architecture JSON") {
  Rng rng(3);
  IdSource ids;
  const ChannelPlan plan = plan_for(2);
  Architecture a;
  a.layers = {random_genome(rng, ids), random_genome(rng, ids)};
  const nlohmann::json j = architecture_to_json(a, plan, {"abcd", 9});
  CHECK(j["version"] == 1);
  CHECK(j["total_madds"].get<std::uint64_t>() == total_madds(a, plan));
  CHECK(j["meta"]["seed"] == 9);
  CHECK(j["meta"]["config_hash"] == "abcd");
  const Architecture back = architecture_from_json(nlohmann::json::parse(to_canonical_json(j)));
  REQUIRE(back.layers.size() == 2);
  for (int l = 0; l < 2; ++l) CHECK(back.layers[l] == a.layers[l]);
  CHECK(to_canonical_json(architecture_to_json(back, plan, {"abcd", 9})) == to_canonical_json(j));
  nlohmann::json broken = j;
  broken.erase("layers");
  CHECK_THROWS(architecture_from_json(broken));
}

TEST_CASE("expected MAdds and the regularized loss") {
  Rng rng(4);
  const ChannelPlan plan = plan_for(2);
  const SearchSpace space = random_space(2, 3, rng);
  WeightStore store;
  Supernet net = build_subspace_supernet(space, plan, store, rng);
  for (MixedLayer& layer : net.layers()) std::fill(layer.alpha().begin(), layer.alpha().end(), 0.0);

  double mean = static_cast<double>(stem_madds(plan) + head_madds(plan));
  for (int l = 0; l < 2; ++l) {
    double s = 0.0;
    for (const SpaceCell& c : space.layers[l]) s += static_cast<double>(oracle::walk_cell(c.genome, plan.layer_shape(l)));
    mean += s / 3.0;
  }
  CHECK(expected_madds(net) == doctest::Approx(mean).epsilon(1e-12));

  const DataSplits data = data_for(plan);
  const Batch batch = first_batch(data.val, 8);
  std::normal_distribution<double> d;
  for (MixedLayer& layer : net.layers())
    for (double& b : layer.alpha()) b = d(rng);
  const RegularizedLoss base = regularized_loss(net, batch, 0.0, Precision::kFloat64, true);
  for (const auto& layer : base.regularizer_grads)
    for (double g : layer) CHECK(g == 0.0);
  for (double lambda : {1e-8, 1e-6, 3e-4}) {
    const RegularizedLoss r = regularized_loss(net, batch, lambda, Precision::kFloat64, false);
    CHECK(r.cross_entropy == base.cross_entropy);
    CHECK(std::abs((r.total - base.total) - lambda * r.expected_madds) <= 1e-9 * std::max(1.0, r.total));
  }

  // beta gradient of the penalty: finite differences of lambda * E[MAdds].
  const double lambda = 1e-5;
  const RegularizedLoss r = regularized_loss(net, batch, lambda, Precision::kFloat64, true);
  for (std::size_t l = 0; l < 2; ++l) {
    std::vector<double> numeric(3);
    for (int k = 0; k < 3; ++k) {
      double& b = net.layers()[l].alpha()[k];
      const double saved = b, h = 1e-6;
      b = saved + h;
      const double up = lambda * expected_madds(net);
      b = saved - h;
      const double down = lambda * expected_madds(net);
      b = saved;
      numeric[k] = (up - down) / (2 * h);
    }
    CHECK(oracle::rel_err(r.regularizer_grads[l], numeric) < 1e-6);
  }
  // Validation pass leaves no weight gradients behind.
  for (const Tensor& p : net.parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("gradient search: cost dominance, membership, determinism") {
  Rng rng(5);
  IdSource ids;
  const ChannelPlan plan = plan_for(2);
  const DataSplits data = data_for(plan);
  // Two cells per layer with the same edges, differing only in expansion ratio.
  SearchSpace space;
  for (int l = 0; l < 2; ++l) {
    CellGenome cheap = random_genome(rng, ids);
    cheap.edges[1] = Op::kConv3x3;
    cheap.ratio = 1;
    CellGenome dear = cheap;
    dear.ratio = 6;
    dear.id = ids.next();
    space.layers.push_back({{dear, 0.0}, {cheap, 0.0}});
  }
  SearchConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.lambda = 1e-3;
  WeightStore store;
  const SearchResult r = gradient_search(space, data, cfg, plan, store);
  for (int l = 0; l < 2; ++l) {
    CHECK(r.arch.layers[l].ratio == 1);
    CHECK(r.beta[l][1] > r.beta[l][0]);
  }

  cfg.lambda = 0.0;
  const SearchSpace rs = random_space(2, 3, rng);
  WeightStore s1, s2;
  const SearchResult a = gradient_search(rs, data, cfg, plan, s1);
  const SearchResult b = gradient_search(rs, data, cfg, plan, s2);
  CHECK(a.choice == b.choice);
  CHECK(a.beta == b.beta);
  for (int l = 0; l < 2; ++l) {
    const auto& cells = rs.layers[l];
    CHECK(std::any_of(cells.begin(), cells.end(), [&](const SpaceCell& c) { return c.genome == a.arch.layers[l]; }));
  }
}

TEST_CASE("random search") {
  Rng rng(6);
  const ChannelPlan plan = plan_for(2);
  const DataSplits data = data_for(plan);
  const SearchSpace space = random_space(2, 3, rng);
  SearchConfig cfg;
  cfg.algo = SearchAlgo::kRandom;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.candidates = 9;
  cfg.seed = 4;

  SUBCASE("exhaustive enumeration returns the exact argmax") {
    WeightStore store;
    const SearchResult r = random_search(space, data, cfg, plan, store);
    CHECK(r.evaluated.size() == 9);

    WeightStore store2;
    Rng init(derive_seed(cfg.seed, 1));
    Supernet net = build_subspace_supernet(space, plan, store2, init);
    train_one_shot(net, data.train, cfg);
    double best = -1.0;
    std::vector<int> arg;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        const std::vector<int> choice{a, b};
        const double acc = one_shot_accuracy(net, choice, data.val, cfg.batch_size, cfg.precision);
        if (acc > best) {
          best = acc;
          arg = choice;
        }
      }
    CHECK(r.choice == arg);
    for (const Candidate& c : r.evaluated) {
      CHECK(c.accuracy >= 0.0);
      CHECK(c.accuracy <= 1.0);
    }
  }
  SUBCASE("budget below every candidate is infeasible") {
    cfg.budget = 10.0;
    WeightStore store;
    try {
      random_search(space, data, cfg, plan, store);
      FAIL("expected BudgetInfeasible");
    } catch (const BudgetInfeasible& e) {
      CHECK(std::string(e.what()).find("minimum sampled MAdds") != std::string::npos);
    }
  }
  SUBCASE("budget filters candidates") {
    std::vector<std::uint64_t> costs;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        costs.push_back(total_madds(Architecture{{space.layers[0][a].genome, space.layers[1][b].genome}}, plan));
    std::sort(costs.begin(), costs.end());
    cfg.budget = static_cast<double>(costs[4]);
    WeightStore store;
    const SearchResult r = random_search(space, data, cfg, plan, store);
    CHECK(r.evaluated.size() == 4);
    for (const Candidate& c : r.evaluated) CHECK(static_cast<double>(c.madds) < cfg.budget);
  }
  SUBCASE("fixed seed gives the same architecture") {
    cfg.candidates = 5;
    WeightStore s1, s2;
    const SearchResult a = random_search(space, data, cfg, plan, s1);
    const SearchResult b = random_search(space, data, cfg, plan, s2);
    CHECK(a.choice == b.choice);
    REQUIRE(a.evaluated.size() == b.evaluated.size());
    for (std::size_t i = 0; i < a.evaluated.size(); ++i) CHECK(a.evaluated[i].accuracy == b.evaluated[i].accuracy);
  }
}

TEST_CASE("searchers beat the median of 20 random architectures") {
  Rng rng(7);
  const ChannelPlan plan = plan_for(3);
  const DataSplits data = data_for(plan, 40, 8);
  const SearchSpace space = random_space(3, 3, rng);
  SearchConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.seed = 2;
  cfg.lambda = 0.0;
  cfg.candidates = 27;

  WeightStore eval_store;
  Rng init(derive_seed(cfg.seed, 1));
  Supernet judge = build_subspace_supernet(space, plan, eval_store, init);
  train_one_shot(judge, data.train, cfg);
  Rng draw(99);
  std::uniform_int_distribution<int> pick(0, 2);
  std::vector<double> accs;
  for (int i = 0; i < 20; ++i) {
    const std::vector<int> c{pick(draw), pick(draw), pick(draw)};
    accs.push_back(one_shot_accuracy(judge, c, data.val, cfg.batch_size, cfg.precision));
  }
  std::sort(accs.begin(), accs.end());
  const double median = (accs[9] + accs[10]) / 2;

  WeightStore g_store;
  const SearchResult g = gradient_search(space, data, cfg, plan, g_store);
  CHECK(one_shot_accuracy(judge, g.choice, data.val, cfg.batch_size, cfg.precision) >= median);

  cfg.algo = SearchAlgo::kRandom;
  WeightStore r_store;
  const SearchResult r = random_search(space, data, cfg, plan, r_store);
  CHECK(one_shot_accuracy(judge, r.choice, data.val, cfg.batch_size, cfg.precision) >= median);
}

TEST_CASE("train_final") {
  const ChannelPlan plan = plan_for(2, 8, 4);
  SynthSpec spec;
  spec.classes = 4;
  spec.per_class = 100;
  spec.channels = 2;
  spec.height = 8;
  spec.width = 8;
  spec.seed = 21;
  const DataSplits data = synth_dataset(spec);
  Rng rng(8);
  IdSource ids;
  Architecture arch;
  arch.layers = {default_reference(), default_reference()};

  FinalTrainConfig cfg;
  cfg.batch_size = 16;
  cfg.seed = 1;

  SUBCASE("untrained net is at chance") {
    cfg.epochs = 0;
    const FinalResult r = train_final(arch, data, plan, cfg);
    const double n = data.val.size(), p = 0.25;
    CHECK(std::abs(r.accuracy - p) <= 3 * std::sqrt(p * (1 - p) / n));
    CHECK(r.epochs.empty());
  }
  SUBCASE("separable data is learned") {
    const FinalResult r = train_final(arch, data, plan, cfg);
    CHECK(r.epochs.size() == 10);
    CHECK(r.accuracy > 0.95);
    for (const EpochMetrics& m : r.epochs) {
      CHECK(m.val_accuracy >= 0.0);
      CHECK(m.val_accuracy <= 1.0);
    }
    for (const EpochMetrics& m : r.epochs) CHECK(m.lr == doctest::Approx(lr_at({cfg.lr, 1, 10}, m.epoch)));
    CHECK(r.epochs.back().lr < r.epochs.front().lr);
    const std::string csv = metrics_csv(r, "# h\n");
    CHECK(csv.rfind("# h\nepoch,lr,train_loss,val_accuracy\n", 0) == 0);
  }
  SUBCASE("random architectures stay in [0, 1]") {
    cfg.epochs = 1;
    for (int i = 0; i < 3; ++i) {
      Architecture a{{random_genome(rng, ids), random_genome(rng, ids)}};
      const double acc = train_final(a, data, plan, cfg).accuracy;
      CHECK(acc >= 0.0);
      CHECK(acc <= 1.0);
    }
  }
}

TEST_CASE("top1") {
  const Tensor logits = Tensor::from(Shape{3, 2}, {0.1, 0.9, 2.0, -1.0, 0.0, 0.5});
  CHECK(top1(logits, std::vector<int>{1, 0, 0}) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(top1(logits, std::vector<int>{1}), ShapeError);
}
