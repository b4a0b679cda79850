#include "autospace/evolution.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace autospace {

namespace {

enum Stream : std::uint64_t { kPopulationStream = 1, kInitStream = 2, kGateStream = 3, kDataStream = 4 };

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

CellGenome default_reference() {
  CellGenome g;
  g.edges = {Op::kConv1x1, Op::kDwConv3x3, Op::kConv1x1, Op::kZero, Op::kZero, Op::kZero};
  g.ratio = 6;
  g.agg = Aggregation::kAdd;
  return g;
}

double default_madds_max(const ChannelPlan& plan) {
  const CellGenome ref = default_reference();
  std::uint64_t worst = 0;
  for (int l = 0; l < plan.layers(); ++l) worst = std::max(worst, madds(ref, plan.layer_shape(l)));
  return 2.0 * static_cast<double>(worst);
}

void EvolutionConfig::validate() const {
  plan.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("evolution config: " + m); };
  if (k < 2) fail("K must be at least 2");
  if (population < k) fail("population must be at least K");
  if (tournament < 2 || tournament > population) fail("tournament size must be in [2, P]");
  if (offspring() > population - k) fail("n_offspring must be at most P - K");
  if (f < 1 || total_iterations < 1) fail("f and T must be positive");
  if (total_iterations % f != 0) fail("f must divide T");
  if (!(tau > 0.0 && tau <= 1.0)) fail("tau must be in (0, 1]");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) fail("epsilon must be in [0, 1]");
  if (alpha_lr < 0.0 || lr < 0.0) fail("learning rates must be non-negative");
  if (madds_max < 0.0) fail("madds_max must be positive");
  if (n_mut < 1 || n_mut > kGeneCount) fail("n_mut must be in [1, 8]");
  if (batch_size < 1) fail("batch size must be positive");
  if (reference) {
    if (reject_annihilating && annihilates(*reference)) fail("reference genome output is identically zero");
    for (int l = 0; l < plan.layers(); ++l) {
      if (static_cast<double>(madds(*reference, plan.layer_shape(l))) >= budget()) {
        fail("reference genome exceeds madds_max at layer " + std::to_string(l));
      }
    }
  }
}

bool reference_schedule(const EvolutionConfig& cfg, std::uint64_t iteration) {
  if (iteration >= static_cast<std::uint64_t>(cfg.total_iterations)) {
    throw std::out_of_range("reference_schedule: iteration " + std::to_string(iteration) + " outside [0, T)");
  }
  return 2 * iteration < static_cast<std::uint64_t>(cfg.total_iterations);
}

EvolutionResult run_evolution(const EvolutionConfig& cfg, const Dataset* train, const Scorer& scorer,
                              EvolutionTrace* partial) {
  cfg.validate();
  if (!scorer) {
    if (train == nullptr) throw std::invalid_argument("run_evolution: training data required");
    if (train->classes != cfg.plan.classes || train->channels() != cfg.plan.image_channels ||
        train->height() != cfg.plan.image_h || train->width() != cfg.plan.image_w) {
      throw std::invalid_argument("run_evolution: dataset does not match the channel plan");
    }
  }
  const ChannelPlan& plan = cfg.plan;
  const double budget = cfg.budget();
  Rng pop_rng(derive_seed(cfg.seed, kPopulationStream));
  Rng init_rng(derive_seed(cfg.seed, kInitStream));
  Rng gate_rng(derive_seed(cfg.seed, kGateStream));
  IdSource ids;

  const Admission admit = [&](int layer, const CellGenome& g) {
    return static_cast<double>(madds(g, plan.layer_shape(layer))) < budget &&
           !(cfg.reject_annihilating && annihilates(g));
  };
  const CellGenome* ref = cfg.reference ? &*cfg.reference : nullptr;

  EvolutionResult result{{}, {}, init_populations(plan.layers(), cfg.population, cfg.k, ref, pop_rng, ids, admit), {}};
  EvolutionTrace& trace = result.trace;
  auto& pops = result.populations;

  SgdState opt(cfg.momentum, cfg.weight_decay);
  std::optional<BatchIterator> batches;
  if (!scorer) batches.emplace(*train, cfg.batch_size, derive_seed(cfg.seed, kDataStream));
  const LrSchedule schedule{cfg.lr, 0, cfg.generations()};
  std::uint64_t iterations = 0;

  try {
    for (int gen = 0; gen < cfg.generations(); ++gen) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::uint64_t start = static_cast<std::uint64_t>(gen) * cfg.f;

      std::vector<std::vector<Member>> sampled;
      for (auto& pop : pops) sampled.push_back(tournament_select(pop, cfg.tournament, cfg.k, pop_rng));

      std::vector<std::vector<double>> alpha_star;
      if (scorer) {
        alpha_star = scorer(gen, sampled);
        if (alpha_star.size() != sampled.size()) throw std::logic_error("scorer returned the wrong layer count");
      } else {
        Supernet net = Supernet::assemble(sampled, plan, result.store, init_rng);
        net.gate_mode = cfg.gate_mode;
        net.iterations = iterations;
        TrainStepOptions opts;
        opts.steps = cfg.f;
        opts.lr = lr_at(schedule, gen);
        opts.alpha_lr = cfg.alpha_lr;
        opts.scale_alpha_grads = cfg.scale_alpha_grads;
        opts.precision = cfg.precision;
        const std::vector<double> losses = train_steps(net, *batches, opts, opt, gate_rng);
        trace.losses.insert(trace.losses.end(), losses.begin(), losses.end());
        iterations = net.iterations;
        for (const LayerAlphas& la : net.extract_alphas()) alpha_star.push_back(la.alpha);
        const auto live = net.extract_alphas();
        for (std::size_t l = 0; l < pops.size(); ++l) {
          for (std::size_t i = 0; i < live[l].ids.size(); ++i) {
            pops[l].get(live[l].ids[i]).participation = live[l].participation[i];
          }
        }
      }

      for (std::size_t l = 0; l < pops.size(); ++l) {
        if (alpha_star[l].size() != sampled[l].size()) throw std::logic_error("alpha* misaligned with the sample");
        for (std::size_t i = 0; i < sampled[l].size(); ++i) {
          writeback_fitness(pops[l], sampled[l][i].id(), alpha_star[l][i], cfg.epsilon);
        }
        double sum = 0.0, best = -std::numeric_limits<double>::infinity();
        for (const Member& m : pops[l].members()) {
          sum += m.fitness;
          best = std::max(best, m.fitness);
        }
        trace.generations.push_back(
            {gen, static_cast<int>(l), sum / static_cast<double>(pops[l].size()), best});
      }

      // The final generation's offspring would never be scored, so none are made.
      if (gen + 1 < cfg.generations()) {
        for (std::size_t l = 0; l < pops.size(); ++l) {
          // Winners refreshed after write-back so offspring inherit updated fitness.
          std::vector<Member> winners;
          for (const Member& m : sampled[l]) winners.push_back(pops[l].get(m.id()));
          MutationConstraints c;
          c.reference = ref;
          c.tau = cfg.tau;
          c.reference_active = ref != nullptr && cfg.reference_schedule && reference_schedule(cfg, start);
          c.madds_budget = budget;
          c.shape = plan.layer_shape(static_cast<int>(l));
          c.n_mut = cfg.n_mut;
          c.reject_annihilating = cfg.reject_annihilating;
          spawn_offspring(pops[l], winners, c, pop_rng, ids, cfg.offspring(), start + cfg.f);
        }
      }
      trace.generation_seconds.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
  } catch (...) {
    if (partial != nullptr) *partial = trace;
    throw;
  }

  result.space = make_search_space(pops, cfg.k);
  result.space.seed = cfg.seed;
  result.space.iterations = static_cast<std::uint64_t>(cfg.total_iterations);
  return result;
}

SpeedupReport speedup_experiment(const EvolutionConfig& cfg, const Dataset& train,
                                 const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 3) throw std::invalid_argument("speedup experiment needs at least 3 seeds");
  if (!cfg.reference) throw std::invalid_argument("speedup experiment needs a reference genome");
  const int T = cfg.total_iterations;
  const std::vector<int> checkpoints = {T / 4, T / 2, 3 * T / 4, T};
  // One generation is too noisy to compare; an eighth of the run ending at the checkpoint is not.
  const int window = std::max(cfg.f, T / 8);
  SpeedupReport report;
  report.checkpoint_25 = checkpoints[0];
  report.seeds = static_cast<int>(seeds.size());
  for (std::uint64_t seed : seeds) {
    double at25[2] = {0.0, 0.0};
    for (int arm = 1; arm >= 0; --arm) {
      EvolutionConfig c = cfg;
      c.seed = seed;
      c.reference_schedule = arm == 1;
      const EvolutionResult r = run_evolution(c, &train);
      for (std::size_t ci = 0; ci < checkpoints.size(); ++ci) {
        const int end = std::max(1, checkpoints[ci]);
        const int begin = std::max(0, end - window);
        const double mean = std::accumulate(r.trace.losses.begin() + begin, r.trace.losses.begin() + end, 0.0) /
                            static_cast<double>(end - begin);
        report.rows.push_back({seed, arm == 1, checkpoints[ci], mean});
        if (ci == 0) at25[arm] = mean;
      }
    }
    if (at25[1] < at25[0]) ++report.seeds_won_25;
  }
  return report;
}

std::string loss_trace_csv(const EvolutionTrace& trace, const std::string& header_comment) {
  std::ostringstream out;
  out << header_comment << "iteration,loss\n";
  for (std::size_t i = 0; i < trace.losses.size(); ++i) out << i << ',' << fmt(trace.losses[i]) << '\n';
  return out.str();
}

std::string generation_trace_csv(const EvolutionTrace& trace, const std::string& header_comment) {
  std::ostringstream out;
  out << header_comment << "generation,layer,mean_fitness,max_fitness\n";
  for (const GenerationStats& g : trace.generations) {
    out << g.generation << ',' << g.layer << ',' << fmt(g.mean_fitness) << ',' << fmt(g.max_fitness) << '\n';
  }
  return out.str();
}

std::string speedup_csv(const SpeedupReport& report, const std::string& header_comment) {
  std::ostringstream out;
  out << header_comment << "seed,arm,checkpoint,mean_loss\n";
  for (const SpeedupRow& r : report.rows) {
    out << r.seed << ',' << (r.reference ? "reference" : "no_reference") << ',' << r.checkpoint << ','
        << fmt(r.mean_loss) << '\n';
  }
  return out.str();
}

}  // namespace autospace
