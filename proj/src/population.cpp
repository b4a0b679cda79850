#include "autospace/population.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "autospace/version.hpp"

namespace autospace {

using nlohmann::json;

bool ranks_before(const Member& a, const Member& b) {
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  return a.id() < b.id();
}

LayerPopulation::LayerPopulation(int layer, std::vector<Member> members) : layer_(layer), members_(std::move(members)) {
  for (std::size_t i = 0; i < members_.size(); ++i) {
    for (std::size_t j = i + 1; j < members_.size(); ++j) {
      if (members_[i].id() == members_[j].id()) {
        throw std::invalid_argument("population: duplicate genome id " + std::to_string(members_[i].id()));
      }
    }
  }
}

const Member& LayerPopulation::get(GenomeId id) const {
  auto it = std::find_if(members_.begin(), members_.end(), [id](const Member& m) { return m.id() == id; });
  if (it == members_.end()) {
    throw std::out_of_range("layer " + std::to_string(layer_) + " has no genome id " + std::to_string(id));
  }
  return *it;
}

Member& LayerPopulation::get(GenomeId id) {
  return const_cast<Member&>(static_cast<const LayerPopulation&>(*this).get(id));
}

bool LayerPopulation::contains(GenomeId id) const {
  return std::any_of(members_.begin(), members_.end(), [id](const Member& m) { return m.id() == id; });
}

std::vector<LayerPopulation> init_populations(int layers, int population, int k, const CellGenome* reference,
                                              Rng& rng, IdSource& ids, const Admission& admit) {
  if (k < 2 || population < k) {
    throw std::invalid_argument("init_populations: need P >= K >= 2 (P=" + std::to_string(population) +
                                ", K=" + std::to_string(k) + ")");
  }
  if (layers < 1) throw std::invalid_argument("init_populations: need at least one layer");
  constexpr int kMaxDraws = 10000;
  std::vector<LayerPopulation> pops;
  for (int l = 0; l < layers; ++l) {
    std::vector<Member> members;
    if (reference != nullptr) {
      if (admit && !admit(l, *reference)) {
        throw InfeasibleMutation("reference genome violates the MAdds budget at layer " + std::to_string(l));
      }
      Member m;
      m.genome = *reference;
      m.genome.id = ids.next();
      members.push_back(m);
    }
    while (static_cast<int>(members.size()) < population) {
      int draws = 0;
      for (;;) {
        IdSource scratch(0);
        CellGenome g = random_genome(rng, scratch);
        if (!admit || admit(l, g)) {
          g.id = ids.next();
          members.push_back(Member{g});
          break;
        }
        if (++draws >= kMaxDraws) {
          throw InfeasibleMutation("no random genome satisfied the MAdds budget at layer " + std::to_string(l));
        }
      }
    }
    pops.emplace_back(l, std::move(members));
  }
  return pops;
}

std::vector<Member> tournament_select(const LayerPopulation& pop, int tournament, int k, Rng& rng) {
  const int p = static_cast<int>(pop.size());
  if (tournament < 2 || tournament > p || k < 1 || k > p) {
    throw std::invalid_argument("tournament_select: need 2 <= t <= P and 1 <= K <= P (t=" +
                                std::to_string(tournament) + ", K=" + std::to_string(k) +
                                ", P=" + std::to_string(p) + ")");
  }
  std::vector<int> open(static_cast<std::size_t>(p));
  std::iota(open.begin(), open.end(), 0);
  std::vector<Member> winners;
  for (int round = 0; round < k; ++round) {
    const int draw = std::min<int>(tournament, static_cast<int>(open.size()));
    // Partial Fisher-Yates over the open slots; draw order is preserved.
    for (int i = 0; i < draw; ++i) {
      const int j = std::uniform_int_distribution<int>(i, static_cast<int>(open.size()) - 1)(rng);
      std::swap(open[i], open[j]);
    }
    int best = 0;
    for (int i = 1; i < draw; ++i) {
      if (pop.members()[open[i]].fitness > pop.members()[open[best]].fitness) best = i;
    }
    winners.push_back(pop.members()[open[best]]);
    open.erase(open.begin() + best);
  }
  return winners;
}

void spawn_offspring(LayerPopulation& pop, std::span<const Member> winners, const MutationConstraints& constraints,
                     Rng& rng, IdSource& ids, int n_offspring, std::uint64_t born_at) {
  if (n_offspring == 0) return;
  if (winners.empty()) throw std::invalid_argument("spawn_offspring: no winners");
  if (n_offspring < 0 || n_offspring > static_cast<int>(pop.size() - winners.size())) {
    throw std::invalid_argument("spawn_offspring: n_offspring must be in [0, P-K]");
  }
  std::vector<GenomeId> protected_ids;
  for (const Member& w : winners) protected_ids.push_back(w.id());
  for (int i = 0; i < n_offspring; ++i) {
    const Member& parent =
        winners[std::uniform_int_distribution<std::size_t>(0, winners.size() - 1)(rng)];
    Member child;
    child.genome = constrained_mutate(parent.genome, constraints, rng, ids);
    child.fitness = pop.get(parent.id()).fitness;
    child.born_at = born_at;

    auto& members = pop.members();
    auto victim = members.end();
    for (auto it = members.begin(); it != members.end(); ++it) {
      if (std::find(protected_ids.begin(), protected_ids.end(), it->id()) != protected_ids.end()) continue;
      if (victim == members.end() || ranks_before(*victim, *it)) victim = it;
    }
    *victim = child;
    protected_ids.push_back(child.id());
  }
}

void writeback_fitness(LayerPopulation& pop, GenomeId id, double alpha_star, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("writeback_fitness: epsilon outside [0,1]");
  if (!std::isfinite(alpha_star)) throw std::invalid_argument("writeback_fitness: non-finite fitness");
  Member& m = pop.get(id);
  m.fitness = epsilon * alpha_star + (1.0 - epsilon) * m.fitness;
}

std::vector<Member> top_k(const LayerPopulation& pop, int k) {
  if (k < 1 || k > static_cast<int>(pop.size())) throw std::invalid_argument("top_k: K outside [1,P]");
  std::vector<Member> sorted = pop.members();
  std::partial_sort(sorted.begin(), sorted.begin() + k, sorted.end(), ranks_before);
  sorted.resize(static_cast<std::size_t>(k));
  return sorted;
}

void SearchSpace::validate() const {
  if (layers.empty()) throw std::invalid_argument("search space has no layers");
  const std::size_t k = layers.front().size();
  if (k == 0) throw std::invalid_argument("search space layer 0 is empty");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].size() != k) {
      throw std::invalid_argument("search space layer " + std::to_string(l) + " has " +
                                  std::to_string(layers[l].size()) + " cells, expected " + std::to_string(k));
    }
    for (std::size_t i = 1; i < k; ++i) {
      if (layers[l][i].fitness > layers[l][i - 1].fitness) {
        throw std::invalid_argument("search space layer " + std::to_string(l) + " not sorted by fitness");
      }
    }
  }
}

SearchSpace make_search_space(const std::vector<LayerPopulation>& pops, int k) {
  SearchSpace space;
  for (const auto& pop : pops) {
    std::vector<SpaceCell> cells;
    for (const Member& m : top_k(pop, k)) cells.push_back({m.genome, m.fitness});
    space.layers.push_back(std::move(cells));
  }
  return space;
}

json search_space_to_json(const SearchSpace& space) {
  json layers = json::array();
  for (std::size_t l = 0; l < space.layers.size(); ++l) {
    json cells = json::array();
    for (const SpaceCell& c : space.layers[l]) {
      cells.push_back({{"genome", genome_to_json(c.genome)}, {"fitness", c.fitness}, {"id", c.genome.id}});
    }
    layers.push_back({{"layer", l}, {"cells", cells}});
  }
  return json{{"version", 1},
              {"layers", layers},
              {"meta",
               {{"seed", space.seed},
                {"iterations", space.iterations},
                {"config_hash", space.config_hash},
                {"tool_version", std::string(kToolVersion)}}}};
}

SearchSpace search_space_from_json(const json& j) {
  if (!j.is_object() || j.value("version", 0) != 1) throw GenomeParseError("search space: expected version 1", 0);
  if (!j.contains("layers") || !j["layers"].is_array()) throw GenomeParseError("search space: missing \"layers\"", 0);
  SearchSpace space;
  for (const json& layer : j["layers"]) {
    const std::string where = "search space layer " + std::to_string(space.layers.size());
    if (!layer.contains("cells") || !layer["cells"].is_array()) throw GenomeParseError(where + ": missing \"cells\"", 0);
    std::vector<SpaceCell> cells;
    for (const json& cell : layer["cells"]) {
      if (!cell.contains("genome") || !cell.contains("fitness")) {
        throw GenomeParseError(where + ": cell needs \"genome\" and \"fitness\"", 0);
      }
      SpaceCell c{genome_from_json(cell["genome"], where), cell["fitness"].get<double>()};
      c.genome.id = cell.value("id", GenomeId{0});
      cells.push_back(c);
    }
    space.layers.push_back(std::move(cells));
  }
  if (j.contains("meta")) {
    const json& meta = j["meta"];
    space.seed = meta.value("seed", std::uint64_t{0});
    space.iterations = meta.value("iterations", std::uint64_t{0});
    space.config_hash = meta.value("config_hash", std::string{});
  }
  space.validate();
  return space;
}

}  // namespace autospace
