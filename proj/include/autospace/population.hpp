#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "autospace/genome.hpp"

namespace autospace {

struct Member {
  CellGenome genome;
  double fitness = 0.0;              // alpha
  std::uint64_t participation = 0;   // supernet iterations this cell took part in
  std::uint64_t born_at = 0;         // iteration index of creation

  GenomeId id() const { return genome.id; }
};

/// Ordering used everywhere a "better" member is needed: higher fitness,
/// then lower id.
bool ranks_before(const Member& a, const Member& b);

class LayerPopulation {
 public:
  LayerPopulation(int layer, std::vector<Member> members);

  int layer() const { return layer_; }
  std::size_t size() const { return members_.size(); }
  const std::vector<Member>& members() const { return members_; }
  std::vector<Member>& members() { return members_; }

  const Member& get(GenomeId id) const;
  Member& get(GenomeId id);
  bool contains(GenomeId id) const;

 private:
  int layer_;
  std::vector<Member> members_;
};

/// Optional admission test for freshly sampled genomes (e.g. the MAdds budget).
using Admission = std::function<bool(int layer, const CellGenome&)>;

/// P random genomes per layer, the reference (if any) first. Sampling is
/// rejection-based under `admit`, giving up after 10000 draws per slot.
std::vector<LayerPopulation> init_populations(int layers, int population, int k, const CellGenome* reference,
                                              Rng& rng, IdSource& ids, const Admission& admit = {});

/// K tournaments of size t; each picks the fittest of t distinct members
/// drawn uniformly (ties go to the earliest drawn). Winners are excluded
/// from later tournaments.
std::vector<Member> tournament_select(const LayerPopulation& pop, int tournament, int k, Rng& rng);

/// Each offspring mutates a uniformly chosen winner and replaces the worst
/// member that is neither a winner nor born in this call.
void spawn_offspring(LayerPopulation& pop, std::span<const Member> winners, const MutationConstraints& constraints,
                     Rng& rng, IdSource& ids, int n_offspring, std::uint64_t born_at = 0);

/// fitness <- epsilon * alpha_star + (1 - epsilon) * fitness.
void writeback_fitness(LayerPopulation& pop, GenomeId id, double alpha_star, double epsilon);

std::vector<Member> top_k(const LayerPopulation& pop, int k);

struct SpaceCell {
  CellGenome genome;
  double fitness = 0.0;
};

struct SearchSpace {
  std::vector<std::vector<SpaceCell>> layers;
  std::uint64_t seed = 0;
  std::uint64_t iterations = 0;
  std::string config_hash;

  int k() const { return layers.empty() ? 0 : static_cast<int>(layers.front().size()); }
  void validate() const;
};

SearchSpace make_search_space(const std::vector<LayerPopulation>& pops, int k);

nlohmann::json search_space_to_json(const SearchSpace& space);
SearchSpace search_space_from_json(const nlohmann::json& j);

}  // namespace autospace
