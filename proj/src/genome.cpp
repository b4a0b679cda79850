#include "autospace/genome.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "autospace/canonical_json.hpp"

namespace autospace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

using nlohmann::json;

int ratio_index(int ratio) {
  auto it = std::find(kRatios.begin(), kRatios.end(), ratio);
  if (it == kRatios.end()) throw std::invalid_argument("ratio " + std::to_string(ratio) + " not in {1,3,6}");
  return static_cast<int>(it - kRatios.begin());
}

// Gene position p: 0..5 edges, 6 ratio, 7 aggregation.
void resample_gene(CellGenome& g, int position, Rng& rng) {
  if (position < kEdgeCount) {
    const int current = static_cast<int>(g.edges[position]);
    int pick = std::uniform_int_distribution<int>(0, kOpCount - 2)(rng);
    if (pick >= current) ++pick;
    g.edges[position] = static_cast<Op>(pick);
  } else if (position == kEdgeCount) {
    const int current = ratio_index(g.ratio);
    int pick = std::uniform_int_distribution<int>(0, static_cast<int>(kRatios.size()) - 2)(rng);
    if (pick >= current) ++pick;
    g.ratio = kRatios[pick];
  } else {
    g.agg = g.agg == Aggregation::kAdd ? Aggregation::kHadamard : Aggregation::kAdd;
  }
}

std::uint64_t edge_madds(Op op, std::uint64_t channels, std::uint64_t plane) {
  switch (op) {
    case Op::kZero:
    case Op::kIdentity: return 0;
    case Op::kConv1x1: return channels * channels * plane;
    case Op::kConv3x3: return 9 * channels * channels * plane;
    case Op::kDwConv3x3: return 9 * channels * plane;
  }
  return 0;
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kZero: return "zero";
    case Op::kIdentity: return "identity";
    case Op::kConv1x1: return "conv1x1";
    case Op::kConv3x3: return "conv3x3";
    case Op::kDwConv3x3: return "dwconv3x3";
  }
  return "?";
}

std::string CellGenome::str() const {
  std::ostringstream os;
  os << "A[" << op_name(edges[0]) << ',' << op_name(edges[1]) << ',' << op_name(edges[2]) << "] B["
     << op_name(edges[3]) << ',' << op_name(edges[4]) << ',' << op_name(edges[5]) << "] r=" << ratio
     << (agg == Aggregation::kAdd ? " add" : " hadamard");
  return os.str();
}

const Skeleton& skeleton() {
  static const Skeleton s{
      {"IN", "A1", "A2", "B1", "B2", "OUT"},
      {{{0, 1}, {1, 2}, {2, 5}, {0, 3}, {3, 4}, {4, 5}}},
  };
  return s;
}

std::uint64_t genome_space_size() {
  std::uint64_t n = 1;
  for (int i = 0; i < kEdgeCount; ++i) n *= kOpCount;
  return n * kRatios.size() * 2;
}

CellGenome genome_from_index(std::uint64_t index) {
  if (index >= genome_space_size()) throw std::out_of_range("genome index out of range");
  CellGenome g;
  for (int e = 0; e < kEdgeCount; ++e) {
    g.edges[e] = static_cast<Op>(index % kOpCount);
    index /= kOpCount;
  }
  g.ratio = kRatios[index % kRatios.size()];
  index /= kRatios.size();
  g.agg = static_cast<Aggregation>(index);
  return g;
}

void LayerShape::validate() const {
  if (c_in <= 0 || c_out <= 0 || h <= 0 || w <= 0 || stride <= 0) {
    throw std::invalid_argument("layer shape needs positive dims");
  }
  if (out_h() <= 0 || out_w() <= 0) throw std::invalid_argument("layer stride larger than spatial extent");
}

GeneDistance hamming(const CellGenome& a, const CellGenome& b) {
  GeneDistance d;
  for (int e = 0; e < kEdgeCount; ++e) d.differing += a.edges[e] != b.edges[e];
  d.differing += a.ratio != b.ratio;
  d.differing += a.agg != b.agg;
  return d;
}

CellGenome random_genome(Rng& rng, IdSource& ids) {
  CellGenome g;
  std::uniform_int_distribution<int> op(0, kOpCount - 1);
  for (auto& e : g.edges) e = static_cast<Op>(op(rng));
  g.ratio = kRatios[std::uniform_int_distribution<int>(0, static_cast<int>(kRatios.size()) - 1)(rng)];
  g.agg = static_cast<Aggregation>(std::uniform_int_distribution<int>(0, 1)(rng));
  g.id = ids.next();
  return g;
}

CellGenome mutate(const CellGenome& parent, Rng& rng, IdSource& ids, int n_mut) {
  if (n_mut < 1 || n_mut > kGeneCount) throw std::invalid_argument("mutate: n_mut must be in [1,8]");
  std::array<int, kGeneCount> positions{};
  std::iota(positions.begin(), positions.end(), 0);
  CellGenome child = parent;
  for (int i = 0; i < n_mut; ++i) {
    const int j = std::uniform_int_distribution<int>(i, kGeneCount - 1)(rng);
    std::swap(positions[i], positions[j]);
    resample_gene(child, positions[i], rng);
  }
  child.id = ids.next();
  return child;
}

bool annihilates(const CellGenome& g) {
  // Branch A runs through nodes 1-2, branch B through nodes 3-4.
  bool cut[2] = {false, false};
  for (int e = 0; e < kEdgeCount; ++e) {
    const auto [from, to] = skeleton().edges[e];
    const int inner = from == 0 ? to : from;
    if (g.edges[e] == Op::kZero) cut[inner <= 2 ? 0 : 1] = true;
  }
  return g.agg == Aggregation::kAdd ? (cut[0] && cut[1]) : (cut[0] || cut[1]);
}

CellGenome constrained_mutate(const CellGenome& parent, const MutationConstraints& c, Rng& rng, IdSource& ids) {
  const bool use_ref = c.reference_active && c.reference != nullptr;
  if (use_ref && !(c.tau > 0.0 && c.tau <= 1.0)) throw std::invalid_argument("tau must be in (0,1]");
  const bool check_budget = std::isfinite(c.madds_budget);
  if (check_budget) c.shape.validate();

  bool restart_from_parent = true;
  if (use_ref) {
    const int d = hamming(parent, *c.reference).differing;
    const GeneDistance closest{std::abs(d - c.n_mut)};
    restart_from_parent = closest.below(c.tau);
  }

  int ref_failures = 0, budget_failures = 0, live_failures = 0;
  CellGenome candidate = parent;
  for (int attempt = 0; attempt < c.max_retries; ++attempt) {
    IdSource scratch(0);
    // One step from the parent may satisfy the reference but never the other constraints;
    // the second half of the attempts then walks instead.
    if (use_ref && restart_from_parent && 2 * attempt >= c.max_retries) {
      restart_from_parent = false;
      candidate = parent;
    }
    if (restart_from_parent) {
      candidate = mutate(parent, rng, scratch, c.n_mut);
    } else {
      // Chain mutations, never moving away from the reference.
      CellGenome next = mutate(candidate, rng, scratch, c.n_mut);
      if (hamming(next, *c.reference).differing > hamming(candidate, *c.reference).differing) {
        ++ref_failures;
        continue;
      }
      candidate = next;
    }
    const bool ref_ok = !use_ref || hamming(candidate, *c.reference).below(c.tau);
    const bool budget_ok = !check_budget || static_cast<double>(madds(candidate, c.shape)) < c.madds_budget;
    const bool live_ok = !c.reject_annihilating || !annihilates(candidate);
    if (ref_ok && budget_ok && live_ok) {
      candidate.id = ids.next();
      return candidate;
    }
    ref_failures += !ref_ok;
    budget_failures += !budget_ok;
    live_failures += !live_ok;
  }
  std::string binding;
  if (ref_failures > 0 && budget_failures > 0) {
    binding = "reference distance < tau and MAdds < budget";
  } else if (ref_failures > 0) {
    binding = "reference distance < tau";
  } else if (budget_failures > 0) {
    binding = "MAdds < budget";
  } else {
    binding = "non-annihilating output";
  }
  throw InfeasibleMutation("infeasible mutation: no child satisfied " + binding + " after " +
                           std::to_string(c.max_retries) + " attempts");
}

std::uint64_t madds(const CellGenome& g, const LayerShape& shape) {
  shape.validate();
  const std::uint64_t plane = static_cast<std::uint64_t>(shape.out_h()) * shape.out_w();
  const std::uint64_t inner = static_cast<std::uint64_t>(g.ratio) * shape.c_in;
  std::uint64_t total = static_cast<std::uint64_t>(shape.c_in) * inner * plane;  // IN expansion
  total += inner * static_cast<std::uint64_t>(shape.c_out) * plane;            // OUT projection
  for (Op op : g.edges) total += edge_madds(op, inner, plane);
  return total;
}

nlohmann::json genome_to_json(const CellGenome& g) {
  json edges = json::array();
  for (Op op : g.edges) edges.push_back(static_cast<int>(op));
  return json{{"edges", edges}, {"ratio", g.ratio}, {"agg", g.agg == Aggregation::kAdd ? "add" : "hadamard"}};
}

CellGenome genome_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw GenomeParseError(where + ": expected an object", 0);
  for (const char* field : {"edges", "ratio", "agg"}) {
    if (!j.contains(field)) throw GenomeParseError(where + ": missing field \"" + field + "\"", 0);
  }
  CellGenome g;
  const json& edges = j.at("edges");
  if (!edges.is_array() || edges.size() != kEdgeCount) {
    throw GenomeParseError(where + ": \"edges\" must be an array of 6 operator codes", 0);
  }
  for (int e = 0; e < kEdgeCount; ++e) {
    const json& code = edges[e];
    if (!code.is_number_integer() || code.get<int>() < 0 || code.get<int>() >= kOpCount) {
      throw GenomeParseError(where + ": unknown operator code " + code.dump() + " at edge " + std::to_string(e), 0);
    }
    g.edges[e] = static_cast<Op>(code.get<int>());
  }
  const json& ratio = j.at("ratio");
  if (!ratio.is_number_integer() ||
      std::find(kRatios.begin(), kRatios.end(), ratio.get<int>()) == kRatios.end()) {
    throw GenomeParseError(where + ": \"ratio\" must be 1, 3 or 6, got " + ratio.dump(), 0);
  }
  g.ratio = ratio.get<int>();
  const json& agg = j.at("agg");
  if (agg == "add") {
    g.agg = Aggregation::kAdd;
  } else if (agg == "hadamard") {
    g.agg = Aggregation::kHadamard;
  } else {
    throw GenomeParseError(where + ": \"agg\" must be \"add\" or \"hadamard\", got " + agg.dump(), 0);
  }
  return g;
}

std::string encode(const CellGenome& g) { return to_canonical_json(genome_to_json(g), false); }

CellGenome decode(std::string_view bytes) {
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw GenomeParseError(std::string("genome: malformed JSON: ") + e.what(), e.byte);
  }
  return genome_from_json(j);
}

}  // namespace autospace
