#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace autospace {

using Rng = std::mt19937_64;
using GenomeId = std::uint64_t;

/// Independent sub-stream seed (splitmix64 of seed and stream index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Edge operators. The integer values are the serialized codes.
enum class Op : std::uint8_t { kZero = 0, kIdentity = 1, kConv1x1 = 2, kConv3x3 = 3, kDwConv3x3 = 4 };
inline constexpr int kOpCount = 5;

enum class Aggregation : std::uint8_t { kAdd = 0, kHadamard = 1 };

inline constexpr int kNodeCount = 6;
inline constexpr int kEdgeCount = 6;
/// Edge genes plus the ratio gene plus the aggregation gene.
inline constexpr int kGeneCount = kEdgeCount + 2;
inline constexpr std::array<int, 3> kRatios = {1, 3, 6};
/// V(V-1) for the six-node cell.
inline constexpr int kHammingDenominator = kNodeCount * (kNodeCount - 1);

std::string_view op_name(Op op);

struct CellGenome {
  std::array<Op, kEdgeCount> edges{};
  int ratio = 1;
  Aggregation agg = Aggregation::kAdd;
  GenomeId id = 0;

  /// Gene equality; ids are ignored.
  friend bool operator==(const CellGenome& a, const CellGenome& b) {
    return a.edges == b.edges && a.ratio == b.ratio && a.agg == b.agg;
  }
  std::string str() const;
};

/// Hands out genome ids; one per run so ids are reproducible.
class IdSource {
 public:
  explicit IdSource(GenomeId first = 1) : next_(first) {}
  GenomeId next() { return next_++; }
  GenomeId peek() const { return next_; }

 private:
  GenomeId next_;
};

/// Fixed cell topology: IN expands channels (after optional downsampling),
/// two depth-2 branches IN->A1->A2->OUT and IN->B1->B2->OUT carry the six
/// evolvable edges, OUT aggregates both branch tails and projects.
struct Skeleton {
  std::array<std::string_view, kNodeCount> nodes;
  std::array<std::array<int, 2>, kEdgeCount> edges;  // node indices, canonical order
};
const Skeleton& skeleton();

/// 5^6 * 3 * 2.
std::uint64_t genome_space_size();
/// Bijection [0, genome_space_size()) -> genomes; id left at 0.
CellGenome genome_from_index(std::uint64_t index);

struct LayerShape {
  int c_in = 0;
  int c_out = 0;
  int h = 0;
  int w = 0;
  int stride = 1;

  int out_h() const { return h / stride; }
  int out_w() const { return w / stride; }
  void validate() const;
};

/// Normalized Hamming distance: differing genes over V(V-1).
struct GeneDistance {
  int differing = 0;
  double value() const { return static_cast<double>(differing) / kHammingDenominator; }
  bool below(double tau) const { return value() < tau; }
  friend auto operator<=>(const GeneDistance&, const GeneDistance&) = default;
};

GeneDistance hamming(const CellGenome& a, const CellGenome& b);

CellGenome random_genome(Rng& rng, IdSource& ids);

/// Resamples exactly n_mut distinct genes to different values.
CellGenome mutate(const CellGenome& parent, Rng& rng, IdSource& ids, int n_mut = 1);

class InfeasibleMutation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// True if the cell output is identically zero: a ZERO edge cuts every
/// branch under ADD, or any branch under HADAMARD.
bool annihilates(const CellGenome& g);

struct MutationConstraints {
  const CellGenome* reference = nullptr;
  double tau = 1.0;
  bool reference_active = false;
  double madds_budget = std::numeric_limits<double>::infinity();
  LayerShape shape;
  int n_mut = 1;
  int max_retries = 1000;
  bool reject_annihilating = false;  // also require a child whose output is not identically zero
};

/// Mutates until the child is within tau of the reference (when active)
/// and strictly under the MAdds budget. Attempts restart from the parent
/// while a single mutation can still reach the reference ball (for at most
/// half the retries); otherwise each attempt mutates the previous candidate
/// and steps that move away from the reference are discarded.
CellGenome constrained_mutate(const CellGenome& parent, const MutationConstraints& constraints, Rng& rng,
                              IdSource& ids);

/// Multiply-adds of the realized cell at the given layer shape.
std::uint64_t madds(const CellGenome& g, const LayerShape& shape);

class GenomeParseError : public std::runtime_error {
 public:
  GenomeParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

nlohmann::json genome_to_json(const CellGenome& g);
/// Validates the schema; `where` prefixes error messages.
CellGenome genome_from_json(const nlohmann::json& j, const std::string& where = "genome");

/// Canonical JSON bytes: {"agg":..,"edges":[..],"ratio":..}.
std::string encode(const CellGenome& g);
CellGenome decode(std::string_view bytes);

}  // namespace autospace
