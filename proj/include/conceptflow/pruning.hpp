#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "conceptflow/backbone.hpp"
#include "conceptflow/pathways.hpp"

// Connection-level pruning: a connection (l, j, i) is the 3x3 kernel slice
// W_{l+1}[j, i] from filter i of layer l to filter j of layer l+1.
namespace conceptflow {

struct Connection {
  int boundary = 0;  // l, 1-based
  int out = 0;       // j, filter in layer l+1
  int in = 0;        // i, filter in layer l
  auto operator<=>(const Connection&) const = default;
};

enum class PruneMethod { Conceptual, NonConceptual, L1 };
const char* to_string(PruneMethod m);
PruneMethod parse_prune_method(const std::string& text);

struct PruneMask {
  std::vector<Connection> entries;  // sorted, unique
  PruneMethod method = PruneMethod::L1;
  double parameter = 0;  // tau or target ratio
  double ratio = 0;      // |entries| / total_connections
};

// Sum over boundaries of C_out * C_in.
Index total_connections(const ModelConfig& config);

PruneMask conceptual_mask(std::span<const PathwayRecord> records, double tau, const ConceptSet& set,
                          const ModelConfig& config);

// Uniform (seeded) sample from the pairs with no pathway at tau.
PruneMask nonconceptual_mask(std::span<const PathwayRecord> records, double tau, double target_ratio,
                             std::uint64_t seed, const ConceptSet& set, const ModelConfig& config);

// Smallest L1 norms of W[j,i,:,:] across all boundaries; ties by (l, j, i).
PruneMask l1_mask(const Checkpoint& ckpt, double target_ratio);

// Throws IndexError on out-of-range entries; the input is left untouched.
Checkpoint apply_mask(const Checkpoint& ckpt, const PruneMask& mask);

struct CurvePoint {
  double parameter = 0;
  double ratio = 0;
  double accuracy = 0;
};

struct PruneCurve {
  PruneMethod method = PruneMethod::L1;
  std::uint64_t seed = 0;
  std::vector<CurvePoint> points;
};

struct SweepInputs {
  std::span<const PathwayRecord> records;  // needed by the pathway methods
  const ConceptSet* concepts = nullptr;
  // Non-conceptual targets: when set, point g uses matched_ratios[g] instead of grid[g].
  std::vector<double> matched_ratios;
};

// Grid values are taus for Conceptual / NonConceptual (the latter matched to a
// ratio via SweepInputs) and target ratios for L1. Points come back in grid order.
PruneCurve sweep(const Checkpoint& ckpt, PruneMethod method, std::span<const double> grid, const Dataset& eval_set,
                 std::uint64_t seed, const SweepInputs& inputs = {});

struct CensusRow {
  double tau = 0;
  std::size_t forward = 0;
  std::size_t backward = 0;
  std::size_t bidirectional = 0;
  std::size_t total() const { return forward + backward + bidirectional; }
};

std::vector<CensusRow> pathway_type_census(std::span<const PathwayRecord> records, std::span<const double> taus,
                                           const ConceptSet& set);

struct ImpactRow {
  double tau = 0;
  PathwayLabel type = PathwayLabel::None;
  std::size_t count = 0;
  double accuracy = 0;
  double drop_per_pathway = 0;
  bool omitted = false;  // no pathway of this type at tau
};

std::vector<ImpactRow> per_type_impact(const Checkpoint& ckpt, std::span<const PathwayRecord> records,
                                       std::span<const double> taus, const Dataset& eval_set, const ConceptSet& set);

std::string mask_jsonl(const PruneMask& mask);
std::string curve_csv(std::span<const PruneCurve> curves);

}  // namespace conceptflow
