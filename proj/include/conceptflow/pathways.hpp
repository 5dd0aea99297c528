#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "conceptflow/attention.hpp"
#include "conceptflow/concepts.hpp"

// Rank statistics between filters of adjacent layers and the conceptual flows
// and pathways read off them.
namespace conceptflow {

struct SpearmanResult {
  double rho = 0;
  bool degenerate = false;  // one input was constant; rho is then 0
};

// Average ranks (1-based); tied values share the mean of their positions.
Vector average_ranks(std::span<const double> values);

// Pearson correlation of average ranks.
SpearmanResult spearman(std::span<const double> u, std::span<const double> v);

// (i,j) = |spearman(row i of a_src, row j of a_dst)| for i in k_src, j in k_dst,
// i != j; every other entry is 0.
Matrix spearman_matrix(const Matrix& a_src, const Matrix& a_dst, std::span<const int> k_src,
                       std::span<const int> k_dst);

struct ConceptualFlow {
  int from = 0;
  int to = 0;
  double strength = 0;
  FlowDirection direction = FlowDirection::Forward;
};

// Entries >= tau, sorted by (strength desc, from, to).
std::vector<ConceptualFlow> extract_flows(const Matrix& p, double tau, const ConceptSet& set);

enum class PathwayLabel { None, Forward, Backward, Bidirectional };
const char* to_string(PathwayLabel label);
PathwayLabel parse_pathway_label(const std::string& text);

PathwayLabel classify_pathway(std::span<const ConceptualFlow> flows);

struct PathwayRecord {
  int layer = 0;   // boundary: filter m in `layer`, filter n in `layer + 1`
  int src = 0;     // m
  int dst = 0;     // n
  std::vector<int> top_src;
  std::vector<int> top_dst;
  Matrix p;        // Spearman matrix
  std::vector<ConceptualFlow> flows;  // at the tau the record was built with
  PathwayLabel label = PathwayLabel::None;

  // Label at another threshold, recomputed from p.
  PathwayLabel label_at(double tau, const ConceptSet& set) const;
};

// Full filter-pair grid between `layer` and `layer + 1`, ordered by (src, dst).
// `columns` optionally restricts the statistics to a subset of the probe samples.
std::vector<PathwayRecord> layer_pathways(const AttentionStore& store, const ConceptSet& set, int layer, int k,
                                          double tau, std::span<const Index> columns = {});

// One JSON object per record: {layer, m, n, label, flows:[{from,to,strength,dir}]}.
std::string pathway_jsonl(std::span<const PathwayRecord> records);

}  // namespace conceptflow

namespace conceptflow {

// Persists the Spearman matrices of one boundary as a [C_l, C_{l+1}, n_c, n_c]
// tensor (b{l}_spearman.cftn) and the top-k sets as b{l}_topk.json.
void save_pathway_records(const std::filesystem::path& dir, std::span<const PathwayRecord> records);
// Rebuilds records (flows and labels at `tau`) for every boundary found in `dir`.
std::vector<PathwayRecord> load_pathway_records(const std::filesystem::path& dir, const ConceptSet& set, double tau);

}  // namespace conceptflow
