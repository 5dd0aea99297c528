#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "conceptflow/backbone.hpp"
#include "conceptflow/dataset.hpp"
#include "conceptflow/scanner.hpp"

// Filter-wise concept attention: the head's concept attention on an input
// overlaid with one filter's learning image.
namespace conceptflow {

Vector filter_attention(const Checkpoint& ckpt, const LearningImageCache& cache, const Tensor& image, int layer,
                        int filter);

struct AttentionMatrix {
  int layer = 0;
  int filter = 0;
  Matrix values;                         // [n_c, S], column s = sample s
  std::vector<std::size_t> sample_ids;   // dataset index of each column
};

AttentionMatrix attention_matrix(const Checkpoint& ckpt, const LearningImageCache& cache,
                                 std::span<const Tensor> samples, int layer, int filter,
                                 std::vector<std::size_t> sample_ids = {});

// Ids of the k largest row means of A, largest first, ties to the lower id.
std::vector<int> top_k_concepts(const Eigen::Ref<const Matrix>& a, int k);

struct InterventionReport {
  Vector before;
  Vector after;
  Vector delta;  // after - before
};

InterventionReport intervention_report(const Checkpoint& ckpt, const LearningImageCache& cache,
                                       const Sample& sample, const Intervention& op, int layer, int filter);

// Attention matrices keyed by (layer, filter).
class AttentionStore {
 public:
  void insert(AttentionMatrix a);
  bool contains(int layer, int filter) const;
  const AttentionMatrix& at(int layer, int filter) const;
  std::vector<int> filters(int layer) const;
  std::vector<int> layers() const;
  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // Per filter: l{l}_f{m}.csv (rows = concepts, columns = sample ids) and
  // l{l}_f{m}.cftn, plus index.json listing the sample ids once.
  void save(const std::filesystem::path& dir, const ConceptSet& set, bool write_csv = true) const;
  static AttentionStore load(const std::filesystem::path& dir);

 private:
  std::map<std::pair<int, int>, AttentionMatrix> entries_;
};

std::string attention_csv(const AttentionMatrix& a, const ConceptSet& set);

}  // namespace conceptflow
