#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "conceptflow/concepts.hpp"
#include "conceptflow/glyphs.hpp"
#include "conceptflow/tensor.hpp"

namespace conceptflow {

struct Sample {
  Tensor image;             // [C,H,W], values in [0,1]
  int class_label = 0;      // binary task: 0 even, 1 odd
  Vector concept_vector;    // binary, length n_c
  int source_class = -1;    // digit / original class before the parity mapping
  std::optional<GlyphRecord> glyph;
};

struct Dataset {
  std::vector<Sample> samples;
  std::shared_ptr<const ConceptSet> concepts;
  std::string split = "train";

  std::size_t size() const { return samples.size(); }
  // Throws unless non-empty, same image shape everywhere, concept vectors sized to the set.
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

inline int parity_label(int digit) { return digit % 2; }

Dataset generate_glyphs(std::size_t count, std::uint64_t seed, std::shared_ptr<const ConceptSet> concepts,
                        const std::string& split = "train");

// ---- IDX (MNIST) ----------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
  Index rows = 0;
  Index cols = 0;
  std::vector<Tensor> images;  // [1,rows,cols], scaled to [0,1]
};

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

struct IdxData {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

IdxData load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// ---- class -> concept annotation -------------------------------------------

using ClassConceptTable = std::map<int, Vector>;

ClassConceptTable digit_concept_table(const ConceptSet& set);
ClassConceptTable load_class_table(const std::filesystem::path& path, const ConceptSet& set);
void save_class_table(const ClassConceptTable& table, const ConceptSet& set, const std::filesystem::path& path);
std::vector<Vector> annotate_by_class(std::span<const int> labels, const ClassConceptTable& table);

Dataset dataset_from_idx(const IdxData& idx, const ClassConceptTable& table,
                         std::shared_ptr<const ConceptSet> concepts, const std::string& split);

// ---- interventions -----------------------------------------------------------

struct Enhance {
  Region region;
  double gain = 0.5;
};

struct Mask {
  Region region;
};

using Intervention = std::variant<Enhance, Mask>;

Sample intervene(const Sample& sample, const Intervention& op);

// ---- resampling ------------------------------------------------------------------

// Key used to balance a sample: its first top-level concept, or its class label
// when no top-level concept is set.
int balance_key(const Sample& sample, const ConceptSet& set);

// Draws `draws` indices (default: dataset size) with weights inverse to the
// frequency of each sample's balance key.
std::vector<std::size_t> importance_resample(const Dataset& dataset, std::uint64_t seed,
                                             std::optional<std::size_t> draws = std::nullopt);

// ---- persistence -------------------------------------------------------------------
// Directory layout: manifest.json {split, count, concept_set_path},
// images.cftn [N,C,H,W], annotations.cftn [N, 2+n_c] (label, source class, concepts),
// glyphs.jsonl when the samples carry glyph records.

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                  const std::filesystem::path& concept_set_path);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace conceptflow
