#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace conceptflow {

struct Concept {
  int id = 0;
  std::string name;
  int level = 1;  // 1 is the most primitive level
};

enum class FlowDirection { Forward, Backward };

const char* to_string(FlowDirection d);

// Ordered, hierarchical concept universe. Ids are positions in the list;
// levels are non-decreasing along it and every level 1..level_count occurs.
class ConceptSet {
 public:
  static constexpr std::size_t kMaxConcepts = 1024;

  ConceptSet() = default;
  // Validates and throws ValidationError naming the offending concept.
  explicit ConceptSet(std::vector<Concept> concepts);

  static ConceptSet from_names_and_levels(const std::vector<std::pair<std::string, int>>& entries);

  std::size_t size() const { return concepts_.size(); }
  int level_count() const { return level_count_; }
  const std::vector<Concept>& concepts() const { return concepts_; }
  const Concept& at(int id) const;
  int level(int id) const { return at(id).level; }
  const std::string& name(int id) const { return at(id).name; }
  std::optional<int> find(const std::string& name) const;
  int id_of(const std::string& name) const;  // throws if absent
  std::vector<int> ids_at_level(int level) const;
  std::vector<int> top_level_ids() const { return ids_at_level(level_count_); }

  // Backward iff level(from) > level(to); equal levels count as Forward.
  FlowDirection flow_direction(int from_id, int to_id) const;

  bool operator==(const ConceptSet& other) const;

 private:
  std::vector<Concept> concepts_;
  int level_count_ = 0;
};

ConceptSet parse_concept_set(const std::string& json_text);
ConceptSet load_concept_set(const std::filesystem::path& path);
// Canonical form: one {"name", "level"} object per line, two-space indent, LF.
std::string concept_set_to_json(const ConceptSet& set);
void save_concept_set(const ConceptSet& set, const std::filesystem::path& path);

std::filesystem::path bundled_concepts_dir();
ConceptSet bundled_cmnist_concepts();
ConceptSet bundled_cawa_concepts();

}  // namespace conceptflow
