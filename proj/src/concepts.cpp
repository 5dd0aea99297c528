#include "conceptflow/concepts.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "conceptflow/errors.hpp"

namespace conceptflow {

const char* to_string(FlowDirection d) { return d == FlowDirection::Forward ? "forward" : "backward"; }

ConceptSet::ConceptSet(std::vector<Concept> concepts) : concepts_(std::move(concepts)) {
  if (concepts_.empty()) throw ValidationError("concept set is empty");
  if (concepts_.size() > kMaxConcepts)
    throw ValidationError("concept set has " + std::to_string(concepts_.size()) + " concepts; limit is " +
                          std::to_string(kMaxConcepts));
  std::set<std::string> names;
  int prev_level = 1;
  for (std::size_t i = 0; i < concepts_.size(); ++i) {
    Concept& c = concepts_[i];
    c.id = static_cast<int>(i);
    if (c.name.empty()) throw ValidationError("concept #" + std::to_string(i) + " has an empty name");
    if (c.level < 1)
      throw ValidationError("concept '" + c.name + "' has level " + std::to_string(c.level) + "; levels start at 1");
    if (!names.insert(c.name).second) throw ValidationError("duplicate concept name '" + c.name + "'");
    if (c.level < prev_level)
      throw ValidationError("concept '" + c.name + "' (level " + std::to_string(c.level) +
                            ") follows a level-" + std::to_string(prev_level) + " concept; order must be hierarchical");
    if (c.level > prev_level + 1)
      throw ValidationError("concept '" + c.name + "' jumps from level " + std::to_string(prev_level) + " to " +
                            std::to_string(c.level) + "; level " + std::to_string(prev_level + 1) + " is empty");
    if (i == 0 && c.level != 1)
      throw ValidationError("concept '" + c.name + "' opens the set at level " + std::to_string(c.level) +
                            "; level 1 is empty");
    prev_level = c.level;
    level_count_ = std::max(level_count_, c.level);
  }
}

ConceptSet ConceptSet::from_names_and_levels(const std::vector<std::pair<std::string, int>>& entries) {
  std::vector<Concept> cs;
  for (const auto& [name, level] : entries) cs.push_back({0, name, level});
  return ConceptSet(std::move(cs));
}

const Concept& ConceptSet::at(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= concepts_.size())
    throw IndexError("concept id " + std::to_string(id) + " out of range [0, " + std::to_string(concepts_.size()) +
                     ")");
  return concepts_[static_cast<std::size_t>(id)];
}

std::optional<int> ConceptSet::find(const std::string& name) const {
  for (const auto& c : concepts_)
    if (c.name == name) return c.id;
  return std::nullopt;
}

int ConceptSet::id_of(const std::string& name) const {
  if (auto id = find(name)) return *id;
  throw IndexError("unknown concept '" + name + "'");
}

std::vector<int> ConceptSet::ids_at_level(int level) const {
  std::vector<int> ids;
  for (const auto& c : concepts_)
    if (c.level == level) ids.push_back(c.id);
  return ids;
}

FlowDirection ConceptSet::flow_direction(int from_id, int to_id) const {
  return level(from_id) > level(to_id) ? FlowDirection::Backward : FlowDirection::Forward;
}

bool ConceptSet::operator==(const ConceptSet& other) const {
  if (concepts_.size() != other.concepts_.size()) return false;
  for (std::size_t i = 0; i < concepts_.size(); ++i)
    if (concepts_[i].name != other.concepts_[i].name || concepts_[i].level != other.concepts_[i].level) return false;
  return true;
}

ConceptSet parse_concept_set(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("concept file is not valid JSON: ") + e.what());
  }
  if (!doc.is_array()) throw ParseError("concept file must be a top-level JSON array");
  if (doc.size() > ConceptSet::kMaxConcepts)
    throw ValidationError("concept file lists " + std::to_string(doc.size()) + " concepts; limit is " +
                          std::to_string(ConceptSet::kMaxConcepts));
  std::vector<Concept> cs;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    if (!e.is_object() || !e.contains("name") || !e.contains("level") || !e["name"].is_string() ||
        !e["level"].is_number_integer())
      throw ParseError("concept #" + std::to_string(i) + " must be {\"name\": string, \"level\": int}");
    cs.push_back({static_cast<int>(i), e["name"].get<std::string>(), e["level"].get<int>()});
  }
  return ConceptSet(std::move(cs));
}

ConceptSet load_concept_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open concept file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_concept_set(ss.str());
}

std::string concept_set_to_json(const ConceptSet& set) {
  std::string out = "[\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& c = set.concepts()[i];
    out += "  {\"name\": " + nlohmann::json(c.name).dump() + ", \"level\": " + std::to_string(c.level) + "}" +
           (i + 1 < set.size() ? ",\n" : "\n");
  }
  out += "]\n";
  return out;
}

void save_concept_set(const ConceptSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write concept file " + path.string());
  out << concept_set_to_json(set);
}

std::filesystem::path bundled_concepts_dir() { return std::filesystem::path(CONCEPTFLOW_DATA_DIR) / "concepts"; }

ConceptSet bundled_cmnist_concepts() { return load_concept_set(bundled_concepts_dir() / "cmnist-analog.json"); }

ConceptSet bundled_cawa_concepts() { return load_concept_set(bundled_concepts_dir() / "cawa-analog.json"); }

}  // namespace conceptflow
