#include "conceptflow/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"
#include "conceptflow/tensor_io.hpp"

namespace conceptflow {

using nlohmann::json;

void Dataset::validate() const {
  if (samples.empty()) throw ValidationError("dataset '" + split + "' is empty");
  if (!concepts) throw ValidationError("dataset '" + split + "' has no concept set");
  const Shape& shape = samples.front().image.shape();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.image.shape() != shape)
      throw DimensionError("sample " + std::to_string(i) + " has image shape " + shape_string(s.image.shape()) +
                           ", expected " + shape_string(shape));
    if (s.concept_vector.size() != static_cast<Index>(concepts->size()))
      throw DimensionError("sample " + std::to_string(i) + " concept vector has length " +
                           std::to_string(s.concept_vector.size()) + ", concept set has " +
                           std::to_string(concepts->size()));
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{{}, concepts, split};
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(samples.at(i));
  return out;
}

Dataset generate_glyphs(std::size_t count, std::uint64_t seed, std::shared_ptr<const ConceptSet> concepts,
                        const std::string& split) {
  if (count == 0) throw ValidationError("generate_glyphs: count must be positive");
  if (!concepts) throw ValidationError("generate_glyphs: missing concept set");
  Dataset ds{{}, concepts, split};
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, "data/" + split, i);
    const int digit = std::uniform_int_distribution<int>(0, 9)(rng);
    GlyphRecord glyph = make_glyph(digit, rng);
    Sample s;
    s.image = render_glyph(glyph.strokes);
    s.class_label = parity_label(digit);
    s.concept_vector = glyph_concept_vector(glyph, *concepts);
    s.source_class = digit;
    s.glyph = std::move(glyph);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---- class tables --------------------------------------------------------------

ClassConceptTable digit_concept_table(const ConceptSet& set) {
  ClassConceptTable table;
  for (int d = 0; d < 10; ++d) {
    Vector v = Vector::Zero(static_cast<Index>(set.size()));
    for (const auto& name : digit_concept_names(d)) v[set.id_of(name)] = 1.0;
    table[d] = v;
  }
  return table;
}

ClassConceptTable load_class_table(const std::filesystem::path& path, const ConceptSet& set) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open class table " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("classes") || !doc["classes"].is_object())
    throw ParseError(path.string() + ": expected {\"classes\": {\"<class>\": [concept names]}}");
  ClassConceptTable table;
  for (const auto& [key, names] : doc["classes"].items()) {
    Vector v = Vector::Zero(static_cast<Index>(set.size()));
    for (const auto& n : names) v[set.id_of(n.get<std::string>())] = 1.0;
    table[std::stoi(key)] = v;
  }
  return table;
}

void save_class_table(const ClassConceptTable& table, const ConceptSet& set, const std::filesystem::path& path) {
  json classes = json::object();
  for (const auto& [cls, v] : table) {
    json names = json::array();
    for (Index i = 0; i < v.size(); ++i)
      if (v[i] != 0.0) names.push_back(set.name(static_cast<int>(i)));
    classes[std::to_string(cls)] = names;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write class table " + path.string());
  out << json{{"classes", classes}}.dump(2) << "\n";
}

std::vector<Vector> annotate_by_class(std::span<const int> labels, const ClassConceptTable& table) {
  std::vector<Vector> out;
  out.reserve(labels.size());
  for (int label : labels) {
    auto it = table.find(label);
    if (it == table.end()) throw ValidationError("class table has no entry for class " + std::to_string(label));
    out.push_back(it->second);
  }
  return out;
}

Dataset dataset_from_idx(const IdxData& idx, const ClassConceptTable& table,
                         std::shared_ptr<const ConceptSet> concepts, const std::string& split) {
  const auto vectors = annotate_by_class(idx.labels, table);
  Dataset ds{{}, std::move(concepts), split};
  for (std::size_t i = 0; i < idx.images.size(); ++i) {
    Sample s;
    s.image = idx.images[i];
    s.class_label = parity_label(idx.labels[i]);
    s.concept_vector = vectors[i];
    s.source_class = idx.labels[i];
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

// ---- interventions ---------------------------------------------------------------

Sample intervene(const Sample& sample, const Intervention& op) {
  const Tensor& img = sample.image;
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const Region& r = std::visit([](const auto& o) -> const Region& { return o.region; }, op);
  if (r.y0 < 0 || r.x0 < 0 || r.y1 > h || r.x1 > w || r.y0 >= r.y1 || r.x0 >= r.x1)
    throw IndexError("intervention region [" + std::to_string(r.y0) + "," + std::to_string(r.y1) + ")x[" +
                     std::to_string(r.x0) + "," + std::to_string(r.x1) + ") outside " + std::to_string(h) + "x" +
                     std::to_string(w) + " image");
  double gain = 0.0;
  const bool mask = std::holds_alternative<Mask>(op);
  if (!mask) {
    gain = std::get<Enhance>(op).gain;
    if (gain < 0) throw ValidationError("enhance gain must be non-negative");
  }
  Sample out = sample;
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = r.y0; y < r.y1; ++y)
      for (Index x = r.x0; x < r.x1; ++x) {
        double& v = out.image(ch, y, x);
        v = mask ? 0.0 : std::clamp(v * (1.0 + gain), 0.0, 1.0);
      }
  return out;
}

// ---- resampling ------------------------------------------------------------------

int balance_key(const Sample& sample, const ConceptSet& set) {
  for (int id : set.top_level_ids())
    if (sample.concept_vector[id] != 0.0) return id;
  return -1 - sample.class_label;
}

std::vector<std::size_t> importance_resample(const Dataset& dataset, std::uint64_t seed,
                                             std::optional<std::size_t> draws) {
  if (dataset.samples.empty()) throw ValidationError("importance_resample: empty dataset");
  std::map<int, std::size_t> freq;
  std::vector<int> keys;
  keys.reserve(dataset.size());
  for (const auto& s : dataset.samples) {
    keys.push_back(balance_key(s, *dataset.concepts));
    ++freq[keys.back()];
  }
  std::vector<double> weights;
  weights.reserve(keys.size());
  for (int k : keys) weights.push_back(1.0 / static_cast<double>(freq[k]));
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  Rng rng = make_rng(seed, "resample");
  std::vector<std::size_t> out(draws.value_or(dataset.size()));
  for (auto& i : out) i = dist(rng);
  return out;
}

// ---- persistence -----------------------------------------------------------------

namespace {

json glyph_to_json(const GlyphRecord& g) {
  json strokes = json::array();
  for (const auto& s : g.strokes) {
    json pts = json::array();
    for (const auto& p : s.points) pts.push_back({p.x, p.y});
    strokes.push_back({{"kind", static_cast<int>(s.kind)},
                       {"thickness", s.thickness},
                       {"intensity", s.intensity},
                       {"points", pts}});
  }
  auto region = [](const Region& r) { return json::array({r.y0, r.x0, r.y1, r.x1}); };
  json structures = json::array();
  for (const auto& st : g.structures) structures.push_back({{"concept", st.concept_name}, {"region", region(st.region)}});
  return {{"digit", g.digit}, {"strokes", strokes}, {"structures", structures}, {"foreground", region(g.foreground)}};
}

GlyphRecord glyph_from_json(const json& j) {
  auto region = [](const json& a) { return Region{a[0].get<Index>(), a[1].get<Index>(), a[2].get<Index>(), a[3].get<Index>()}; };
  GlyphRecord g;
  g.digit = j.at("digit").get<int>();
  for (const auto& s : j.at("strokes")) {
    Stroke st;
    st.kind = static_cast<StrokeKind>(s.at("kind").get<int>());
    st.thickness = s.at("thickness").get<double>();
    st.intensity = s.at("intensity").get<double>();
    for (const auto& p : s.at("points")) st.points.push_back({p[0].get<double>(), p[1].get<double>()});
    g.strokes.push_back(std::move(st));
  }
  for (const auto& st : j.at("structures"))
    g.structures.push_back({st.at("concept").get<std::string>(), region(st.at("region"))});
  g.foreground = region(j.at("foreground"));
  return g;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                  const std::filesystem::path& concept_set_path) {
  dataset.validate();
  std::filesystem::create_directories(dir);
  const Index n = static_cast<Index>(dataset.size());
  const Shape& img_shape = dataset.samples.front().image.shape();
  Shape stacked{n};
  stacked.insert(stacked.end(), img_shape.begin(), img_shape.end());
  Tensor images(stacked);
  const Index nc = static_cast<Index>(dataset.concepts->size());
  Tensor annotations({n, 2 + nc});
  const Index per = dataset.samples.front().image.size();
  bool has_glyphs = true;
  for (Index i = 0; i < n; ++i) {
    const Sample& s = dataset.samples[static_cast<std::size_t>(i)];
    images.data().segment(i * per, per) = s.image.data();
    annotations(i, 0) = s.class_label;
    annotations(i, 1) = s.source_class;
    annotations.data().segment(i * (2 + nc) + 2, nc) = s.concept_vector;
    has_glyphs = has_glyphs && s.glyph.has_value();
  }
  save_tensor(images, dir / "images.cftn");
  save_tensor(annotations, dir / "annotations.cftn");
  if (has_glyphs) {
    std::ofstream out(dir / "glyphs.jsonl");
    for (const auto& s : dataset.samples) out << glyph_to_json(*s.glyph).dump() << "\n";
  }
  save_concept_set(*dataset.concepts, dir / "concepts.json");
  json manifest{{"split", dataset.split},
                {"count", dataset.size()},
                {"concept_set_path", "concepts.json"},
                {"concept_set_source", concept_set_path.empty() ? std::string()
                                              : std::filesystem::absolute(concept_set_path)
                                                    .lexically_proximate(std::filesystem::absolute(dir))
                                                    .generic_string()}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw IoError("dataset manifest missing in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::parse_error& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  }
  std::filesystem::path cpath = manifest.at("concept_set_path").get<std::string>();
  if (cpath.is_relative()) cpath = dir / cpath;
  auto concepts = std::make_shared<const ConceptSet>(load_concept_set(cpath));
  const Tensor images = load_tensor(dir / "images.cftn");
  const Tensor annotations = load_tensor(dir / "annotations.cftn");
  const Index n = images.dim(0);
  const Index nc = static_cast<Index>(concepts->size());
  if (annotations.shape() != Shape{n, 2 + nc})
    throw DimensionError("annotations shape " + shape_string(annotations.shape()) + " does not match " +
                         std::to_string(n) + " samples x " + std::to_string(nc) + " concepts");
  if (manifest.at("count").get<Index>() != n)
    throw ValidationError("manifest count disagrees with images.cftn in " + dir.string());
  Shape img_shape(images.shape().begin() + 1, images.shape().end());
  const Index per = shape_size(img_shape);
  Dataset ds{{}, concepts, manifest.at("split").get<std::string>()};
  ds.samples.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Sample& s = ds.samples[static_cast<std::size_t>(i)];
    s.image = Tensor(img_shape, images.data().segment(i * per, per));
    s.class_label = static_cast<int>(annotations(i, 0));
    s.source_class = static_cast<int>(annotations(i, 1));
    s.concept_vector = annotations.data().segment(i * (2 + nc) + 2, nc);
  }
  if (std::ifstream gin(dir / "glyphs.jsonl"); gin) {
    std::string line;
    std::size_t i = 0;
    while (std::getline(gin, line) && i < ds.samples.size()) ds.samples[i++].glyph = glyph_from_json(json::parse(line));
  }
  ds.validate();
  return ds;
}

}  // namespace conceptflow
