#include "conceptflow/attention.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "conceptflow/errors.hpp"
#include "conceptflow/tensor_io.hpp"

namespace conceptflow {

using nlohmann::json;

Vector filter_attention(const Checkpoint& ck, const LearningImageCache& cache, const Tensor& image, int layer,
                        int filter) {
  return forward(ck, blend(image, cache.at(layer, filter))).concept_attention;
}

AttentionMatrix attention_matrix(const Checkpoint& ck, const LearningImageCache& cache,
                                 std::span<const Tensor> samples, int layer, int filter,
                                 std::vector<std::size_t> sample_ids) {
  if (samples.size() < 2)
    throw ValidationError("attention_matrix needs at least 2 samples, got " + std::to_string(samples.size()));
  if (sample_ids.empty()) {
    sample_ids.resize(samples.size());
    std::iota(sample_ids.begin(), sample_ids.end(), std::size_t{0});
  }
  if (sample_ids.size() != samples.size()) throw DimensionError("attention_matrix: one sample id per sample");
  const Tensor& li = cache.at(layer, filter).image;

  constexpr std::size_t kChunk = 32;
  AttentionMatrix out{layer, filter, Matrix(ck.config.n_concepts, static_cast<Index>(samples.size())),
                      std::move(sample_ids)};
  std::vector<Tensor> blended;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    blended.clear();
    for (std::size_t s = start; s < std::min(samples.size(), start + kChunk); ++s) blended.push_back(blend(samples[s], li));
    const BatchOutput b = forward_batch(ck, blended);
    out.values.middleCols(static_cast<Index>(start), b.concept_attention.cols()) = b.concept_attention;
  }
  return out;
}

std::vector<int> top_k_concepts(const Eigen::Ref<const Matrix>& a, int k) {
  const int nc = static_cast<int>(a.rows());
  if (k < 1 || k > nc) throw ValidationError("top_k_concepts: k = " + std::to_string(k) + " outside [1, " + std::to_string(nc) + "]");
  if (a.cols() == 0) throw DimensionError("top_k_concepts: attention matrix has no samples");
  const Vector mean = a.rowwise().mean();
  std::vector<int> ids(static_cast<std::size_t>(nc));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int x, int y) { return mean[x] > mean[y]; });
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

InterventionReport intervention_report(const Checkpoint& ck, const LearningImageCache& cache, const Sample& sample,
                                       const Intervention& op, int layer, int filter) {
  const Sample changed = intervene(sample, op);
  InterventionReport r;
  r.before = filter_attention(ck, cache, sample.image, layer, filter);
  r.after = filter_attention(ck, cache, changed.image, layer, filter);
  r.delta = r.after - r.before;
  return r;
}

// ---- store -------------------------------------------------------------------

void AttentionStore::insert(AttentionMatrix a) {
  const auto key = std::make_pair(a.layer, a.filter);
  entries_.insert_or_assign(key, std::move(a));
}

bool AttentionStore::contains(int layer, int filter) const { return entries_.count({layer, filter}) > 0; }

const AttentionMatrix& AttentionStore::at(int layer, int filter) const {
  const auto it = entries_.find({layer, filter});
  if (it == entries_.end())
    throw IndexError("no attention matrix for layer " + std::to_string(layer) + " filter " + std::to_string(filter) +
                     "; run the attend stage first");
  return it->second;
}

std::vector<int> AttentionStore::filters(int layer) const {
  std::vector<int> out;
  for (const auto& [key, a] : entries_)
    if (key.first == layer) out.push_back(key.second);
  return out;
}

std::vector<int> AttentionStore::layers() const {
  std::set<int> ls;
  for (const auto& [key, a] : entries_) ls.insert(key.first);
  return {ls.begin(), ls.end()};
}

std::string attention_csv(const AttentionMatrix& a, const ConceptSet& set) {
  if (a.values.rows() != static_cast<Index>(set.size()))
    throw DimensionError("attention matrix rows do not match the concept set");
  std::ostringstream out;
  out << "concept";
  for (std::size_t id : a.sample_ids) out << ",s" << id;
  out << "\n";
  char buf[32];
  for (Index i = 0; i < a.values.rows(); ++i) {
    const std::string& name = set.name(static_cast<int>(i));
    out << '"' << name << '"';
    for (Index s = 0; s < a.values.cols(); ++s) {
      std::snprintf(buf, sizeof buf, ",%.10g", a.values(i, s));
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

namespace {

std::string stem(int layer, int filter) { return "l" + std::to_string(layer) + "_f" + std::to_string(filter); }

}  // namespace

void AttentionStore::save(const std::filesystem::path& dir, const ConceptSet& set, bool write_csv) const {
  std::filesystem::create_directories(dir);
  json entries = json::array();
  json ids;
  for (const auto& [key, a] : entries_) {
    Tensor t({a.values.rows(), a.values.cols()});
    t.as_matrix() = a.values;
    save_tensor(t, dir / (stem(a.layer, a.filter) + ".cftn"));
    if (write_csv) {
      std::ofstream csv(dir / (stem(a.layer, a.filter) + ".csv"), std::ios::binary);
      csv << attention_csv(a, set);
    }
    entries.push_back({{"layer", a.layer}, {"filter", a.filter}, {"file", stem(a.layer, a.filter) + ".cftn"}});
    if (ids.is_null()) ids = a.sample_ids;
    else if (ids != json(a.sample_ids)) throw ValidationError("attention store mixes different sample sets");
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw IoError("cannot write " + (dir / "index.json").string());
  out << json{{"sample_ids", ids.is_null() ? json::array() : ids}, {"entries", entries}}.dump(1) << "\n";
}

AttentionStore AttentionStore::load(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  std::ifstream in(index_path);
  if (!in) throw IoError("no attention index at " + index_path.string() + "; run the attend stage first");
  AttentionStore store;
  try {
    const json index = json::parse(in);
    const auto ids = index.at("sample_ids").get<std::vector<std::size_t>>();
    for (const auto& e : index.at("entries")) {
      const Tensor t = load_tensor(dir / e.at("file").get<std::string>());
      require_rank(t, 2, "attention matrix");
      if (static_cast<std::size_t>(t.dim(1)) != ids.size())
        throw DimensionError("attention matrix " + e.at("file").get<std::string>() + " has " +
                             std::to_string(t.dim(1)) + " columns, index lists " + std::to_string(ids.size()));
      store.insert({e.at("layer").get<int>(), e.at("filter").get<int>(), Matrix(t.as_matrix()), ids});
    }
  } catch (const json::exception& e) {
    throw ParseError(index_path.string() + ": " + e.what());
  }
  return store;
}

}  // namespace conceptflow
