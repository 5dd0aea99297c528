#include "conceptflow/pathways.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "conceptflow/errors.hpp"
#include "conceptflow/tensor_io.hpp"

namespace conceptflow {

Vector average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Vector ranks(static_cast<Index>(n));
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[static_cast<Index>(order[t])] = avg;
    i = j + 1;
  }
  return ranks;
}

namespace {

// Centred ranks scaled to unit norm; empty when the input is constant.
bool standardized_ranks(std::span<const double> values, Vector& out) {
  out = average_ranks(values);
  out.array() -= out.mean();
  const double norm = out.norm();
  if (norm == 0) return false;
  out /= norm;
  return true;
}

}  // namespace

SpearmanResult spearman(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw DimensionError("spearman: lengths differ (" + std::to_string(u.size()) + " vs " + std::to_string(v.size()) + ")");
  if (u.size() < 2) throw ValidationError("spearman needs at least 2 observations");
  Vector ru, rv;
  if (!standardized_ranks(u, ru) || !standardized_ranks(v, rv)) return {0.0, true};
  return {std::clamp(ru.dot(rv), -1.0, 1.0), false};
}

Matrix spearman_matrix(const Matrix& a_src, const Matrix& a_dst, std::span<const int> k_src,
                       std::span<const int> k_dst) {
  if (a_src.cols() != a_dst.cols())
    throw DimensionError("spearman_matrix: sample counts differ (" + std::to_string(a_src.cols()) + " vs " +
                         std::to_string(a_dst.cols()) + ")");
  if (a_src.rows() != a_dst.rows()) throw DimensionError("spearman_matrix: concept counts differ");
  if (a_src.cols() < 2) throw ValidationError("spearman_matrix needs at least 2 samples");
  const Index nc = a_src.rows();
  auto check = [&](std::span<const int> ids) {
    for (int i : ids)
      if (i < 0 || i >= nc) throw IndexError("spearman_matrix: concept id " + std::to_string(i) + " out of range");
  };
  check(k_src);
  check(k_dst);
  auto row = [](const Matrix& a, int i, std::vector<double>& buf) {
    buf.resize(static_cast<std::size_t>(a.cols()));
    for (Index s = 0; s < a.cols(); ++s) buf[static_cast<std::size_t>(s)] = a(i, s);
    return std::span<const double>(buf);
  };
  std::vector<double> buf;
  std::vector<Vector> zs(k_src.size()), zd(k_dst.size());
  std::vector<bool> oks(k_src.size()), okd(k_dst.size());
  for (std::size_t a = 0; a < k_src.size(); ++a) oks[a] = standardized_ranks(row(a_src, k_src[a], buf), zs[a]);
  for (std::size_t b = 0; b < k_dst.size(); ++b) okd[b] = standardized_ranks(row(a_dst, k_dst[b], buf), zd[b]);
  Matrix p = Matrix::Zero(nc, nc);
  for (std::size_t a = 0; a < k_src.size(); ++a)
    for (std::size_t b = 0; b < k_dst.size(); ++b) {
      if (k_src[a] == k_dst[b] || !oks[a] || !okd[b]) continue;
      p(k_src[a], k_dst[b]) = std::min(1.0, std::abs(zs[a].dot(zd[b])));
    }
  return p;
}

std::vector<ConceptualFlow> extract_flows(const Matrix& p, double tau, const ConceptSet& set) {
  if (!(tau > 0 && tau <= 1)) throw ValidationError("extract_flows: tau must lie in (0, 1]");
  if (p.rows() != static_cast<Index>(set.size()) || p.cols() != p.rows())
    throw DimensionError("extract_flows: matrix is not n_c x n_c for the concept set");
  std::vector<ConceptualFlow> flows;
  for (int i = 0; i < p.rows(); ++i)
    for (int j = 0; j < p.cols(); ++j)
      if (i != j && p(i, j) >= tau) flows.push_back({i, j, p(i, j), set.flow_direction(i, j)});
  std::stable_sort(flows.begin(), flows.end(), [](const ConceptualFlow& a, const ConceptualFlow& b) {
    if (a.strength != b.strength) return a.strength > b.strength;
    if (a.from != b.from) return a.from < b.from;
    return a.to < b.to;
  });
  return flows;
}

const char* to_string(PathwayLabel label) {
  switch (label) {
    case PathwayLabel::None: return "none";
    case PathwayLabel::Forward: return "forward";
    case PathwayLabel::Backward: return "backward";
    case PathwayLabel::Bidirectional: return "bidirectional";
  }
  return "none";
}

PathwayLabel parse_pathway_label(const std::string& text) {
  for (auto l : {PathwayLabel::None, PathwayLabel::Forward, PathwayLabel::Backward, PathwayLabel::Bidirectional})
    if (text == to_string(l)) return l;
  throw ParseError("unknown pathway label '" + text + "'");
}

PathwayLabel classify_pathway(std::span<const ConceptualFlow> flows) {
  bool fwd = false, bwd = false;
  for (const auto& f : flows) (f.direction == FlowDirection::Forward ? fwd : bwd) = true;
  if (fwd && bwd) return PathwayLabel::Bidirectional;
  if (fwd) return PathwayLabel::Forward;
  if (bwd) return PathwayLabel::Backward;
  return PathwayLabel::None;
}

PathwayLabel PathwayRecord::label_at(double tau, const ConceptSet& set) const {
  return classify_pathway(extract_flows(p, tau, set));
}

std::vector<PathwayRecord> layer_pathways(const AttentionStore& store, const ConceptSet& set, int layer, int k,
                                          double tau, std::span<const Index> columns) {
  const auto src_filters = store.filters(layer);
  const auto dst_filters = store.filters(layer + 1);
  if (src_filters.empty() || dst_filters.empty())
    throw IndexError("no attention data for layers " + std::to_string(layer) + " and " + std::to_string(layer + 1) +
                     "; run the attend stage first");
  auto view = [&](const AttentionMatrix& a) {
    if (columns.empty()) return a.values;
    Matrix sub(a.values.rows(), static_cast<Index>(columns.size()));
    for (std::size_t c = 0; c < columns.size(); ++c) sub.col(static_cast<Index>(c)) = a.values.col(columns[c]);
    return sub;
  };

  // Ranks are computed once per (filter, concept) row and reused for every pair.
  struct Prepared {
    std::vector<int> top;
    std::vector<Vector> z;
    std::vector<bool> ok;
  };
  auto prepare = [&](int l, int f) {
    const Matrix a = view(store.at(l, f));
    if (a.cols() < 2) throw ValidationError("layer_pathways needs at least 2 probe samples");
    Prepared p{top_k_concepts(a, k), {}, {}};
    std::vector<double> buf(static_cast<std::size_t>(a.cols()));
    for (int id : p.top) {
      for (Index s = 0; s < a.cols(); ++s) buf[static_cast<std::size_t>(s)] = a(id, s);
      Vector z;
      p.ok.push_back(standardized_ranks(buf, z));
      p.z.push_back(std::move(z));
    }
    return p;
  };
  std::vector<Prepared> src, dst;
  for (int m : src_filters) src.push_back(prepare(layer, m));
  for (int n : dst_filters) dst.push_back(prepare(layer + 1, n));

  const Index nc = static_cast<Index>(set.size());
  std::vector<PathwayRecord> out;
  out.reserve(src.size() * dst.size());
  for (std::size_t a = 0; a < src.size(); ++a) {
    for (std::size_t b = 0; b < dst.size(); ++b) {
      PathwayRecord r;
      r.layer = layer;
      r.src = src_filters[a];
      r.dst = dst_filters[b];
      r.top_src = src[a].top;
      r.top_dst = dst[b].top;
      r.p = Matrix::Zero(nc, nc);
      for (std::size_t i = 0; i < r.top_src.size(); ++i)
        for (std::size_t j = 0; j < r.top_dst.size(); ++j) {
          if (r.top_src[i] == r.top_dst[j] || !src[a].ok[i] || !dst[b].ok[j]) continue;
          r.p(r.top_src[i], r.top_dst[j]) = std::min(1.0, std::abs(src[a].z[i].dot(dst[b].z[j])));
        }
      r.flows = extract_flows(r.p, tau, set);
      r.label = classify_pathway(r.flows);
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::string pathway_jsonl(std::span<const PathwayRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json flows = nlohmann::ordered_json::array();
    for (const auto& f : r.flows)
      flows.push_back({{"from", f.from}, {"to", f.to}, {"strength", f.strength},
                       {"dir", to_string(f.direction)}});
    const nlohmann::ordered_json j{{"layer", r.layer}, {"m", r.src}, {"n", r.dst}, {"label", to_string(r.label)},
                                   {"flows", flows}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace conceptflow

namespace conceptflow {

namespace {

std::string boundary_stem(int layer) { return "b" + std::to_string(layer); }

}  // namespace

void save_pathway_records(const std::filesystem::path& dir, std::span<const PathwayRecord> records) {
  std::filesystem::create_directories(dir);
  std::map<int, std::vector<const PathwayRecord*>> by_layer;
  for (const auto& r : records) by_layer[r.layer].push_back(&r);
  for (const auto& [layer, recs] : by_layer) {
    std::map<int, std::vector<int>> src_top, dst_top;
    for (const auto* r : recs) {
      src_top[r->src] = r->top_src;
      dst_top[r->dst] = r->top_dst;
    }
    const Index cm = static_cast<Index>(src_top.size()), cn = static_cast<Index>(dst_top.size());
    if (static_cast<Index>(recs.size()) != cm * cn)
      throw ValidationError("save_pathway_records: boundary " + std::to_string(layer) + " is not a full filter grid");
    const Index nc = recs.front()->p.rows();
    Tensor t({cm, cn, nc, nc});
    std::map<int, Index> src_pos, dst_pos;
    for (const auto& [m, top] : src_top) src_pos.emplace(m, static_cast<Index>(src_pos.size()));
    for (const auto& [n, top] : dst_top) dst_pos.emplace(n, static_cast<Index>(dst_pos.size()));
    for (const auto* r : recs) {
      const Index base = ((src_pos.at(r->src) * cn) + dst_pos.at(r->dst)) * nc * nc;
      for (Index i = 0; i < nc; ++i)
        for (Index j = 0; j < nc; ++j) t.raw()[base + i * nc + j] = r->p(i, j);
    }
    save_tensor(t, dir / (boundary_stem(layer) + "_spearman.cftn"));
    nlohmann::ordered_json j;
    j["layer"] = layer;
    nlohmann::ordered_json src = nlohmann::ordered_json::object(), dst = nlohmann::ordered_json::object();
    for (const auto& [m, top] : src_top) src[std::to_string(m)] = top;
    for (const auto& [n, top] : dst_top) dst[std::to_string(n)] = top;
    j["src_top_k"] = src;
    j["dst_top_k"] = dst;
    std::ofstream out(dir / (boundary_stem(layer) + "_topk.json"), std::ios::binary);
    if (!out) throw IoError("cannot write top-k sets to " + dir.string());
    out << j.dump() << "\n";
  }
}

std::vector<PathwayRecord> load_pathway_records(const std::filesystem::path& dir, const ConceptSet& set, double tau) {
  std::vector<PathwayRecord> out;
  for (int layer = 1;; ++layer) {
    const auto tensor_path = dir / (boundary_stem(layer) + "_spearman.cftn");
    if (!std::filesystem::exists(tensor_path)) break;
    std::ifstream in(dir / (boundary_stem(layer) + "_topk.json"));
    if (!in) throw IoError("missing top-k sets for boundary " + std::to_string(layer) + " in " + dir.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(dir.string() + ": corrupt top-k file: " + e.what());
    }
    auto read_tops = [](const nlohmann::json& obj) {
      std::map<int, std::vector<int>> tops;
      for (const auto& [key, value] : obj.items()) tops[std::stoi(key)] = value.get<std::vector<int>>();
      return tops;
    };
    const auto src_top = read_tops(j.at("src_top_k"));
    const auto dst_top = read_tops(j.at("dst_top_k"));
    const Tensor t = load_tensor(tensor_path);
    const Index nc = static_cast<Index>(set.size());
    if (t.rank() != 4 || t.dim(0) != static_cast<Index>(src_top.size()) ||
        t.dim(1) != static_cast<Index>(dst_top.size()) || t.dim(2) != nc || t.dim(3) != nc)
      throw DimensionError(tensor_path.string() + ": shape " + shape_string(t.shape()) +
                           " does not match the top-k sets and concept set");
    Index a = 0;
    for (const auto& [m, stop] : src_top) {
      Index b = 0;
      for (const auto& [n, dtop] : dst_top) {
        PathwayRecord r;
        r.layer = layer;
        r.src = m;
        r.dst = n;
        r.top_src = stop;
        r.top_dst = dtop;
        r.p.resize(nc, nc);
        const Index base = (a * t.dim(1) + b) * nc * nc;
        for (Index i = 0; i < nc; ++i)
          for (Index jj = 0; jj < nc; ++jj) r.p(i, jj) = t.raw()[base + i * nc + jj];
        r.flows = extract_flows(r.p, tau, set);
        r.label = classify_pathway(r.flows);
        out.push_back(std::move(r));
        ++b;
      }
      ++a;
    }
  }
  if (out.empty()) throw IoError("no pathway data in " + dir.string() + "; run the pathways stage first");
  return out;
}

}  // namespace conceptflow
