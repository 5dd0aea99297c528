#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "conceptflow/attention.hpp"
#include "conceptflow/backbone.hpp"
#include "conceptflow/concepts.hpp"
#include "conceptflow/dataset.hpp"
#include "conceptflow/errors.hpp"
#include "conceptflow/manifest.hpp"
#include "conceptflow/pathways.hpp"
#include "conceptflow/pruning.hpp"
#include "conceptflow/report.hpp"
#include "conceptflow/scanner.hpp"
#include "conceptflow/transition.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace conceptflow;

namespace {

// ---- pipeline configuration ------------------------------------------------

struct DataSection {
  std::string source = "glyphs";  // glyphs | idx
  std::size_t train = 8000;
  std::size_t val = 2000;
  std::size_t test = 1000;
  std::size_t intervene = 50;
  std::string train_images, train_labels, test_images, test_labels, class_table;
};

struct PipelineConfig {
  std::string concepts = "cmnist-analog";
  DataSection data;
  ModelConfig model;
  ScanParams scan;
  std::size_t probe_samples = 512;
  double intervention_gain = 0.5;
  int top_n = 7;
  int k = 7;
  double tau = 0.8;
  std::vector<double> tau_grid{0.6, 0.7, 0.8, 0.9};
  double epsilon = kDefaultEpsilon;
  int prototypes = 8;
  int max_iter = 300;
  std::vector<double> prune_tau_grid{0.9, 0.8, 0.7, 0.6};
  std::string eval_split = "test";
};

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <class T>
void read_key(const nlohmann::json& obj, const char* key, T& field, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    field = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "." + key + ": " + e.what());
  }
}

void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, value] : obj.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ValidationError(where + ": unknown key \"" + key + "\"");
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  PipelineConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  const std::string w = path.string();
  reject_unknown(j, {"concepts", "data", "model", "scan", "attend", "pathways", "transition", "prune", "census"}, w);
  const fs::path base = path.parent_path();
  read_key(j, "concepts", cfg.concepts, w);
  if (cfg.concepts != "cmnist-analog" && cfg.concepts != "cawa-analog")
    cfg.concepts = resolve(base, cfg.concepts).string();
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"source", "train", "val", "test", "intervene", "train_images", "train_labels", "test_images",
                       "test_labels", "class_table"},
                   w + ".data");
    read_key(d, "source", cfg.data.source, w + ".data");
    read_key(d, "train", cfg.data.train, w + ".data");
    read_key(d, "val", cfg.data.val, w + ".data");
    read_key(d, "test", cfg.data.test, w + ".data");
    read_key(d, "intervene", cfg.data.intervene, w + ".data");
    for (auto [key, field] : {std::pair{"train_images", &cfg.data.train_images},
                              std::pair{"train_labels", &cfg.data.train_labels},
                              std::pair{"test_images", &cfg.data.test_images},
                              std::pair{"test_labels", &cfg.data.test_labels},
                              std::pair{"class_table", &cfg.data.class_table}}) {
      read_key(d, key, *field, w + ".data");
      *field = resolve(base, *field).string();
    }
  }
  if (j.contains("model")) cfg.model = ModelConfig::from_json(j["model"].dump());
  if (j.contains("scan")) {
    const auto& s = j["scan"];
    reject_unknown(s, {"steps", "step_size", "l2_decay", "init_amplitude"}, w + ".scan");
    read_key(s, "steps", cfg.scan.steps, w + ".scan");
    read_key(s, "step_size", cfg.scan.step_size, w + ".scan");
    read_key(s, "l2_decay", cfg.scan.l2_decay, w + ".scan");
    read_key(s, "init_amplitude", cfg.scan.init_amplitude, w + ".scan");
  }
  if (j.contains("attend")) {
    const auto& a = j["attend"];
    reject_unknown(a, {"probe_samples", "intervention_gain", "top_n"}, w + ".attend");
    read_key(a, "probe_samples", cfg.probe_samples, w + ".attend");
    read_key(a, "intervention_gain", cfg.intervention_gain, w + ".attend");
    read_key(a, "top_n", cfg.top_n, w + ".attend");
  }
  if (j.contains("pathways")) {
    const auto& p = j["pathways"];
    reject_unknown(p, {"k", "tau"}, w + ".pathways");
    read_key(p, "k", cfg.k, w + ".pathways");
    read_key(p, "tau", cfg.tau, w + ".pathways");
  }
  if (j.contains("transition")) {
    const auto& t = j["transition"];
    reject_unknown(t, {"epsilon", "prototypes", "max_iter"}, w + ".transition");
    read_key(t, "epsilon", cfg.epsilon, w + ".transition");
    read_key(t, "prototypes", cfg.prototypes, w + ".transition");
    read_key(t, "max_iter", cfg.max_iter, w + ".transition");
  }
  if (j.contains("prune")) {
    const auto& p = j["prune"];
    reject_unknown(p, {"tau_grid", "eval_split"}, w + ".prune");
    read_key(p, "tau_grid", cfg.prune_tau_grid, w + ".prune");
    read_key(p, "eval_split", cfg.eval_split, w + ".prune");
  }
  if (j.contains("census")) {
    const auto& c = j["census"];
    reject_unknown(c, {"tau_grid"}, w + ".census");
    read_key(c, "tau_grid", cfg.tau_grid, w + ".census");
  }
  return cfg;
}

std::shared_ptr<const ConceptSet> concept_set_for(const PipelineConfig& cfg) {
  if (cfg.concepts == "cmnist-analog") return std::make_shared<const ConceptSet>(bundled_cmnist_concepts());
  if (cfg.concepts == "cawa-analog") return std::make_shared<const ConceptSet>(bundled_cawa_concepts());
  return std::make_shared<const ConceptSet>(load_concept_set(cfg.concepts));
}

// ---- stage plumbing ----------------------------------------------------------

struct Context {
  PipelineConfig cfg;
  std::uint64_t seed = 0;
  fs::path out_root;
  fs::path from_root;
  std::vector<std::string> argv;  // canonical, replayable
  std::string stage;
  RunManifest manifest;

  fs::path stage_dir() const { return out_root / stage; }
  fs::path upstream(const std::string& name) const { return from_root / name; }
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string dump_json(const ordered_json& j) { return j.dump(2) + "\n"; }

// Records an upstream stage as an input, checking that it ran.
fs::path require_stage(Context& ctx, const std::string& name) {
  const fs::path dir = ctx.upstream(name);
  const fs::path m = dir / "manifest.json";
  if (!fs::exists(m)) throw IoError("missing " + m.string() + "; run the " + name + " stage first");
  const RunManifest up = RunManifest::load(m);
  ctx.manifest.inputs[name] = fs::absolute(dir).lexically_normal().string();
  ctx.manifest.input_hashes[name] = up.config_hash;
  return dir;
}

void begin_stage(Context& ctx) {
  ctx.manifest.stage = ctx.stage;
  ctx.manifest.seed = ctx.seed;
  ctx.manifest.argv = ctx.argv;
  ctx.manifest.started = timestamp_now();
  const fs::path dir = ctx.stage_dir();
  const fs::path from_dir = ctx.upstream(ctx.stage);
  if (fs::exists(dir)) {
    if (fs::equivalent(ctx.out_root, ctx.from_root) || !fs::exists(from_dir) || !fs::equivalent(dir, from_dir))
      fs::remove_all(dir);
    else
      throw ValidationError("refusing to overwrite " + dir.string() + ", which is also the input root");
  }
  fs::create_directories(dir);
}

void finish_stage(Context& ctx) {
  const fs::path dir = ctx.stage_dir();
  std::vector<std::string> outputs;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      std::string rel = fs::relative(e.path(), dir).generic_string();
      if (rel != "manifest.json") outputs.push_back(std::move(rel));
    }
  std::sort(outputs.begin(), outputs.end());
  ctx.manifest.outputs = std::move(outputs);
  ctx.manifest.output_dir = fs::absolute(dir).lexically_normal().string();
  ctx.manifest.config_hash = ctx.manifest.compute_hash();
  ctx.manifest.finished = timestamp_now();
  ctx.manifest.save(dir);
}

ordered_json grid_json(const std::vector<double>& grid) { return ordered_json(grid); }

Dataset load_split(Context& ctx, const std::string& split) {
  const fs::path dir = require_stage(ctx, "gen-data") / split;
  return load_dataset(dir);
}

Checkpoint load_trained(Context& ctx) { return load_checkpoint(require_stage(ctx, "train") / "checkpoint.cfck"); }

std::vector<int> read_probe_labels(const fs::path& attend_dir) {
  std::ifstream in(attend_dir / "probe.json");
  if (!in) throw IoError("missing probe.json in " + attend_dir.string());
  const auto j = nlohmann::json::parse(in);
  return j.at("class_labels").get<std::vector<int>>();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// ---- stages ---------------------------------------------------------------------

void stage_gen_data(Context& ctx) {
  const auto& d = ctx.cfg.data;
  auto set = concept_set_for(ctx.cfg);
  const fs::path dir = ctx.stage_dir();
  save_concept_set(*set, dir / "concepts.json");
  ctx.manifest.params = {{"concepts", ctx.cfg.concepts}, {"source", d.source},   {"train", d.train},
                         {"val", d.val},                 {"test", d.test},       {"intervene", d.intervene}};
  std::map<std::string, std::size_t> counts{{"train", d.train}, {"val", d.val}, {"test", d.test}};
  if (d.source == "glyphs") {
    counts["intervene"] = d.intervene;
    for (const auto& [split, n] : counts) save_dataset(generate_glyphs(n, ctx.seed, set, split), dir / split, dir / "concepts.json");
  } else if (d.source == "idx") {
    if (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() || d.test_labels.empty() ||
        d.class_table.empty())
      throw ValidationError("idx source needs data.train_images, train_labels, test_images, test_labels, class_table");
    const auto table = load_class_table(d.class_table, *set);
    ctx.manifest.params["class_table"] = d.class_table;
    ctx.manifest.inputs["train_images"] = d.train_images;
    ctx.manifest.inputs["test_images"] = d.test_images;
    const IdxData train = load_idx(d.train_images, d.train_labels);
    const IdxData test = load_idx(d.test_images, d.test_labels);
    if (train.images.size() < d.train + d.val)
      throw ValidationError("idx training file holds " + std::to_string(train.images.size()) + " images, need " +
                            std::to_string(d.train + d.val));
    auto slice = [](const IdxData& src, std::size_t from, std::size_t n) {
      IdxData out;
      n = std::min(n, src.images.size() - from);
      out.images.assign(src.images.begin() + static_cast<std::ptrdiff_t>(from),
                        src.images.begin() + static_cast<std::ptrdiff_t>(from + n));
      out.labels.assign(src.labels.begin() + static_cast<std::ptrdiff_t>(from),
                        src.labels.begin() + static_cast<std::ptrdiff_t>(from + n));
      return out;
    };
    save_dataset(dataset_from_idx(slice(train, 0, d.train), table, set, "train"), dir / "train", dir / "concepts.json");
    save_dataset(dataset_from_idx(slice(train, d.train, d.val), table, set, "val"), dir / "val", dir / "concepts.json");
    save_dataset(dataset_from_idx(slice(test, 0, d.test), table, set, "test"), dir / "test", dir / "concepts.json");
  } else {
    throw ValidationError("data.source must be glyphs or idx, got " + d.source);
  }
}

void stage_train(Context& ctx) {
  ModelConfig mc = ctx.cfg.model;
  mc.seed = ctx.seed;
  const Dataset train_set = load_split(ctx, "train");
  const Dataset val_set = load_split(ctx, "val");
  mc.n_concepts = static_cast<int>(train_set.concepts->size());
  const Shape s = train_set.samples.front().image.shape();
  mc.input_channels = static_cast<int>(s[0]);
  mc.input_height = static_cast<int>(s[1]);
  mc.input_width = static_cast<int>(s[2]);
  mc.validate();
  ctx.manifest.params = ordered_json::parse(mc.to_json());
  const Checkpoint ck = train(mc, train_set, val_set, [](const EpochMetrics& m) {
    std::cerr << "epoch " << m.epoch << " loss " << m.train_loss << " train_acc " << m.train_accuracy << " val_acc "
              << m.val_accuracy << "\n";
  });
  const fs::path dir = ctx.stage_dir();
  save_checkpoint(ck, dir / "checkpoint.cfck");
  ordered_json epochs = ordered_json::array();
  for (const auto& e : ck.meta.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_accuracy", e.val_accuracy}});
  write_text(dir / "metrics.json", dump_json({{"seed", ctx.seed},
                                              {"train_accuracy", ck.meta.final_train_accuracy},
                                              {"val_accuracy", ck.meta.final_val_accuracy},
                                              {"epochs", epochs}}));
}

void stage_scan(Context& ctx, const std::vector<int>& only_layers) {
  const Checkpoint ck = load_trained(ctx);
  ScanParams sp = ctx.cfg.scan;
  sp.seed = ctx.seed;
  sp.validate();
  std::vector<int> layers = only_layers;
  if (layers.empty())
    for (int l = 1; l <= ck.config.layer_count(); ++l) layers.push_back(l);
  ctx.manifest.params = {{"steps", sp.steps},
                         {"step_size", sp.step_size},
                         {"l2_decay", sp.l2_decay},
                         {"init_amplitude", sp.init_amplitude},
                         {"layers", layers}};
  LearningImageCache cache;
  std::ostringstream csv;
  csv << "layer,filter,initial_activation,activation\n";
  for (int l : layers) {
    if (l < 1 || l > ck.config.layer_count())
      throw ValidationError("scan: layer " + std::to_string(l) + " outside 1.." + std::to_string(ck.config.layer_count()));
    for (auto& li : scan_layer(ck, l, sp)) {
      csv << li.layer << ',' << li.filter << ',' << fmt(li.initial_activation) << ',' << fmt(li.activation) << '\n';
      cache.insert(std::move(li));
    }
    std::cerr << "scanned layer " << l << "\n";
  }
  cache.save(ctx.stage_dir(), sp);
  write_text(ctx.stage_dir() / "activations.csv", csv.str());
}

void stage_attend(Context& ctx, std::optional<int> probe_class, bool write_csv) {
  const Checkpoint ck = load_trained(ctx);
  const LearningImageCache cache = LearningImageCache::load(require_stage(ctx, "scan"));
  const Dataset pool = load_split(ctx, "val");
  const ConceptSet& set = *pool.concepts;
  ctx.manifest.params = {{"probe_samples", ctx.cfg.probe_samples},
                         {"probe_class", probe_class ? ordered_json(*probe_class) : ordered_json(nullptr)},
                         {"intervention_gain", ctx.cfg.intervention_gain},
                         {"top_n", ctx.cfg.top_n},
                         {"write_csv", write_csv}};

  std::vector<std::size_t> ids;
  if (probe_class) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (pool.samples[i].class_label == *probe_class) members.push_back(i);
    if (members.size() < 2) throw ValidationError("probe class " + std::to_string(*probe_class) + " has fewer than 2 samples");
    const Dataset sub = pool.subset(members);
    for (std::size_t i : importance_resample(sub, ctx.seed, ctx.cfg.probe_samples)) ids.push_back(members[i]);
  } else {
    ids = importance_resample(pool, ctx.seed, ctx.cfg.probe_samples);
  }
  std::vector<Tensor> probe;
  std::vector<int> labels;
  for (std::size_t i : ids) {
    probe.push_back(pool.samples[i].image);
    labels.push_back(pool.samples[i].class_label);
  }
  const fs::path dir = ctx.stage_dir();
  write_text(dir / "probe.json", dump_json({{"split", "val"}, {"sample_ids", ids}, {"class_labels", labels}}));

  AttentionStore store;
  for (int l : cache.layers())
    for (int m : cache.filters(l)) store.insert(attention_matrix(ck, cache, probe, l, m, ids));
  store.save(dir, set, write_csv);

  // Per-filter summaries: top concepts and mass by level.
  std::ostringstream top_csv, mass_csv;
  top_csv << "layer,filter,rank,concept,mean_attention\n";
  mass_csv << "layer,filter";
  for (int lv = 1; lv <= set.level_count(); ++lv) mass_csv << ",level" << lv;
  mass_csv << '\n';
  const int top_n = std::min<int>(ctx.cfg.top_n, static_cast<int>(set.size()));
  for (const auto& [key, a] : store) {
    const Vector mean = a.values.rowwise().mean();
    const auto top = top_k_concepts(a.values, top_n);
    for (int r = 0; r < top_n; ++r)
      top_csv << a.layer << ',' << a.filter << ',' << r + 1 << ',' << set.name(top[r]) << ',' << fmt(mean[top[r]]) << '\n';
    mass_csv << a.layer << ',' << a.filter;
    for (int lv = 1; lv <= set.level_count(); ++lv) mass_csv << ',' << fmt(level_mass(mean, set, lv));
    mass_csv << '\n';
  }
  write_text(dir / "top_concepts.csv", top_csv.str());
  write_text(dir / "level_mass.csv", mass_csv.str());

  // Interventions on the held-out glyphs: the model's concept attention before
  // and after masking the whole foreground and enhancing one structure region.
  const fs::path glyph_dir = ctx.upstream("gen-data") / "intervene";
  if (!fs::exists(glyph_dir)) return;
  const Dataset glyphs = load_dataset(glyph_dir);
  std::ostringstream icsv;
  icsv << "sample,operation,concept,before,after\n";
  for (std::size_t i = 0; i < glyphs.size(); ++i) {
    const Sample& s = glyphs.samples[i];
    if (!s.glyph) continue;
    const Vector before = forward(ck, s.image).concept_attention;
    const int ident = set.id_of(digit_identity_name(s.glyph->digit));
    const Vector masked = forward(ck, intervene(s, Mask{s.glyph->foreground}).image).concept_attention;
    icsv << i << ",mask," << set.name(ident) << ',' << fmt(before[ident]) << ',' << fmt(masked[ident]) << '\n';
    std::optional<Vector> enhanced_view;
    for (const auto& st : s.glyph->structures) {
      const int c = set.id_of(st.concept_name);
      if (set.level(c) != 2) continue;
      const Vector enhanced = forward(ck, intervene(s, Enhance{st.region, ctx.cfg.intervention_gain}).image).concept_attention;
      icsv << i << ",enhance," << set.name(c) << ',' << fmt(before[c]) << ',' << fmt(enhanced[c]) << '\n';
      if (!enhanced_view) enhanced_view = enhanced;
      break;
    }
    if (i == 0) {
      write_text(dir / "intervention_before.svg", render_attention_bars(before, set, top_n, "sample 0, original"));
      write_text(dir / "intervention_mask.svg", render_attention_bars(masked, set, top_n, "sample 0, foreground masked"));
      if (enhanced_view)
        write_text(dir / "intervention_enhance.svg",
                   render_attention_bars(*enhanced_view, set, top_n, "sample 0, structure enhanced"));
    }
  }
  write_text(dir / "interventions.csv", icsv.str());
}

void stage_pathways(Context& ctx, int k, double tau) {
  const fs::path attend_dir = require_stage(ctx, "attend");
  const AttentionStore store = AttentionStore::load(attend_dir);
  const auto set = concept_set_for(ctx.cfg);
  if (k < 1 || k > static_cast<int>(set->size()))
    throw ValidationError("--k must lie in [1, " + std::to_string(set->size()) + "], got " + std::to_string(k));
  ctx.manifest.params = {{"k", k}, {"tau", tau}};
  std::vector<PathwayRecord> all;
  const auto layers = store.layers();
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    if (layers[i + 1] != layers[i] + 1) continue;
    auto recs = layer_pathways(store, *set, layers[i], k, tau);
    all.insert(all.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  if (all.empty()) throw ValidationError("pathways need attentions for at least two adjacent layers");
  const fs::path dir = ctx.stage_dir();
  save_pathway_records(dir, all);
  write_text(dir / "pathways.jsonl", pathway_jsonl(all));
  std::map<int, std::map<std::string, std::size_t>> counts;
  for (const auto& r : all) ++counts[r.layer][to_string(r.label)];
  ordered_json summary = ordered_json::array();
  for (const auto& [layer, c] : counts) {
    ordered_json row{{"layer", layer}};
    for (auto label : {PathwayLabel::None, PathwayLabel::Forward, PathwayLabel::Backward, PathwayLabel::Bidirectional})
      row[to_string(label)] = c.contains(to_string(label)) ? c.at(to_string(label)) : 0;
    summary.push_back(row);
  }
  write_text(dir / "summary.json", dump_json({{"k", k}, {"tau", tau}, {"boundaries", summary}}));
}

std::vector<PathwayRecord> load_records(Context& ctx, const ConceptSet& set, double tau) {
  return load_pathway_records(require_stage(ctx, "pathways"), set, tau);
}

double pathways_tau(const Context& ctx) {
  std::ifstream in(ctx.upstream("pathways") / "summary.json");
  if (!in) return ctx.cfg.tau;
  return nlohmann::json::parse(in).at("tau").get<double>();
}

std::map<int, std::vector<Matrix>> transition_by_boundary(std::span<const PathwayRecord> recs, double eps) {
  std::map<int, std::vector<Matrix>> out;
  for (const auto& r : recs) out[r.layer].push_back(transition_matrix(r.p, eps));
  return out;
}

void stage_prototypes(Context& ctx, int clusters, int max_iter) {
  const auto set = concept_set_for(ctx.cfg);
  const fs::path attend_dir = require_stage(ctx, "attend");
  const fs::path pathways_dir = require_stage(ctx, "pathways");
  std::ifstream sin(pathways_dir / "summary.json");
  const auto summary = nlohmann::json::parse(sin);
  const int k = summary.at("k").get<int>();
  const double tau = summary.at("tau").get<double>();
  ctx.manifest.params = {{"clusters", clusters}, {"max_iter", max_iter}, {"epsilon", ctx.cfg.epsilon}, {"k", k}};

  const AttentionStore store = AttentionStore::load(attend_dir);
  const auto labels = read_probe_labels(attend_dir);
  std::map<std::string, std::vector<Index>> groups{{"all", {}}};
  for (std::size_t s = 0; s < labels.size(); ++s)
    groups["class" + std::to_string(labels[s])].push_back(static_cast<Index>(s));

  const fs::path dir = ctx.stage_dir();
  ordered_json index = ordered_json::array();
  const auto layers = store.layers();
  for (const auto& [group, cols] : groups) {
    if (group != "all" && cols.size() < 2) continue;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      if (layers[i + 1] != layers[i] + 1) continue;
      const int layer = layers[i];
      std::vector<PathwayRecord> recs;
      if (group == "all") {
        recs = load_pathway_records(pathways_dir, *set, tau);
        std::erase_if(recs, [&](const PathwayRecord& r) { return r.layer != layer; });
      } else {
        recs = layer_pathways(store, *set, layer, k, tau, cols);
      }
      std::vector<Matrix> ts;
      for (const auto& r : recs) ts.push_back(transition_matrix(r.p, ctx.cfg.epsilon));
      const int kc = std::min<int>(clusters, static_cast<int>(ts.size()));
      const PrototypeSet protos = cluster_prototypes(ts, kc, ctx.seed, max_iter);
      std::vector<std::size_t> sizes(protos.centers.size(), 0);
      ordered_json members = ordered_json::array();
      for (std::size_t t = 0; t < recs.size(); ++t) {
        const int a = protos.assignment[t];
        ++sizes[static_cast<std::size_t>(a)];
        members.push_back({{"m", recs[t].src}, {"n", recs[t].dst}, {"prototype", a}});
      }
      const std::string assignment_file = group + "_b" + std::to_string(layer) + "_assignment.json";
      write_text(dir / assignment_file, dump_json({{"group", group}, {"layer", layer}, {"assignment", members}}));
      for (std::size_t c = 0; c < protos.centers.size(); ++c) {
        const std::string stem = group + "_b" + std::to_string(layer) + "_p" + std::to_string(c);
        write_text(dir / (stem + ".csv"), matrix_csv(protos.centers[c], *set));
        write_text(dir / (stem + ".svg"),
                   render_heatmap(protos.centers[c], *set,
                                  group + ", layers " + std::to_string(layer) + "-" + std::to_string(layer + 1) +
                                      ", prototype " + std::to_string(c) + " (" + std::to_string(sizes[c]) + ")"));
      }
      index.push_back({{"group", group},
                       {"layer", layer},
                       {"matrices", ts.size()},
                       {"inertia", protos.inertia},
                       {"iterations", protos.iterations},
                       {"sizes", sizes},
                       {"assignment", assignment_file}});
    }
  }
  write_text(dir / "prototypes.json", dump_json(index));
}

void stage_transition_mass(Context& ctx) {
  const auto set = concept_set_for(ctx.cfg);
  const double tau = pathways_tau(ctx);
  const auto recs = load_records(ctx, *set, tau);
  ctx.manifest.params = {{"epsilon", ctx.cfg.epsilon}, {"tau_eff", default_tau_eff(static_cast<Index>(set->size()))}};
  const auto by_boundary = transition_by_boundary(recs, ctx.cfg.epsilon);
  std::vector<std::vector<Matrix>> per;
  std::vector<int> boundaries;
  for (const auto& [layer, ts] : by_boundary) {
    boundaries.push_back(layer);
    per.push_back(ts);
  }
  const auto mass = average_transition_mass(per);
  std::ostringstream csv, lcsv;
  csv << "boundary,concept,level,mass\n";
  lcsv << "boundary";
  for (int lv = 1; lv <= set->level_count(); ++lv) lcsv << ",level" << lv;
  lcsv << '\n';
  std::vector<std::string> cats;
  std::vector<Series> series;
  for (int lv = 1; lv <= set->level_count(); ++lv) series.push_back({"level " + std::to_string(lv), {}});
  for (std::size_t b = 0; b < boundaries.size(); ++b) {
    for (Index c = 0; c < mass[b].size(); ++c)
      csv << boundaries[b] << ',' << set->name(static_cast<int>(c)) << ',' << set->level(static_cast<int>(c)) << ','
          << fmt(mass[b][c]) << '\n';
    lcsv << boundaries[b];
    for (int lv = 1; lv <= set->level_count(); ++lv) {
      const double m = level_mass(mass[b], *set, lv);
      lcsv << ',' << fmt(m);
      series[static_cast<std::size_t>(lv - 1)].values.push_back(m);
    }
    lcsv << '\n';
    cats.push_back("layers " + std::to_string(boundaries[b]) + "-" + std::to_string(boundaries[b] + 1));
  }
  const fs::path dir = ctx.stage_dir();
  write_text(dir / "mass.csv", csv.str());
  write_text(dir / "level_mass.csv", lcsv.str());
  write_text(dir / "level_mass.svg", render_grouped_bars(cats, series, "average transition mass by concept level"));

  const double tau_eff = default_tau_eff(static_cast<Index>(set->size()));
  std::size_t checked = 0, violations = 0;
  double worst_row = 0;
  ordered_json examples = ordered_json::array();
  for (const auto& r : recs) {
    const Matrix t = transition_matrix(r.p, ctx.cfg.epsilon);
    worst_row = std::max(worst_row, (t.rowwise().sum().array() - 1.0).abs().maxCoeff());
    const auto v = check_faithfulness(t, r.top_src, r.top_dst, tau_eff);
    ++checked;
    violations += v.size();
    for (const auto& x : v)
      if (examples.size() < 20)
        examples.push_back({{"layer", r.layer}, {"m", r.src}, {"n", r.dst}, {"from", x.from}, {"to", x.to}, {"value", x.value}});
  }
  write_text(dir / "faithfulness.json", dump_json({{"tau_eff", tau_eff},
                                                   {"matrices", checked},
                                                   {"violations", violations},
                                                   {"max_row_sum_error", worst_row},
                                                   {"examples", examples}}));
}

void stage_spectral(Context& ctx) {
  const auto set = concept_set_for(ctx.cfg);
  const auto recs = load_records(ctx, *set, pathways_tau(ctx));
  ctx.manifest.params = {{"epsilon", ctx.cfg.epsilon}};
  std::ostringstream csv;
  csv << "layer,m,n,lambda1,lambda2,non_dominant_radius\n";
  double max_modulus = 0, worst_dominant = 0;
  ordered_json report = ordered_json::array();
  for (const auto& r : recs) {
    const auto s = spectral(transition_matrix(r.p, ctx.cfg.epsilon));
    const std::vector<double> top(s.moduli.begin(), s.moduli.begin() + std::min<std::ptrdiff_t>(3, std::ssize(s.moduli)));
    report.push_back({{"layer", r.layer}, {"pair", {r.src, r.dst}}, {"moduli", top},
                      {"non_dominant_radius", s.non_dominant_radius}});
    csv << r.layer << ',' << r.src << ',' << r.dst << ',' << fmt(s.moduli[0]) << ','
        << fmt(s.moduli.size() > 1 ? s.moduli[1] : 0.0) << ',' << fmt(s.non_dominant_radius) << '\n';
    max_modulus = std::max(max_modulus, s.moduli[0]);
    worst_dominant = std::max(worst_dominant, std::abs(s.moduli[0] - 1.0));
  }
  // Chains along the network: filter m -> n -> o ... composed across boundaries.
  std::map<std::tuple<int, int, int>, const PathwayRecord*> lookup;
  int first = recs.front().layer, last = first;
  for (const auto& r : recs) {
    lookup[{r.layer, r.src, r.dst}] = &r;
    first = std::min(first, r.layer);
    last = std::max(last, r.layer);
  }
  ordered_json chains = ordered_json::array();
  double worst_chain = 0;
  for (const auto& r : recs) {
    if (r.layer != first || chains.size() >= 64) continue;
    std::vector<Matrix> chain{transition_matrix(r.p, ctx.cfg.epsilon)};
    std::vector<int> filters{r.src, r.dst};
    for (int l = first + 1; l <= last; ++l) {
      auto it = lookup.lower_bound({l, filters.back(), std::numeric_limits<int>::min()});
      if (it == lookup.end() || std::get<0>(it->first) != l || std::get<1>(it->first) != filters.back()) break;
      chain.push_back(transition_matrix(it->second->p, ctx.cfg.epsilon));
      filters.push_back(std::get<2>(it->first));
    }
    if (chain.size() < 2) continue;
    const Matrix c = compose(chain);
    const double err = (c.rowwise().sum().array() - 1.0).abs().maxCoeff();
    worst_chain = std::max(worst_chain, err);
    chains.push_back({{"start_layer", first}, {"filters", filters}, {"row_sum_error", err},
                      {"non_dominant_radius", spectral(c).non_dominant_radius}});
  }
  const fs::path dir = ctx.stage_dir();
  write_text(dir / "spectral.csv", csv.str());
  write_text(dir / "spectral.json", dump_json(report));
  write_text(dir / "summary.json", dump_json({{"matrices", recs.size()},
                                              {"max_modulus", max_modulus},
                                              {"max_dominant_deviation", worst_dominant},
                                              {"max_chain_row_sum_error", worst_chain},
                                              {"chains", chains}}));
}

std::vector<double> parse_grid(const std::string& text, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw CLI::ValidationError(flag, "not a number: \"" + item + "\"");
    }
  }
  if (out.empty()) throw CLI::ValidationError(flag, "empty grid");
  return out;
}

void stage_prune(Context& ctx, const std::string& method, std::vector<double> tau_grid, std::vector<double> ratio_grid) {
  const Checkpoint ck = load_trained(ctx);
  const Dataset eval_set = load_split(ctx, ctx.cfg.eval_split);
  const ConceptSet& set = *eval_set.concepts;
  if (tau_grid.empty()) tau_grid = ctx.cfg.prune_tau_grid;
  ctx.manifest.params = {{"method", method},
                         {"tau_grid", grid_json(tau_grid)},
                         {"ratio_grid", grid_json(ratio_grid)},
                         {"eval_split", ctx.cfg.eval_split}};
  const bool all = method == "all";
  std::vector<PruneMethod> methods;
  if (all)
    methods = {PruneMethod::Conceptual, PruneMethod::NonConceptual, PruneMethod::L1};
  else
    methods = {parse_prune_method(method)};

  std::vector<PathwayRecord> recs;
  const bool needs_pathways = all || methods[0] != PruneMethod::L1 || ratio_grid.empty();
  if (needs_pathways) recs = load_records(ctx, set, pathways_tau(ctx));
  SweepInputs inputs{recs, &set, {}};

  // Realized conceptual ratios at each tau; the other methods are matched to them.
  std::vector<double> matched;
  if (needs_pathways)
    for (double t : tau_grid) matched.push_back(conceptual_mask(recs, t, set, ck.config).ratio);

  std::vector<PruneCurve> curves;
  ordered_json infeasible = ordered_json::array();
  const fs::path dir = ctx.stage_dir();
  for (PruneMethod m : methods) {
    PruneCurve curve;
    if (m == PruneMethod::Conceptual) {
      curve = sweep(ck, m, tau_grid, eval_set, ctx.seed, inputs);
    } else if (m == PruneMethod::NonConceptual) {
      const std::vector<double>& targets = ratio_grid.empty() ? matched : ratio_grid;
      if (targets.size() != tau_grid.size())
        throw ValidationError("--ratio-grid must have one entry per --tau-grid entry for nonconceptual pruning");
      // A point is infeasible when fewer pathway-free connections exist than the target needs.
      curve.method = m;
      curve.seed = ctx.seed;
      for (std::size_t g = 0; g < tau_grid.size(); ++g) {
        SweepInputs in = inputs;
        in.matched_ratios = {targets[g]};
        try {
          const PruneCurve one = sweep(ck, m, std::span(tau_grid).subspan(g, 1), eval_set, ctx.seed, in);
          curve.points.push_back(one.points.front());
        } catch (const ValidationError& e) {
          infeasible.push_back({{"method", to_string(m)}, {"tau", tau_grid[g]}, {"target_ratio", targets[g]},
                                {"reason", e.what()}});
        }
      }
    } else {
      curve = sweep(ck, m, ratio_grid.empty() ? matched : ratio_grid, eval_set, ctx.seed, inputs);
    }
    for (std::size_t g = 0; g < curve.points.size(); ++g) {
      const auto& p = curve.points[g];
      PruneMask mask;
      if (m == PruneMethod::Conceptual) {
        mask = conceptual_mask(recs, p.parameter, set, ck.config);
      } else if (m == PruneMethod::NonConceptual) {
        const auto& targets = ratio_grid.empty() ? matched : ratio_grid;
        const auto pos = static_cast<std::size_t>(std::find(tau_grid.begin(), tau_grid.end(), p.parameter) - tau_grid.begin());
        mask = nonconceptual_mask(recs, p.parameter, targets[pos], ctx.seed, set, ck.config);
      } else {
        mask = l1_mask(ck, p.parameter);
      }
      write_text(dir / "masks" / (std::string(to_string(m)) + "_" + std::to_string(g) + ".jsonl"), mask_jsonl(mask));
    }
    curves.push_back(std::move(curve));
  }
  write_text(dir / "curves.csv", curve_csv(curves));
  write_text(dir / "curves.svg", render_prune_curves(curves, "accuracy against pruning ratio"));
  write_text(dir / "baseline.json", dump_json({{"accuracy", evaluate(ck, eval_set)},
                                               {"eval_split", ctx.cfg.eval_split},
                                               {"infeasible", infeasible}}));
}

void stage_census(Context& ctx, std::vector<double> taus, bool impact) {
  if (taus.empty()) taus = ctx.cfg.tau_grid;
  const auto set = concept_set_for(ctx.cfg);
  const auto recs = load_records(ctx, *set, pathways_tau(ctx));
  ctx.manifest.params = {{"tau_grid", grid_json(taus)}, {"impact", impact}};
  const auto rows = pathway_type_census(recs, taus, *set);
  std::ostringstream csv;
  csv << "tau,forward,backward,bidirectional,total\n";
  std::vector<std::string> cats;
  std::vector<Series> series{{"forward", {}}, {"backward", {}}, {"bidirectional", {}}};
  for (const auto& r : rows) {
    csv << fmt(r.tau) << ',' << r.forward << ',' << r.backward << ',' << r.bidirectional << ',' << r.total() << '\n';
    cats.push_back("tau " + fmt(r.tau));
    series[0].values.push_back(static_cast<double>(r.forward));
    series[1].values.push_back(static_cast<double>(r.backward));
    series[2].values.push_back(static_cast<double>(r.bidirectional));
  }
  const fs::path dir = ctx.stage_dir();
  write_text(dir / "census.csv", csv.str());
  write_text(dir / "census.svg", render_grouped_bars(cats, series, "pathways by type"));
  if (!impact) return;
  const Checkpoint ck = load_trained(ctx);
  const Dataset eval_set = load_split(ctx, ctx.cfg.eval_split);
  std::ostringstream icsv;
  icsv << "tau,type,count,accuracy,drop_per_pathway,omitted\n";
  for (const auto& r : per_type_impact(ck, recs, taus, eval_set, *set))
    icsv << fmt(r.tau) << ',' << to_string(r.type) << ',' << r.count << ',' << fmt(r.accuracy) << ','
         << fmt(r.drop_per_pathway) << ',' << (r.omitted ? "true" : "false") << '\n';
  write_text(dir / "impact.csv", icsv.str());
}

// Reads a CSV with a header into rows of strings.
std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

void stage_report(Context& ctx) {
  const auto set = concept_set_for(ctx.cfg);
  const fs::path dir = ctx.stage_dir();
  ordered_json summary = ordered_json::object();
  ordered_json figures = ordered_json::array();
  auto have = [&](const std::string& name) { return fs::exists(ctx.upstream(name) / "manifest.json"); };

  if (have("train")) {
    std::ifstream in(require_stage(ctx, "train") / "metrics.json");
    const auto m = nlohmann::json::parse(in);
    summary["val_accuracy"] = m.at("val_accuracy");
  }
  if (have("attend")) {
    const fs::path ad = require_stage(ctx, "attend");
    // Depth trend: mean attention mass per level, averaged over each layer's filters.
    std::map<int, std::vector<double>> sums;
    std::map<int, int> n;
    for (const auto& row : read_csv(ad / "level_mass.csv")) {
      const int layer = std::stoi(row.at(0));
      auto& s = sums[layer];
      s.resize(row.size() - 2, 0.0);
      for (std::size_t c = 2; c < row.size(); ++c) s[c - 2] += std::stod(row[c]);
      ++n[layer];
    }
    std::vector<std::string> cats;
    std::vector<Series> series;
    for (int lv = 1; lv <= set->level_count(); ++lv) series.push_back({"level " + std::to_string(lv), {}});
    ordered_json depth = ordered_json::array();
    for (auto& [layer, s] : sums) {
      cats.push_back("layer " + std::to_string(layer));
      ordered_json row{{"layer", layer}};
      for (std::size_t lv = 0; lv < s.size(); ++lv) {
        s[lv] /= n[layer];
        series[lv].values.push_back(s[lv]);
      }
      row["level_mass"] = s;
      depth.push_back(row);
    }
    summary["attention_by_layer"] = depth;
    write_text(dir / "attention_depth.svg", render_grouped_bars(cats, series, "mean concept attention by level"));
    figures.push_back("attention_depth.svg");
    if (fs::exists(ad / "interventions.csv")) {
      std::size_t mask_n = 0, mask_ok = 0, enh_n = 0, enh_ok = 0;
      for (const auto& row : read_csv(ad / "interventions.csv")) {
        const bool ok = row.at(1) == "mask" ? std::stod(row[4]) < std::stod(row[3]) : std::stod(row[4]) > std::stod(row[3]);
        (row[1] == "mask" ? mask_n : enh_n) += 1;
        (row[1] == "mask" ? mask_ok : enh_ok) += ok;
      }
      summary["interventions"] = {{"mask", mask_n}, {"mask_decreased", mask_ok}, {"enhance", enh_n}, {"enhance_increased", enh_ok}};
    }
  }
  if (have("transition-mass")) {
    const fs::path td = require_stage(ctx, "transition-mass");
    ordered_json mass = ordered_json::array();
    for (const auto& row : read_csv(td / "level_mass.csv")) {
      ordered_json r{{"boundary", std::stoi(row.at(0))}};
      std::vector<double> v;
      for (std::size_t c = 1; c < row.size(); ++c) v.push_back(std::stod(row[c]));
      r["level_mass"] = v;
      mass.push_back(r);
    }
    summary["transition_mass"] = mass;
    std::ifstream fin(td / "faithfulness.json");
    const auto f = nlohmann::json::parse(fin);
    summary["faithfulness"] = {{"matrices", f.at("matrices")}, {"violations", f.at("violations")}};
  }
  if (have("prototypes")) {
    // One heatmap per boundary: the largest prototype of the full probe set.
    const fs::path pd = require_stage(ctx, "prototypes");
    std::ifstream in(pd / "prototypes.json");
    for (const auto& e : nlohmann::json::parse(in)) {
      if (e.at("group") != "all") continue;
      const auto sizes = e.at("sizes").get<std::vector<std::size_t>>();
      const auto c = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      const int layer = e.at("layer").get<int>();
      const auto rows = read_csv(pd / ("all_b" + std::to_string(layer) + "_p" + std::to_string(c) + ".csv"));
      Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.size()));
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 1; j < rows[i].size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j - 1)) = std::stod(rows[i][j]);
      const std::string name = "prototype_b" + std::to_string(layer) + ".svg";
      write_text(dir / name, render_heatmap(m, *set, "dominant prototype, layers " + std::to_string(layer) + "-" +
                                                         std::to_string(layer + 1)));
      figures.push_back(name);
    }
  }
  if (have("prune")) {
    const fs::path pd = require_stage(ctx, "prune");
    std::map<std::string, PruneCurve> by_method;
    for (const auto& row : read_csv(pd / "curves.csv")) {
      auto& c = by_method[row.at(0)];
      c.method = parse_prune_method(row[0]);
      c.points.push_back({std::stod(row[1]), std::stod(row[2]), std::stod(row[3])});
    }
    std::vector<PruneCurve> curves;
    ordered_json pr = ordered_json::object();
    for (auto& [name, c] : by_method) {
      ordered_json pts = ordered_json::array();
      for (const auto& p : c.points) pts.push_back({{"ratio", p.ratio}, {"accuracy", p.accuracy}});
      pr[name] = pts;
      curves.push_back(c);
    }
    summary["pruning"] = pr;
    write_text(dir / "pruning.svg", render_prune_curves(curves, "accuracy against pruning ratio"));
    figures.push_back("pruning.svg");
  }
  if (have("census")) {
    const fs::path cd = require_stage(ctx, "census");
    ordered_json census = ordered_json::array();
    for (const auto& row : read_csv(cd / "census.csv"))
      census.push_back({{"tau", std::stod(row.at(0))},
                        {"forward", std::stoul(row.at(1))},
                        {"backward", std::stoul(row.at(2))},
                        {"bidirectional", std::stoul(row.at(3))}});
    summary["census"] = census;
  }
  summary["figures"] = figures;
  write_text(dir / "summary.json", dump_json(summary));
}

// ---- argv handling --------------------------------------------------------------

// Drops flags that only choose locations or resources, leaving a replayable argv.
std::vector<std::string> canonical_argv(const std::vector<std::string>& args) {
  static const std::vector<std::string> dropped{"--out", "-o", "--from", "--threads", "--replay"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    bool skip = false;
    for (const auto& d : dropped) {
      if (a == d) {
        ++i;
        skip = true;
      } else if (a.rfind(d + "=", 0) == 0) {
        skip = true;
      }
    }
    if (a.size() > 2 && a.rfind("-o", 0) == 0) skip = true;  // -oDIR
    if (skip) continue;
    if ((a == "--config" || a == "-c") && i + 1 < args.size()) {
      out.push_back(a);
      out.push_back(fs::absolute(args[++i]).lexically_normal().string());
      continue;
    }
    if (a.rfind("--config=", 0) == 0) {
      out.push_back("--config=" + fs::absolute(a.substr(9)).lexically_normal().string());
      continue;
    }
    out.push_back(a);
  }
  return out;
}

int run(std::vector<std::string> args) {
  CLI::App app{"conceptflow: concept attention, pathways and pruning for small CNNs", "conceptflow"};
  app.require_subcommand(0, 1);
  std::uint64_t seed = 0;
  std::string config_path, out_dir = "runs", from_dir, replay;
  int threads = 1;
  app.add_option("--seed", seed, "Seed for every random stream")->default_val(0);
  app.add_option("-c,--config", config_path, "Pipeline config JSON (see presets/)");
  app.add_option("-o,--out", out_dir, "Output root; CONCEPTFLOW_OUT overrides it")->default_val("runs");
  app.add_option("--from", from_dir, "Root holding upstream stages (defaults to --out)");
  app.add_option("--threads", threads, "Upper bound on worker threads")->check(CLI::PositiveNumber)->default_val(1);
  app.add_option("--replay", replay, "Re-run the stage recorded in a manifest.json")->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("gen-data", "Generate or import datasets");
  auto* tr = app.add_subcommand("train", "Train the backbone and concept head");
  auto* sc = app.add_subcommand("scan", "Synthesize a learning image per filter");
  std::vector<int> scan_layers;
  std::optional<int> scan_steps;
  std::optional<double> scan_step, scan_amp, scan_l2;
  sc->add_option("--layers", scan_layers, "Layers to scan (default: all)")->delimiter(',');
  sc->add_option("--steps", scan_steps, "Ascent steps")->check(CLI::PositiveNumber);
  sc->add_option("--step-size", scan_step, "Ascent step size")->check(CLI::PositiveNumber);
  sc->add_option("--init-amplitude", scan_amp, "Upper bound of the uniform init")->check(CLI::NonNegativeNumber);
  sc->add_option("--l2-decay", scan_l2, "L2 penalty weight")->check(CLI::NonNegativeNumber);
  auto* at = app.add_subcommand("attend", "Compute filter-wise concept attentions on probe samples");
  std::optional<int> probe_class;
  std::optional<std::size_t> probe_samples;
  bool no_csv = false;
  at->add_option("--probe-class", probe_class, "Restrict probes to one class");
  at->add_option("--probe-samples", probe_samples, "Number of probe samples")->check(CLI::Range(2, 1 << 20));
  at->add_flag("--no-csv", no_csv, "Write only binary attention tensors");
  auto* pw = app.add_subcommand("pathways", "Extract conceptual pathways between adjacent layers");
  std::optional<int> k_opt;
  std::optional<double> tau_opt;
  pw->add_option("--k", k_opt, "Top-k concepts per filter")->check(CLI::PositiveNumber);
  pw->add_option("--tau", tau_opt, "Flow threshold in (0, 1]")->check(CLI::Range(0.0, 1.0));
  auto* pr = app.add_subcommand("prototypes", "Cluster transition matrices into prototypes");
  std::optional<int> clusters, max_iter;
  pr->add_option("--clusters", clusters, "Number of prototypes")->check(CLI::PositiveNumber);
  pr->add_option("--max-iter", max_iter, "K-means iteration cap")->check(CLI::PositiveNumber);
  auto* tm = app.add_subcommand("transition-mass", "Average transition mass and faithfulness");
  auto* sp = app.add_subcommand("spectral", "Eigenvalue moduli of transition matrices and chains");
  auto* pn = app.add_subcommand("prune", "Accuracy under conceptual, non-conceptual and L1 pruning");
  std::string method = "all", tau_grid_text, ratio_grid_text;
  pn->add_option("--method", method, "conceptual | nonconceptual | l1 | all")
      ->check(CLI::IsMember({"conceptual", "nonconceptual", "l1", "all"}))
      ->default_val("all");
  pn->add_option("--tau-grid", tau_grid_text, "Comma-separated tau values");
  pn->add_option("--ratio-grid", ratio_grid_text, "Comma-separated pruning ratios (l1, nonconceptual)");
  auto* cs = app.add_subcommand("census", "Count pathways by type across tau");
  std::string census_grid_text;
  bool impact = false;
  cs->add_option("--tau-grid", census_grid_text, "Comma-separated tau values");
  cs->add_flag("--impact", impact, "Also measure the accuracy drop per pruned pathway type");
  auto* rp = app.add_subcommand("report", "Collect figures and headline numbers");

  const std::vector<std::string> original = args;
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\nerror: " << e.what() << "\n";
    return 2;
  }

  if (!replay.empty()) {
    if (app.get_subcommands().size() != 0) {
      std::cerr << app.help() << "\nerror: --replay takes no subcommand\n";
      return 2;
    }
    const RunManifest m = RunManifest::load(replay);
    std::vector<std::string> again = m.argv;
    const bool out_given = std::any_of(original.begin(), original.end(),
                                       [](const std::string& a) { return a == "--out" || a == "-o" || a.rfind("--out=", 0) == 0; });
    const fs::path default_out = fs::path(m.output_dir).parent_path();
    again.insert(again.begin(), {"--out", out_given || std::getenv("CONCEPTFLOW_OUT") ? out_dir : default_out.string()});
    again.insert(again.begin(), {"--from", from_dir.empty() ? default_out.string() : from_dir});
    again.insert(again.begin(), {"--threads", std::to_string(threads)});
    return run(again);
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help() << "\nerror: a subcommand is required\n";
    return 2;
  }

  if (const char* env = std::getenv("CONCEPTFLOW_OUT"); env && *env) out_dir = env;
  Eigen::setNbThreads(threads);

  Context ctx;
  ctx.seed = seed;
  ctx.cfg = load_pipeline_config(config_path);
  ctx.out_root = out_dir;
  ctx.from_root = from_dir.empty() ? fs::path(out_dir) : fs::path(from_dir);
  fs::create_directories(ctx.out_root);
  ctx.argv = canonical_argv(original);
  CLI::App* sub = app.get_subcommands().front();
  ctx.stage = sub->get_name();

  if (scan_steps) ctx.cfg.scan.steps = *scan_steps;
  if (scan_step) ctx.cfg.scan.step_size = *scan_step;
  if (scan_amp) ctx.cfg.scan.init_amplitude = *scan_amp;
  if (scan_l2) ctx.cfg.scan.l2_decay = *scan_l2;
  if (probe_samples) ctx.cfg.probe_samples = *probe_samples;
  if (clusters) ctx.cfg.prototypes = *clusters;
  if (max_iter) ctx.cfg.max_iter = *max_iter;
  std::vector<double> tau_grid, ratio_grid, census_grid;
  try {
    if (!tau_grid_text.empty()) tau_grid = parse_grid(tau_grid_text, "--tau-grid");
    if (!ratio_grid_text.empty()) ratio_grid = parse_grid(ratio_grid_text, "--ratio-grid");
    if (!census_grid_text.empty()) census_grid = parse_grid(census_grid_text, "--tau-grid");
  } catch (const CLI::ParseError& e) {
    std::cerr << sub->help() << "\nerror: " << e.what() << "\n";
    return 2;
  }

  begin_stage(ctx);
  if (sub == gen) stage_gen_data(ctx);
  else if (sub == tr) stage_train(ctx);
  else if (sub == sc) stage_scan(ctx, scan_layers);
  else if (sub == at) stage_attend(ctx, probe_class, !no_csv);
  else if (sub == pw) stage_pathways(ctx, k_opt.value_or(ctx.cfg.k), tau_opt.value_or(ctx.cfg.tau));
  else if (sub == pr) stage_prototypes(ctx, ctx.cfg.prototypes, ctx.cfg.max_iter);
  else if (sub == tm) stage_transition_mass(ctx);
  else if (sub == sp) stage_spectral(ctx);
  else if (sub == pn) stage_prune(ctx, method, tau_grid, ratio_grid);
  else if (sub == cs) stage_census(ctx, census_grid, impact);
  else if (sub == rp) stage_report(ctx);
  finish_stage(ctx);
  std::cerr << ctx.stage << ": wrote " << ctx.stage_dir().string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
