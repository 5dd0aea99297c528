#include "conceptflow/scanner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"
#include "conceptflow/tensor_io.hpp"

namespace conceptflow {

using nlohmann::json;

void ScanParams::validate() const {
  if (steps < 0) throw ValidationError("scan: steps must be non-negative");
  if (!(step_size > 0)) throw ValidationError("scan: step_size must be positive");
  if (l2_decay < 0) throw ValidationError("scan: l2_decay must be non-negative");
  if (init_amplitude < 0 || init_amplitude > 1) throw ValidationError("scan: init_amplitude must lie in [0,1]");
}

namespace {

Tensor init_image(const ModelConfig& config, int layer, int filter, const ScanParams& p) {
  Rng rng = make_rng(p.seed, "scan", static_cast<std::uint64_t>(layer) * 100003u + static_cast<std::uint64_t>(filter));
  Tensor x(config.input_shape());
  for (Index i = 0; i < x.size(); ++i) x.raw()[i] = std::clamp(p.init_amplitude * uniform01(rng), 0.0, 1.0);
  return x;
}

void check_target(const Checkpoint& ck, int layer, int filter) {
  const Shape s = ck.config.layer_shape(layer);
  if (filter < 0 || filter >= s[0])
    throw IndexError("filter " + std::to_string(filter) + " out of range for layer " + std::to_string(layer) +
                     " with " + std::to_string(s[0]) + " filters");
}

// Runs the ascent for a batch of filters of one layer in lock-step.
std::vector<LearningImage> ascend(const Checkpoint& ck, int layer, const std::vector<int>& filters,
                                  const ScanParams& p) {
  const std::size_t n = filters.size();
  std::vector<Tensor> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = init_image(ck.config, layer, filters[i], p);
  std::vector<Tensor> grads;
  std::vector<double> act = filter_responses(ck, x, layer, filters, p.steps > 0 ? &grads : nullptr);

  std::vector<LearningImage> best(n);
  for (std::size_t i = 0; i < n; ++i) best[i] = {layer, filters[i], x[i], act[i], act[i]};

  for (int step = 0; step < p.steps; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      Vector g = grads[i].data() - 2.0 * p.l2_decay * x[i].data();
      const double rms = std::sqrt(g.squaredNorm() / static_cast<double>(g.size()));
      if (rms > 0) g *= p.step_size / rms;
      x[i].data() = (x[i].data() + g).cwiseMax(0.0).cwiseMin(1.0);
    }
    const bool more = step + 1 < p.steps;
    act = filter_responses(ck, x, layer, filters, more ? &grads : nullptr);
    for (std::size_t i = 0; i < n; ++i)
      if (act[i] > best[i].activation) {
        best[i].image = x[i];
        best[i].activation = act[i];
      }
  }
  return best;
}

}  // namespace

LearningImage learning_image(const Checkpoint& ck, int layer, int filter, const ScanParams& params) {
  params.validate();
  check_target(ck, layer, filter);
  return ascend(ck, layer, {filter}, params)[0];
}

std::vector<LearningImage> scan_layer(const Checkpoint& ck, int layer, const ScanParams& params, int batch) {
  params.validate();
  if (batch < 1) throw ValidationError("scan: batch must be positive");
  const int count = static_cast<int>(ck.config.layer_shape(layer)[0]);
  std::vector<LearningImage> out;
  for (int start = 0; start < count; start += batch) {
    std::vector<int> filters;
    for (int m = start; m < std::min(count, start + batch); ++m) filters.push_back(m);
    for (auto& li : ascend(ck, layer, filters, params)) out.push_back(std::move(li));
  }
  return out;
}

Tensor blend(const Tensor& original, const Tensor& image) {
  if (original.shape() != image.shape())
    throw DimensionError("blend: original " + shape_string(original.shape()) + " vs learning image " +
                         shape_string(image.shape()));
  Tensor out(original.shape());
  out.data() = (original.data() + image.data()).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

// ---- cache -----------------------------------------------------------------

std::string learning_image_filename(int layer, int filter) {
  return "l" + std::to_string(layer) + "_f" + std::to_string(filter) + ".cftn";
}

void LearningImageCache::insert(LearningImage li) {
  const auto key = std::make_pair(li.layer, li.filter);
  entries_.insert_or_assign(key, std::move(li));
}

bool LearningImageCache::contains(int layer, int filter) const { return entries_.count({layer, filter}) > 0; }

const LearningImage& LearningImageCache::at(int layer, int filter) const {
  const auto it = entries_.find({layer, filter});
  if (it == entries_.end())
    throw IndexError("no learning image for layer " + std::to_string(layer) + " filter " + std::to_string(filter) +
                     "; run the scan stage first");
  return it->second;
}

std::vector<int> LearningImageCache::filters(int layer) const {
  std::vector<int> out;
  for (const auto& [key, li] : entries_)
    if (key.first == layer) out.push_back(key.second);
  return out;
}

std::vector<int> LearningImageCache::layers() const {
  std::set<int> ls;
  for (const auto& [key, li] : entries_) ls.insert(key.first);
  return {ls.begin(), ls.end()};
}

void LearningImageCache::save(const std::filesystem::path& dir, const ScanParams& params) const {
  std::filesystem::create_directories(dir);
  json entries = json::array();
  for (const auto& [key, li] : entries_) {
    const std::string file = learning_image_filename(li.layer, li.filter);
    save_tensor(li.image, dir / file);
    entries.push_back({{"layer", li.layer},
                       {"filter", li.filter},
                       {"file", file},
                       {"activation", li.activation},
                       {"initial_activation", li.initial_activation}});
  }
  const json index{{"params",
                    {{"steps", params.steps},
                     {"step_size", params.step_size},
                     {"l2_decay", params.l2_decay},
                     {"init_amplitude", params.init_amplitude},
                     {"seed", params.seed}}},
                   {"entries", entries}};
  std::ofstream out(dir / "index.json");
  if (!out) throw IoError("cannot write " + (dir / "index.json").string());
  out << index.dump(2) << "\n";
}

LearningImageCache LearningImageCache::load(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  std::ifstream in(index_path);
  if (!in) throw IoError("no learning-image index at " + index_path.string() + "; run the scan stage first");
  LearningImageCache cache;
  try {
    const json index = json::parse(in);
    for (const auto& e : index.at("entries")) {
      LearningImage li;
      li.layer = e.at("layer").get<int>();
      li.filter = e.at("filter").get<int>();
      li.activation = e.at("activation").get<double>();
      li.initial_activation = e.at("initial_activation").get<double>();
      li.image = load_tensor(dir / e.at("file").get<std::string>());
      cache.insert(std::move(li));
    }
  } catch (const json::exception& e) {
    throw ParseError(index_path.string() + ": " + e.what());
  }
  return cache;
}

}  // namespace conceptflow
