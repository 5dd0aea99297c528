#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "conceptflow/backbone.hpp"

// Learning images: per-filter activation maximisation, and the additive
// overlay used to accentuate a filter's pattern on real inputs.
namespace conceptflow {

struct ScanParams {
  int steps = 256;
  double step_size = 0.1;
  double l2_decay = 1e-3;
  double init_amplitude = 0.1;  // init pixels ~ U[0, init_amplitude]
  std::uint64_t seed = 0;

  void validate() const;
};

struct LearningImage {
  int layer = 0;
  int filter = 0;
  Tensor image;
  double activation = 0;          // mean activation of `image`
  double initial_activation = 0;  // mean activation of the init
};

// Normalised gradient ascent on mean(activation) - l2_decay * ||x||^2 with x
// clamped to [0,1] after every step. Returns the best iterate seen, so the
// result never scores below the init.
LearningImage learning_image(const Checkpoint& ckpt, int layer, int filter, const ScanParams& params);

// All filters of one layer, processed in small batches.
std::vector<LearningImage> scan_layer(const Checkpoint& ckpt, int layer, const ScanParams& params,
                                      int batch = 16);

// clamp(original + image, 0, 1)
Tensor blend(const Tensor& original, const Tensor& image);
inline Tensor blend(const Tensor& original, const LearningImage& li) { return blend(original, li.image); }

// Directory of l{l}_f{m}.cftn files plus index.json.
class LearningImageCache {
 public:
  void insert(LearningImage li);
  bool contains(int layer, int filter) const;
  // Throws IndexError mentioning the scan stage when absent.
  const LearningImage& at(int layer, int filter) const;
  std::vector<int> filters(int layer) const;
  std::vector<int> layers() const;
  std::size_t size() const { return entries_.size(); }

  void save(const std::filesystem::path& dir, const ScanParams& params) const;
  static LearningImageCache load(const std::filesystem::path& dir);

 private:
  std::map<std::pair<int, int>, LearningImage> entries_;
};

std::string learning_image_filename(int layer, int filter);

}  // namespace conceptflow
