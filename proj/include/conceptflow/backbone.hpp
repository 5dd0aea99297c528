#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "conceptflow/dataset.hpp"
#include "conceptflow/tensor.hpp"

// Fixed CNN backbone (3x3 conv -> ReLU -> 2x2 max-pool, no pool after the last
// layer) with a concept cross-attention classifier head:
//   Q = (W_q M)^T,  O = softmax_rows(Q K^T / sqrt(d)),  a = column mean of O,
//   logits = V^T a.
// Layers are numbered from 1; filters from 0.
namespace conceptflow {

struct ModelConfig {
  std::vector<int> layer_channels{64, 64, 128};
  int kernel = 3;
  int patch_dim = 64;
  int n_concepts = 21;
  int n_classes = 2;
  int input_channels = 1;
  int input_height = 28;
  int input_width = 28;
  double lr = 0.05;
  double weight_decay = 1e-4;
  int epochs = 20;
  int batch_size = 32;
  double concept_loss_weight = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
  int layer_count() const { return static_cast<int>(layer_channels.size()); }
  // Post-activation shape of conv layer `layer` (before any pooling).
  Shape layer_shape(int layer) const;
  Shape input_shape() const { return {input_channels, input_height, input_width}; }
  Index feature_channels() const { return layer_channels.back(); }
  Index patch_count() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  static ModelConfig load(const std::filesystem::path& path);
};

struct ConvLayer {
  Tensor kernels;  // [C_out, C_in, 3, 3]
  Tensor bias;     // [C_out]
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double val_accuracy = 0;
};

struct TrainingMetadata {
  double final_train_accuracy = 0;
  double final_val_accuracy = 0;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<ConvLayer> layers;
  Tensor query_proj;  // W_q [d, C']
  Tensor keys;        // K [n_c, d]
  Tensor values;      // V [n_c, n_classes]
  TrainingMetadata meta;

  static Checkpoint initialize(const ModelConfig& config);
  static Checkpoint zeros(const ModelConfig& config);

  // Declaration order: kernels_1, bias_1, ..., kernels_L, bias_L, W_q, K, V.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  void validate() const;
};

struct ForwardTrace {
  Tensor feature_map;         // [C', H', W'] final post-activation map
  Matrix queries;             // [P, d]
  Matrix attention;           // O [P, n_c]
  Vector concept_attention;   // a [n_c]
  Vector logits;              // [n_classes]
};

ForwardTrace forward(const Checkpoint& ckpt, const Tensor& image);

struct BatchOutput {
  Matrix concept_attention;  // [n_c, N]
  Matrix logits;             // [n_classes, N]
};

BatchOutput forward_batch(const Checkpoint& ckpt, std::span<const Tensor> images);

// Argmax with ties toward the lower class index.
int predict_class(const Eigen::Ref<const Vector>& logits);
double evaluate(const Checkpoint& ckpt, const Dataset& dataset);
std::vector<int> predict(const Checkpoint& ckpt, std::span<const Tensor> images);

struct LossBreakdown {
  double total = 0;
  double classification = 0;
  double concept_term = 0;
  int correct = 0;
};

struct LossAndGradients {
  LossBreakdown loss;
  std::vector<Tensor> gradients;  // aligned with Checkpoint::parameters()
};

// Mean cross-entropy + concept_loss_weight * concept BCE (summed over concepts,
// averaged over the batch). The concept target is the sample's concept vector normalised to sum 1.
LossAndGradients loss_and_gradients(const Checkpoint& ckpt, std::span<const Sample* const> batch,
                                    bool with_gradients = true);

using EpochCallback = std::function<void(const EpochMetrics&)>;

Checkpoint train(const ModelConfig& config, const Dataset& train_set, const Dataset& val_set,
                 const EpochCallback& on_epoch = {});

// Mean post-ReLU activation of filter `filter` in conv layer `layer`; when
// `grad_image` is given it receives d(mean activation)/d(image).
double filter_response(const Checkpoint& ckpt, const Tensor& image, int layer, int filter,
                       Tensor* grad_image = nullptr);
// Batched form: image s is scored against filters[s].
std::vector<double> filter_responses(const Checkpoint& ckpt, std::span<const Tensor> images, int layer,
                                     std::span<const int> filters, std::vector<Tensor>* grad_images = nullptr);

// ---- checkpoint files ------------------------------------------------------
// "CFCK" | u32 version | u64 json length | config+metadata JSON | tensors in
// declaration order (each as a CFTN record). Little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "<memory>");
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace conceptflow
