#include "conceptflow/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "conceptflow/errors.hpp"
#include "conceptflow/ops.hpp"
#include "conceptflow/random.hpp"
#include "conceptflow/tensor_io.hpp"

namespace conceptflow {

using nlohmann::json;

// ---- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  if (layer_channels.empty()) throw ValidationError("model config: layer_channels is empty");
  for (int c : layer_channels)
    if (c <= 0) throw ValidationError("model config: layer channel counts must be positive");
  if (kernel != 3) throw ValidationError("model config: only 3x3 kernels are supported");
  if (patch_dim < 8) throw ValidationError("model config: patch_dim must be >= 8");
  if (n_concepts < 1) throw ValidationError("model config: n_concepts must be positive");
  if (n_classes < 2) throw ValidationError("model config: n_classes must be >= 2");
  if (input_channels < 1 || input_height < 1 || input_width < 1)
    throw ValidationError("model config: input dimensions must be positive");
  Index h = input_height, w = input_width;
  for (int l = 1; l < layer_count(); ++l) {
    if (h < 2 || w < 2) throw ValidationError("model config: input too small for " + std::to_string(layer_count()) + " pooled layers");
    h /= 2, w /= 2;
  }
  if (!(lr > 0)) throw ValidationError("model config: lr must be positive");
  if (weight_decay < 0) throw ValidationError("model config: weight_decay must be non-negative");
  if (epochs < 0) throw ValidationError("model config: epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("model config: batch_size must be positive");
  if (concept_loss_weight < 0) throw ValidationError("model config: concept_loss_weight must be non-negative");
}

Shape ModelConfig::layer_shape(int layer) const {
  if (layer < 1 || layer > layer_count())
    throw IndexError("layer " + std::to_string(layer) + " out of range [1, " + std::to_string(layer_count()) + "]");
  Index h = input_height, w = input_width;
  for (int l = 1; l < layer; ++l) h /= 2, w /= 2;
  return {layer_channels[static_cast<std::size_t>(layer - 1)], h, w};
}

Index ModelConfig::patch_count() const {
  const Shape s = layer_shape(layer_count());
  return s[1] * s[2];
}

std::string ModelConfig::to_json() const {
  json j{{"layer_channels", layer_channels},
         {"kernel", kernel},
         {"patch_dim", patch_dim},
         {"n_concepts", n_concepts},
         {"n_classes", n_classes},
         {"input_channels", input_channels},
         {"input_height", input_height},
         {"input_width", input_width},
         {"lr", lr},
         {"weight_decay", weight_decay},
         {"epochs", epochs},
         {"batch_size", batch_size},
         {"concept_loss_weight", concept_loss_weight},
         {"seed", seed}};
  return j.dump();
}

namespace {

ModelConfig config_from(const json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("layer_channels", c.layer_channels);
    get("kernel", c.kernel);
    get("patch_dim", c.patch_dim);
    get("n_concepts", c.n_concepts);
    get("n_classes", c.n_classes);
    get("input_channels", c.input_channels);
    get("input_height", c.input_height);
    get("input_width", c.input_width);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("concept_loss_weight", c.concept_loss_weight);
    get("seed", c.seed);
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

ModelConfig ModelConfig::from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("model config is not valid JSON: ") + e.what());
  }
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

// ---- parameters ---------------------------------------------------------------

Checkpoint Checkpoint::zeros(const ModelConfig& config) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  Index in_c = config.input_channels;
  for (int c : config.layer_channels) {
    ck.layers.push_back({Tensor({c, in_c, kKernel, kKernel}), Tensor({c})});
    in_c = c;
  }
  ck.query_proj = Tensor({config.patch_dim, config.feature_channels()});
  ck.keys = Tensor({config.n_concepts, config.patch_dim});
  ck.values = Tensor({config.n_concepts, config.n_classes});
  ck.meta.seed = config.seed;
  return ck;
}

Checkpoint Checkpoint::initialize(const ModelConfig& config) {
  Checkpoint ck = zeros(config);
  Rng rng = make_rng(config.seed, "init");
  auto fill_normal = [&](Tensor& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < t.size(); ++i) t.raw()[i] = dist(rng);
  };
  for (auto& layer : ck.layers)
    fill_normal(layer.kernels, std::sqrt(2.0 / static_cast<double>(layer.kernels.dim(1) * kKernelArea)));
  fill_normal(ck.query_proj, std::sqrt(1.0 / static_cast<double>(config.feature_channels())));
  fill_normal(ck.keys, 1.0);
  fill_normal(ck.values, 0.1);
  return ck;
}

std::vector<Tensor*> Checkpoint::parameters() {
  std::vector<Tensor*> ps;
  for (auto& l : layers) ps.insert(ps.end(), {&l.kernels, &l.bias});
  ps.insert(ps.end(), {&query_proj, &keys, &values});
  return ps;
}

std::vector<const Tensor*> Checkpoint::parameters() const {
  std::vector<const Tensor*> ps;
  for (const auto& l : layers) ps.insert(ps.end(), {&l.kernels, &l.bias});
  ps.insert(ps.end(), {&query_proj, &keys, &values});
  return ps;
}

void Checkpoint::validate() const {
  config.validate();
  const Checkpoint ref = zeros(config);
  const auto mine = parameters();
  const auto want = ref.parameters();
  if (mine.size() != want.size()) throw DimensionError("checkpoint has the wrong number of parameter tensors");
  for (std::size_t i = 0; i < mine.size(); ++i)
    if (mine[i]->shape() != want[i]->shape())
      throw DimensionError("checkpoint parameter #" + std::to_string(i) + " has shape " +
                           shape_string(mine[i]->shape()) + ", config implies " + shape_string(want[i]->shape()));
}

// ---- batched network ---------------------------------------------------------------

namespace {

// Activations are kept as [channels, N*H*W] matrices; sample s occupies
// columns [s*H*W, (s+1)*H*W) with position p = y*W + x.
struct LayerCache {
  Index h = 0, w = 0;
  Matrix cols;
  Matrix pre;
  Matrix post;
  Matrix pooled;
  std::vector<Index> argmax;  // linear index into `post` for each pooled cell
};

struct StackCache {
  Index n = 0;
  std::vector<LayerCache> layers;
  Matrix dpre, dcols, din, dpost;  // backward scratch
};

// Buffers are large (tens of MB per batch); keeping one set per thread avoids
// re-faulting fresh pages on every call.
StackCache& scratch_cache() {
  thread_local StackCache cache;
  return cache;
}

Matrix stack_images(std::span<const Tensor> images, const ModelConfig& config) {
  const Shape want = config.input_shape();
  const Index c = want[0], hw = want[1] * want[2];
  Matrix x(c, static_cast<Index>(images.size()) * hw);
  for (std::size_t s = 0; s < images.size(); ++s) {
    if (images[s].shape() != want)
      throw DimensionError("image shape " + shape_string(images[s].shape()) + " does not match model input " +
                           shape_string(want));
    x.middleCols(static_cast<Index>(s) * hw, hw) = images[s].as_matrix(c, hw);
  }
  return x;
}

// Batched im2col/col2im on the [C, N*H*W] layout; same row convention as detail::im2col
// (row c*9 + ky*3 + kx) but with raw column copies, since this is the training hot path.
void im2col_batch(const Matrix& in, Index channels, Index h, Index w, Index n, Matrix& cols) {
  const Index rows = channels * kKernelArea;
  cols.resize(rows, n * h * w);
  for (Index s = 0; s < n; ++s)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        double* dst = cols.data() + (s * h * w + y * w + x) * rows;
        for (Index ky = 0; ky < kKernel; ++ky)
          for (Index kx = 0; kx < kKernel; ++kx) {
            const Index k = ky * kKernel + kx, sy = y + ky - 1, sx = x + kx - 1;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              for (Index c = 0; c < channels; ++c) dst[c * kKernelArea + k] = 0;
              continue;
            }
            const double* src = in.data() + (s * h * w + sy * w + sx) * channels;
            for (Index c = 0; c < channels; ++c) dst[c * kKernelArea + k] = src[c];
          }
      }
}

void col2im_batch(const Matrix& cols, Index channels, Index h, Index w, Index n, Matrix& out) {
  const Index rows = channels * kKernelArea;
  out.setZero(channels, n * h * w);
  for (Index s = 0; s < n; ++s)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const double* src = cols.data() + (s * h * w + y * w + x) * rows;
        for (Index ky = 0; ky < kKernel; ++ky)
          for (Index kx = 0; kx < kKernel; ++kx) {
            const Index k = ky * kKernel + kx, sy = y + ky - 1, sx = x + kx - 1;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            double* dst = out.data() + (s * h * w + sy * w + sx) * channels;
            for (Index c = 0; c < channels; ++c) dst[c] += src[c * kKernelArea + k];
          }
      }
}

void maxpool_columns(LayerCache& lc, Index n) {
  const Index rows = lc.post.rows(), h = lc.h, w = lc.w, oh = h / 2, ow = w / 2;
  lc.pooled.resize(rows, n * oh * ow);
  lc.argmax.assign(static_cast<std::size_t>(lc.pooled.size()), 0);
  for (Index s = 0; s < n; ++s) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        const Index out_col = s * oh * ow + oy * ow + ox;
        const Index base = s * h * w + 2 * oy * w + 2 * ox;
        const Index cand[4] = {base, base + 1, base + w, base + w + 1};
        for (Index c = 0; c < rows; ++c) {
          Index best = cand[0];
          for (int k = 1; k < 4; ++k)
            if (lc.post(c, cand[k]) > lc.post(c, best)) best = cand[k];
          lc.pooled(c, out_col) = lc.post(c, best);
          lc.argmax[static_cast<std::size_t>(c + out_col * rows)] = c + best * rows;
        }
      }
    }
  }
}

void forward_stack(const Checkpoint& ck, const Matrix& input, Index n, int up_to, StackCache& cache) {
  cache.n = n;
  cache.layers.resize(static_cast<std::size_t>(up_to));
  const Matrix* cur = &input;
  Index h = ck.config.input_height, w = ck.config.input_width;
  for (int k = 0; k < up_to; ++k) {
    const ConvLayer& layer = ck.layers[static_cast<std::size_t>(k)];
    LayerCache& lc = cache.layers[static_cast<std::size_t>(k)];
    const Index cin = layer.kernels.dim(1), cout = layer.kernels.dim(0);
    lc.h = h, lc.w = w;
    im2col_batch(*cur, cin, h, w, n, lc.cols);
    lc.pre.noalias() = layer.kernels.as_matrix(cout, cin * kKernelArea) * lc.cols;
    lc.pre.colwise() += layer.bias.data();
    lc.post = lc.pre.cwiseMax(0.0);
    if (k + 1 < up_to) {
      maxpool_columns(lc, n);
      cur = &lc.pooled;
      h /= 2, w /= 2;
    }
  }
}

// Back-propagates cache.dpost (gradient of the top layer's post-activation)
// down the stack. Weight gradients go to `grads` (laid out like
// Checkpoint::parameters()) when non-null. When `want_input` is set the input
// gradient is left in cache.din.
void backward_stack(const Checkpoint& ck, StackCache& cache, std::vector<Tensor>* grads, bool want_input) {
  const Index n = cache.n;
  for (int k = static_cast<int>(cache.layers.size()) - 1; k >= 0; --k) {
    const LayerCache& lc = cache.layers[static_cast<std::size_t>(k)];
    const ConvLayer& layer = ck.layers[static_cast<std::size_t>(k)];
    const Index cin = layer.kernels.dim(1), cout = layer.kernels.dim(0);
    cache.dpre = (lc.pre.array() > 0.0).select(cache.dpost, 0.0);
    if (grads) {
      Tensor& gk = (*grads)[static_cast<std::size_t>(2 * k)];
      Tensor& gb = (*grads)[static_cast<std::size_t>(2 * k + 1)];
      gk.as_matrix(cout, cin * kKernelArea).noalias() = cache.dpre * lc.cols.transpose();
      gb.data() = cache.dpre.rowwise().sum();
    }
    if (k == 0 && !want_input) return;
    cache.dcols.noalias() = layer.kernels.as_matrix(cout, cin * kKernelArea).transpose() * cache.dpre;
    col2im_batch(cache.dcols, cin, lc.h, lc.w, n, cache.din);
    if (k == 0) return;
    const LayerCache& below = cache.layers[static_cast<std::size_t>(k - 1)];
    cache.dpost.setZero(below.post.rows(), below.post.cols());
    for (std::size_t i = 0; i < below.argmax.size(); ++i) cache.dpost.data()[below.argmax[i]] += cache.din.data()[i];
  }
}

// a lives on the simplex, so its entries are O(1/n_c); rescaling by n_c keeps the
// logits O(1) whatever the concept count.
double logit_scale(const ModelConfig& c) { return static_cast<double>(c.n_concepts); }

struct HeadCache {
  Matrix queries;    // [d, N*P]
  Matrix attention;  // O^T [n_c, N*P]
  Matrix concepts;   // a [n_c, N]
  Matrix logits;     // [n_classes, N]
};

void forward_head(const Checkpoint& ck, const Matrix& features, Index n, HeadCache& hc) {
  const Index p = ck.config.patch_count();
  const double scale = 1.0 / std::sqrt(static_cast<double>(ck.config.patch_dim));
  hc.queries.noalias() = ck.query_proj.as_matrix() * features;
  const Matrix scores = (ck.keys.as_matrix() * hc.queries) * scale;
  hc.attention = softmax_rows(scores.transpose()).transpose();
  hc.concepts.resize(hc.attention.rows(), n);
  for (Index s = 0; s < n; ++s) hc.concepts.col(s) = hc.attention.middleCols(s * p, p).rowwise().mean();
  hc.logits.noalias() = logit_scale(ck.config) * (ck.values.as_matrix().transpose() * hc.concepts);
}

}  // namespace

ForwardTrace forward(const Checkpoint& ck, const Tensor& image) {
  StackCache& cache = scratch_cache();
  forward_stack(ck, stack_images(std::span<const Tensor>(&image, 1), ck.config), 1, ck.config.layer_count(), cache);
  HeadCache hc;
  const Matrix& features = cache.layers.back().post;
  forward_head(ck, features, 1, hc);
  const Shape fshape = ck.config.layer_shape(ck.config.layer_count());
  ForwardTrace t;
  t.feature_map = Tensor(fshape);
  t.feature_map.as_matrix(fshape[0], fshape[1] * fshape[2]) = features;
  t.queries = hc.queries.transpose();
  t.attention = hc.attention.transpose();
  t.concept_attention = hc.concepts.col(0);
  t.logits = hc.logits.col(0);
  if (!t.logits.allFinite() || !t.concept_attention.allFinite()) throw NumericError("forward: non-finite output");
  return t;
}

BatchOutput forward_batch(const Checkpoint& ck, std::span<const Tensor> images) {
  if (images.empty()) return {Matrix(ck.config.n_concepts, 0), Matrix(ck.config.n_classes, 0)};
  const Index n = static_cast<Index>(images.size());
  StackCache& cache = scratch_cache();
  forward_stack(ck, stack_images(images, ck.config), n, ck.config.layer_count(), cache);
  HeadCache hc;
  forward_head(ck, cache.layers.back().post, n, hc);
  if (!hc.logits.allFinite()) throw NumericError("forward_batch: non-finite logits");
  return {std::move(hc.concepts), std::move(hc.logits)};
}

int predict_class(const Eigen::Ref<const Vector>& logits) {
  Index best = 0;
  for (Index i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<int>(best);
}

std::vector<int> predict(const Checkpoint& ck, std::span<const Tensor> images) {
  constexpr std::size_t kChunk = 32;
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); i += kChunk) {
    const auto chunk = images.subspan(i, std::min(kChunk, images.size() - i));
    const BatchOutput b = forward_batch(ck, chunk);
    for (Index s = 0; s < b.logits.cols(); ++s) out.push_back(predict_class(b.logits.col(s)));
  }
  return out;
}

double evaluate(const Checkpoint& ck, const Dataset& dataset) {
  if (dataset.samples.empty()) return 0.0;
  std::vector<Tensor> images;
  images.reserve(dataset.size());
  for (const auto& s : dataset.samples) images.push_back(s.image);
  const auto preds = predict(ck, images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == dataset.samples[i].class_label;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// ---- loss ------------------------------------------------------------------------------

LossAndGradients loss_and_gradients(const Checkpoint& ck, std::span<const Sample* const> batch, bool with_gradients) {
  if (batch.empty()) throw ValidationError("loss_and_gradients: empty batch");
  const ModelConfig& cfg = ck.config;
  const Index n = static_cast<Index>(batch.size());
  const Index p = cfg.patch_count();
  const Index nc = cfg.n_concepts;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double lambda = cfg.concept_loss_weight;

  std::vector<Tensor> images;
  images.reserve(batch.size());
  for (const Sample* s : batch) images.push_back(s->image);
  StackCache& cache = scratch_cache();
  forward_stack(ck, stack_images(images, cfg), n, cfg.layer_count(), cache);
  const Matrix& features = cache.layers.back().post;
  HeadCache hc;
  forward_head(ck, features, n, hc);

  LossAndGradients out;
  Matrix dlogits(cfg.n_classes, n);
  Matrix dconcept_bce(nc, n);
  constexpr double kClip = 1e-12;
  for (Index s = 0; s < n; ++s) {
    const Sample& sample = *batch[static_cast<std::size_t>(s)];
    if (sample.class_label < 0 || sample.class_label >= cfg.n_classes)
      throw ValidationError("sample class label " + std::to_string(sample.class_label) + " outside model classes");
    if (sample.concept_vector.size() != nc)
      throw DimensionError("sample concept vector length does not match the model's concept count");
    const Vector logits = hc.logits.col(s);
    const Vector prob = (logits.array() - logits.maxCoeff()).exp().matrix();
    const Vector softmax = prob / prob.sum();
    out.loss.classification -= std::log(std::max(softmax[sample.class_label], kClip));
    out.loss.correct += predict_class(logits) == sample.class_label;
    dlogits.col(s) = softmax;
    dlogits(sample.class_label, s) -= 1.0;

    const double mass = sample.concept_vector.sum();
    const Vector target = mass > 0 ? Vector(sample.concept_vector / mass) : Vector::Zero(nc);
    double bce = 0.0;
    for (Index i = 0; i < nc; ++i) {
      const double a = std::clamp(hc.concepts(i, s), kClip, 1.0 - kClip);
      const double t = target[i];
      bce -= t * std::log(a) + (1.0 - t) * std::log(1.0 - a);
      dconcept_bce(i, s) = -t / a + (1.0 - t) / (1.0 - a);
    }
    out.loss.concept_term += bce;
  }
  out.loss.classification *= inv_n;
  out.loss.concept_term *= inv_n;
  out.loss.total = out.loss.classification + lambda * out.loss.concept_term;
  if (!with_gradients) return out;

  dlogits *= inv_n * logit_scale(cfg);
  const Matrix values = ck.values.as_matrix();
  Matrix dconcept = values * dlogits;
  if (lambda != 0.0) dconcept += (lambda * inv_n) * dconcept_bce;

  for (const Tensor* t : ck.parameters()) out.gradients.emplace_back(t->shape());
  const std::size_t head = 2 * ck.layers.size();
  out.gradients[head + 2].as_matrix().noalias() = hc.concepts * dlogits.transpose();

  // Softmax backward per patch column; every patch of sample s receives dconcept.col(s) / P.
  Matrix dscores(nc, n * p);
  for (Index s = 0; s < n; ++s) {
    const Vector g = dconcept.col(s) / static_cast<double>(p);
    for (Index j = s * p; j < (s + 1) * p; ++j) {
      const auto o = hc.attention.col(j);
      dscores.col(j) = o.cwiseProduct((g.array() - o.dot(g)).matrix());
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim));
  const Matrix dqueries = (ck.keys.as_matrix().transpose() * dscores) * scale;
  out.gradients[head + 1].as_matrix().noalias() = (dscores * hc.queries.transpose()) * scale;
  out.gradients[head].as_matrix().noalias() = dqueries * features.transpose();
  cache.dpost.noalias() = ck.query_proj.as_matrix().transpose() * dqueries;
  backward_stack(ck, cache, &out.gradients, false);
  return out;
}

// ---- training ---------------------------------------------------------------------------

Checkpoint train(const ModelConfig& config, const Dataset& train_set, const Dataset& val_set,
                 const EpochCallback& on_epoch) {
  config.validate();
  train_set.validate();
  if (static_cast<int>(train_set.concepts->size()) != config.n_concepts)
    throw ValidationError("training set concept count " + std::to_string(train_set.concepts->size()) +
                          " does not match config n_concepts " + std::to_string(config.n_concepts));
  if (!val_set.samples.empty() && val_set.concepts && !(*val_set.concepts == *train_set.concepts))
    throw ValidationError("training and validation sets use different concept sets");

  Checkpoint ck = Checkpoint::initialize(config);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng = make_rng(config.seed, "train", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    std::vector<const Sample*> batch;
    for (std::size_t start = 0, b = 0; start < order.size(); start += bs, ++b) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(&train_set.samples[order[i]]);
      LossAndGradients lg = loss_and_gradients(ck, batch);
      if (!std::isfinite(lg.loss.total))
        throw NumericError("training diverged: loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      auto params = ck.parameters();
      for (std::size_t i = 0; i < params.size(); ++i)
        *params[i] = sgd_step(*params[i], lg.gradients[i], config.lr, config.weight_decay);
      loss_sum += lg.loss.total * static_cast<double>(batch.size());
      correct += static_cast<std::size_t>(lg.loss.correct);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    m.val_accuracy = val_set.samples.empty() ? 0.0 : evaluate(ck, val_set);
    ck.meta.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  ck.meta.seed = config.seed;
  ck.meta.final_train_accuracy = evaluate(ck, train_set);
  ck.meta.final_val_accuracy = val_set.samples.empty() ? 0.0 : evaluate(ck, val_set);
  return ck;
}

// ---- filter probing --------------------------------------------------------------------

std::vector<double> filter_responses(const Checkpoint& ck, std::span<const Tensor> images, int layer,
                                     std::span<const int> filters, std::vector<Tensor>* grad_images) {
  const Shape ls = ck.config.layer_shape(layer);
  if (filters.size() != images.size()) throw DimensionError("filter_responses: one filter per image required");
  for (int f : filters)
    if (f < 0 || f >= ls[0])
      throw IndexError("filter " + std::to_string(f) + " out of range for layer " + std::to_string(layer) + " with " +
                       std::to_string(ls[0]) + " filters");
  if (images.empty()) return {};
  const Index n = static_cast<Index>(images.size());
  StackCache& cache = scratch_cache();
  forward_stack(ck, stack_images(images, ck.config), n, layer, cache);
  const LayerCache& top = cache.layers.back();
  const Index hw = top.h * top.w;
  std::vector<double> out(images.size());
  for (Index s = 0; s < n; ++s) out[static_cast<std::size_t>(s)] = top.post.row(filters[static_cast<std::size_t>(s)]).segment(s * hw, hw).mean();
  if (grad_images) {
    cache.dpost.setZero(top.post.rows(), top.post.cols());
    for (Index s = 0; s < n; ++s)
      cache.dpost.row(filters[static_cast<std::size_t>(s)]).segment(s * hw, hw).setConstant(1.0 / static_cast<double>(hw));
    backward_stack(ck, cache, nullptr, true);
    const Shape in = ck.config.input_shape();
    const Index in_hw = in[1] * in[2];
    grad_images->clear();
    for (Index s = 0; s < n; ++s) {
      Tensor g(in);
      g.as_matrix(in[0], in_hw) = cache.din.middleCols(s * in_hw, in_hw);
      grad_images->push_back(std::move(g));
    }
  }
  return out;
}

double filter_response(const Checkpoint& ck, const Tensor& image, int layer, int filter, Tensor* grad_image) {
  const int filters[1] = {filter};
  std::vector<Tensor> grads;
  const double r = filter_responses(ck, std::span<const Tensor>(&image, 1), layer, filters, grad_image ? &grads : nullptr)[0];
  if (grad_image) *grad_image = std::move(grads[0]);
  return r;
}

// ---- checkpoint files ------------------------------------------------------------------

namespace {

json metadata_json(const TrainingMetadata& m) {
  json epochs = json::array();
  for (const auto& e : m.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_accuracy", e.val_accuracy}});
  return {{"final_train_accuracy", m.final_train_accuracy},
          {"final_val_accuracy", m.final_val_accuracy},
          {"seed", m.seed},
          {"epochs", epochs}};
}

TrainingMetadata metadata_from(const json& j) {
  TrainingMetadata m;
  m.final_train_accuracy = j.at("final_train_accuracy").get<double>();
  m.final_val_accuracy = j.at("final_val_accuracy").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("epochs"))
    m.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                        e.at("train_accuracy").get<double>(), e.at("val_accuracy").get<double>()});
  return m;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream out(std::ios::binary);
  out.write("CFCK", 4);
  binio::write_u32(out, kCheckpointVersion);
  const std::string header = json{{"config", json::parse(ck.config.to_json())}, {"meta", metadata_json(ck.meta)}}.dump();
  binio::write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Tensor* t : ck.parameters()) write_tensor(out, *t);
  return out.str();
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4)) throw IoError(source + ": truncated checkpoint");
  if (std::string(magic, 4) != "CFCK") throw ParseError(source + ": bad checkpoint magic");
  const std::uint32_t version = binio::read_u32(in, source);
  if (version != kCheckpointVersion)
    throw ParseError(source + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t len = binio::read_u64(in, source);
  if (len > bytes.size()) throw ParseError(source + ": corrupt checkpoint header length");
  std::string header(len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(len))) throw IoError(source + ": truncated checkpoint header");
  json doc;
  try {
    doc = json::parse(header);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": corrupt checkpoint header: " + e.what());
  }
  Checkpoint ck = Checkpoint::zeros(config_from(doc.at("config")));
  ck.meta = metadata_from(doc.at("meta"));
  for (Tensor* t : ck.parameters()) {
    Tensor loaded = read_tensor(in, source);
    if (loaded.shape() != t->shape())
      throw DimensionError(source + ": tensor shape " + shape_string(loaded.shape()) + " where config implies " +
                           shape_string(t->shape()));
    *t = std::move(loaded);
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path.string());
}

}  // namespace conceptflow
