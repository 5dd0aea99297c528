#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "conceptflow/backbone.hpp"
#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"

using namespace conceptflow;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.layer_channels = {8, 8};
  c.patch_dim = 8;
  c.n_concepts = 5;
  c.input_height = 8;
  c.input_width = 8;
  c.seed = 3;
  return c;
}

std::vector<Sample> micro_samples(const ModelConfig& c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "micro");
  std::vector<Sample> out;
  for (int s = 0; s < 4; ++s) {
    Sample x;
    x.image = Tensor(c.input_shape());
    for (Index i = 0; i < x.image.size(); ++i) x.image.raw()[i] = uniform01(rng);
    x.class_label = s % 2;
    x.concept_vector = Vector::Zero(c.n_concepts);
    x.concept_vector[s % c.n_concepts] = 1;
    x.concept_vector[(s + 2) % c.n_concepts] = 1;
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace

TEST_CASE("whole-model gradients match central differences") {
  const ModelConfig c = micro_config();
  Checkpoint ck = Checkpoint::initialize(c);
  const auto samples = micro_samples(c, 1);
  std::vector<const Sample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  const auto analytic = loss_and_gradients(ck, batch);
  auto params = ck.parameters();
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Index i = 0; i < params[p]->size(); ++i) {
      double& w = params[p]->raw()[i];
      const double saved = w;
      w = saved + h;
      const double up = loss_and_gradients(ck, batch, false).loss.total;
      w = saved - h;
      const double down = loss_and_gradients(ck, batch, false).loss.total;
      w = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.gradients[p].raw()[i];
      const double rel = std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
      if (rel > worst) {
        worst = rel;
        if (rel > 1e-3) MESSAGE("param " << p << " entry " << i << " analytic " << a << " numeric " << numeric);
      }
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("concept attention sums to one and zero keys give uniform attention") {
  const ModelConfig c = micro_config();
  Checkpoint ck = Checkpoint::initialize(c);
  for (const auto& s : micro_samples(c, 2)) {
    const ForwardTrace t = forward(ck, s.image);
    CHECK(std::abs(t.concept_attention.sum() - 1.0) < 1e-10);
    CHECK((t.concept_attention.array() >= 0).all());
    CHECK(t.attention.rows() == c.patch_count());
  }
  ck.keys = Tensor(ck.keys.shape());
  const ForwardTrace t = forward(ck, micro_samples(c, 3)[0].image);
  for (Index i = 0; i < c.n_concepts; ++i) CHECK(std::abs(t.concept_attention[i] - 1.0 / c.n_concepts) < 1e-15);
}

TEST_CASE("two-patch head matches a direct evaluation") {
  ModelConfig c;
  c.layer_channels = {1};
  c.patch_dim = 8;
  c.n_concepts = 3;
  c.input_height = 1;
  c.input_width = 2;
  Checkpoint ck = Checkpoint::zeros(c);
  ck.layers[0].kernels(0, 0, 1, 1) = 1.0;  // M = relu(image)
  const double wq[8] = {0.5, -1.0, 0.25, 2.0, 0.0, 1.5, -0.5, 1.0};
  const double k[3][8] = {{1, 0, 0, 0, 0, 0, 0, 0}, {0, 1, 0, 1, 0, 0, 0, 0}, {0.5, 0.5, 0.5, 0.5, -1, 0, 0, 0}};
  const double v[3][2] = {{0.2, -0.1}, {-0.3, 0.4}, {0.05, 0.0}};
  for (int r = 0; r < 8; ++r) ck.query_proj(r, 0) = wq[r];
  for (int i = 0; i < 3; ++i) {
    for (int r = 0; r < 8; ++r) ck.keys(i, r) = k[i][r];
    for (int j = 0; j < 2; ++j) ck.values(i, j) = v[i][j];
  }
  const Tensor image = Tensor::from_values({1, 1, 2}, {0.8, 0.3});
  const ForwardTrace t = forward(ck, image);

  const double pix[2] = {0.8, 0.3};
  double a[3] = {0, 0, 0};
  for (int p = 0; p < 2; ++p) {
    double score[3], z = 0;
    for (int i = 0; i < 3; ++i) {
      score[i] = 0;
      for (int r = 0; r < 8; ++r) score[i] += wq[r] * pix[p] * k[i][r];
      score[i] = std::exp(score[i] / std::sqrt(8.0));
      z += score[i];
    }
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(t.attention(p, i) - score[i] / z) < 1e-14);
      a[i] += score[i] / z / 2.0;
    }
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(t.concept_attention[i] - a[i]) < 1e-14);
  for (int j = 0; j < 2; ++j) {
    double logit = 0;
    for (int i = 0; i < 3; ++i) logit += a[i] * v[i][j];
    CHECK(std::abs(t.logits[j] - 3.0 * logit) < 1e-14);
  }
}

TEST_CASE("batched forward equals per-image forward") {
  const ModelConfig c = micro_config();
  const Checkpoint ck = Checkpoint::initialize(c);
  const auto samples = micro_samples(c, 4);
  std::vector<Tensor> images;
  for (const auto& s : samples) images.push_back(s.image);
  const BatchOutput b = forward_batch(ck, images);
  for (std::size_t s = 0; s < images.size(); ++s) {
    const ForwardTrace t = forward(ck, images[s]);
    CHECK((b.concept_attention.col(static_cast<Index>(s)) - t.concept_attention).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((b.logits.col(static_cast<Index>(s)) - t.logits).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(forward(ck, Tensor({1, 9, 8})), DimensionError);
}

TEST_CASE("concept weight zero removes the concept term from gradients") {
  ModelConfig c = micro_config();
  c.concept_loss_weight = 0.0;
  const Checkpoint ck = Checkpoint::initialize(c);
  auto samples = micro_samples(c, 5);
  auto other = samples;
  for (auto& s : other) s.concept_vector = Vector::Ones(c.n_concepts);
  std::vector<const Sample*> a, b;
  for (std::size_t i = 0; i < samples.size(); ++i) a.push_back(&samples[i]), b.push_back(&other[i]);
  const auto ga = loss_and_gradients(ck, a), gb = loss_and_gradients(ck, b);
  CHECK(ga.loss.total == ga.loss.classification);
  for (std::size_t p = 0; p < ga.gradients.size(); ++p) CHECK(ga.gradients[p] == gb.gradients[p]);
}

TEST_CASE("permuting concepts consistently leaves logits and loss unchanged") {
  const ModelConfig c = micro_config();
  const Checkpoint ck = Checkpoint::initialize(c);
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  Checkpoint permuted = ck;
  auto samples = micro_samples(c, 6);
  auto moved = samples;
  for (Index i = 0; i < c.n_concepts; ++i) {
    for (Index r = 0; r < c.patch_dim; ++r) permuted.keys(i, r) = ck.keys(perm[i], r);
    for (Index j = 0; j < c.n_classes; ++j) permuted.values(i, j) = ck.values(perm[i], j);
    for (std::size_t s = 0; s < samples.size(); ++s) moved[s].concept_vector[i] = samples[s].concept_vector[perm[i]];
  }
  std::vector<const Sample*> a, b;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    a.push_back(&samples[i]), b.push_back(&moved[i]);
    CHECK((forward(ck, samples[i].image).logits - forward(permuted, samples[i].image).logits).cwiseAbs().maxCoeff() <
          1e-10);
  }
  CHECK(std::abs(loss_and_gradients(ck, a, false).loss.total - loss_and_gradients(permuted, b, false).loss.total) <
        1e-10);
}

TEST_CASE("evaluate counts argmax-correct predictions") {
  auto set = std::make_shared<const ConceptSet>(bundled_cmnist_concepts());
  const Dataset ds = generate_glyphs(1000, 8, set, "test");
  ModelConfig c;
  c.layer_channels = {4, 4};
  const Checkpoint zero = Checkpoint::zeros(c);
  const double acc = evaluate(zero, ds);
  CHECK(std::abs(acc - 0.5) <= 0.05);
  std::size_t even = 0;
  for (const auto& s : ds.samples) even += s.class_label == 0;
  CHECK(acc == static_cast<double>(even) / 1000.0);  // ties go to class 0

  c.seed = 9;
  const Checkpoint ck = Checkpoint::initialize(c);
  const std::vector<std::size_t> first{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const Dataset ten = ds.subset(first);
  int hits = 0;
  for (const auto& s : ten.samples) {
    const Vector logits = forward(ck, s.image).logits;
    hits += (logits[1] > logits[0] ? 1 : 0) == s.class_label;
  }
  CHECK(evaluate(ck, ten) == hits / 10.0);
  const std::vector<std::size_t> one{0};
  Checkpoint fixed = zero;
  const Dataset single = ds.subset(one);
  fixed.values(0, single.samples[0].class_label) = 1.0;
  CHECK(evaluate(fixed, single) == 1.0);
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
  auto set = std::make_shared<const ConceptSet>(bundled_cmnist_concepts());
  const Dataset train_set = generate_glyphs(96, 1, set, "train");
  const Dataset val_set = generate_glyphs(48, 1, set, "val");
  ModelConfig c;
  c.layer_channels = {4, 6};
  c.patch_dim = 8;
  c.epochs = 2;
  c.batch_size = 16;
  c.seed = 5;
  int calls = 0;
  const Checkpoint a = train(c, train_set, val_set, [&](const EpochMetrics&) { ++calls; });
  const Checkpoint b = train(c, train_set, val_set);
  CHECK(calls == 2);
  const std::string bytes = serialize_checkpoint(a);
  CHECK(bytes == serialize_checkpoint(b));
  REQUIRE(a.meta.epochs.size() == 2);
  CHECK(a.meta.final_val_accuracy == a.meta.epochs.back().val_accuracy);

  const auto path = std::filesystem::temp_directory_path() / "conceptflow_backbone_test.cfck";
  save_checkpoint(a, path);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(serialize_checkpoint(loaded) == bytes);
  CHECK(evaluate(loaded, val_set) == a.meta.final_val_accuracy);
  std::filesystem::remove(path);

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad), ParseError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(deserialize_checkpoint(bad), ParseError);
  CHECK_THROWS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 9)));
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ck.cfck"), IoError);
}

TEST_CASE("model config validation and JSON") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.patch_count() == 49);
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
  ModelConfig bad = c;
  bad.patch_dim = 4;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = c;
  bad.layer_channels.clear();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(ModelConfig::from_json("{"), ParseError);
}
