#include <doctest.h>

#include <filesystem>

#include "conceptflow/backbone.hpp"
#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"
#include "conceptflow/scanner.hpp"
#include "conceptflow/tensor_io.hpp"

using namespace conceptflow;

namespace {

Checkpoint small_model() {
  ModelConfig c;
  c.layer_channels = {4, 6};
  c.patch_dim = 8;
  c.input_height = 12;
  c.input_width = 12;
  c.seed = 5;
  return Checkpoint::initialize(c);
}

ScanParams quick(int steps = 16) {
  ScanParams p;
  p.steps = steps;
  p.seed = 3;
  return p;
}

}  // namespace

TEST_CASE("zero steps returns the clamped seeded init") {
  const Checkpoint ck = small_model();
  const LearningImage li = learning_image(ck, 1, 2, quick(0));
  CHECK(li.image.shape() == ck.config.input_shape());
  CHECK(li.activation == li.initial_activation);
  CHECK(li.image.data().minCoeff() >= 0.0);
  CHECK(li.image.data().maxCoeff() <= quick().init_amplitude);
  CHECK(li.activation == doctest::Approx(filter_response(ck, li.image, 1, 2)).epsilon(1e-12));
}

TEST_CASE("learning images are deterministic, bounded and never worse than the init") {
  const Checkpoint ck = small_model();
  const std::string before = serialize_checkpoint(ck);
  for (int layer : {1, 2}) {
    const auto all = scan_layer(ck, layer, quick(), 4);
    CHECK(all.size() == static_cast<std::size_t>(ck.config.layer_channels[layer - 1]));
    for (const auto& li : all) {
      CHECK(li.image.data().minCoeff() >= 0.0);
      CHECK(li.image.data().maxCoeff() <= 1.0);
      CHECK(li.activation >= li.initial_activation);
      CHECK(li.activation == doctest::Approx(filter_response(ck, li.image, layer, li.filter)).epsilon(1e-9));
      // The batched scan matches the single-filter path.
      const LearningImage one = learning_image(ck, layer, li.filter, quick());
      CHECK(one.image == li.image);
    }
  }
  CHECK(serialize_checkpoint(ck) == before);
  ScanParams other = quick();
  other.seed = 4;
  CHECK_FALSE(learning_image(ck, 1, 0, other).image == learning_image(ck, 1, 0, quick()).image);
}

TEST_CASE("scanner rejects bad targets and parameters") {
  const Checkpoint ck = small_model();
  CHECK_THROWS_AS(learning_image(ck, 0, 0, quick()), IndexError);
  CHECK_THROWS_AS(learning_image(ck, 3, 0, quick()), IndexError);
  CHECK_THROWS_AS(learning_image(ck, 1, 4, quick()), IndexError);
  CHECK_THROWS_AS(learning_image(ck, 1, -1, quick()), IndexError);
  ScanParams bad = quick();
  bad.step_size = 0;
  CHECK_THROWS_AS(learning_image(ck, 1, 0, bad), ValidationError);
  bad = quick();
  bad.steps = -1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("blend is a clamped sum") {
  Rng rng = make_rng(1, "t");
  Tensor a({1, 5, 5}), b({1, 5, 5});
  for (Index i = 0; i < a.size(); ++i) {
    a.raw()[i] = uniform01(rng);
    b.raw()[i] = uniform01(rng);
  }
  const Tensor out = blend(a, b);
  for (Index i = 0; i < a.size(); ++i) {
    CHECK(out.raw()[i] == std::min(1.0, a.raw()[i] + b.raw()[i]));
    CHECK(out.raw()[i] >= a.raw()[i]);
  }
  CHECK(blend(a, Tensor({1, 5, 5})) == a);
  CHECK((blend(Tensor::constant({1, 5, 5}, 1.0), b).data().array() == 1.0).all());
  CHECK_THROWS_AS(blend(a, Tensor({1, 4, 5})), DimensionError);
}

TEST_CASE("learning image cache round-trips") {
  const Checkpoint ck = small_model();
  LearningImageCache cache;
  for (auto& li : scan_layer(ck, 2, quick(4))) cache.insert(std::move(li));
  CHECK(cache.size() == 6);
  CHECK(cache.layers() == std::vector<int>{2});
  CHECK_THROWS_AS(cache.at(1, 0), IndexError);
  const auto dir = std::filesystem::temp_directory_path() / "cf_scan_cache";
  std::filesystem::remove_all(dir);
  cache.save(dir, quick(4));
  CHECK(std::filesystem::exists(dir / learning_image_filename(2, 5)));
  CHECK(learning_image_filename(2, 5) == "l2_f5.cftn");
  const auto back = LearningImageCache::load(dir);
  CHECK(back.filters(2) == cache.filters(2));
  for (int m : cache.filters(2)) {
    CHECK(back.at(2, m).image == cache.at(2, m).image);
    CHECK(back.at(2, m).activation == cache.at(2, m).activation);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(LearningImageCache::load(dir), IoError);
}
