#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "conceptflow/errors.hpp"
#include "conceptflow/manifest.hpp"

using namespace conceptflow;

namespace {

RunManifest sample() {
  RunManifest m;
  m.stage = "pathways";
  m.seed = 3;
  m.argv = {"pathways", "--k", "7"};
  m.params = {{"k", 7}, {"tau", 0.8}};
  m.inputs = {{"attend", "runs/attend"}};
  m.input_hashes = {{"attend", "00ff"}};
  m.outputs = {"b1_spearman.cftn", "summary.json"};
  m.output_dir = "runs/pathways";
  m.started = "2020-01-01T00:00:00Z";
  m.finished = "2020-01-01T00:00:01Z";
  m.config_hash = m.compute_hash();
  return m;
}

}  // namespace

TEST_CASE("manifest JSON round trip") {
  const RunManifest m = sample();
  const RunManifest back = RunManifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  CHECK(back.compute_hash() == m.config_hash);
  CHECK_THROWS_AS(RunManifest::from_json("{"), ParseError);

  const auto dir = std::filesystem::temp_directory_path() / "conceptflow_manifest_test";
  std::filesystem::create_directories(dir);
  m.save(dir);
  CHECK(RunManifest::load(dir / "manifest.json").to_json() == m.to_json());
  std::filesystem::remove_all(dir);
}

TEST_CASE("config hash tracks parameters, not timestamps") {
  RunManifest a = sample(), b = sample();
  b.started = "2030-05-05T00:00:00Z";
  b.output_dir = "elsewhere";
  CHECK(a.compute_hash() == b.compute_hash());
  b.params["tau"] = 0.7;
  CHECK(a.compute_hash() != b.compute_hash());
  b = sample();
  b.seed = 4;
  CHECK(a.compute_hash() != b.compute_hash());
  b = sample();
  b.input_hashes["attend"] = "00fe";
  CHECK(a.compute_hash() != b.compute_hash());
  CHECK(a.config_hash.size() == 16);
}

TEST_CASE("SOURCE_DATE_EPOCH pins timestamps") {
  setenv("SOURCE_DATE_EPOCH", "86400", 1);
  CHECK(timestamp_now() == "1970-01-02T00:00:00Z");
  unsetenv("SOURCE_DATE_EPOCH");
  CHECK(timestamp_now().size() == 20);
}
