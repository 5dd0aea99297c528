#include "conceptflow/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"

namespace conceptflow {

using nlohmann::ordered_json;

std::string RunManifest::compute_hash() const {
  ordered_json j{{"stage", stage}, {"seed", seed}, {"params", params}, {"input_hashes", input_hashes}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

std::string RunManifest::to_json() const {
  ordered_json j;
  j["stage"] = stage;
  j["tool_version"] = kToolVersion;
  j["seed"] = seed;
  j["config_hash"] = config_hash.empty() ? compute_hash() : config_hash;
  j["argv"] = argv;
  j["params"] = params;
  j["inputs"] = inputs;
  j["input_hashes"] = input_hashes;
  j["output_dir"] = output_dir;
  j["outputs"] = outputs;
  j["timestamps"] = {{"started", started}, {"finished", finished}};
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text, const std::string& source) {
  RunManifest m;
  try {
    const ordered_json j = ordered_json::parse(text);
    m.stage = j.at("stage").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.params = j.at("params");
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.input_hashes = j.value("input_hashes", std::map<std::string, std::string>{});
    m.output_dir = j.at("output_dir").get<std::string>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.started = j.at("timestamps").at("started").get<std::string>();
    m.finished = j.at("timestamps").at("finished").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": invalid manifest: " + e.what());
  }
  return m;
}

void RunManifest::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << to_json();
}

RunManifest RunManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str(), path.string());
}

std::string timestamp_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  if (const char* pinned = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(pinned, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace conceptflow
