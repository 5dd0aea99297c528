#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

// One manifest.json per stage directory: what ran, with which parameters and
// inputs, and what it wrote. `argv` is enough to replay the stage.
namespace conceptflow {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunManifest {
  std::string stage;
  std::uint64_t seed = 0;
  std::vector<std::string> argv;          // stage arguments, replayable
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  std::map<std::string, std::string> inputs;         // role -> path
  std::map<std::string, std::string> input_hashes;   // role -> upstream config hash
  std::vector<std::string> outputs;                  // file names relative to the stage dir
  std::string output_dir;
  std::string started;
  std::string finished;
  std::string config_hash;

  // FNV-1a over stage, seed, params and upstream hashes.
  std::string compute_hash() const;
  std::string to_json() const;
  static RunManifest from_json(const std::string& text, const std::string& source = "<memory>");

  void save(const std::filesystem::path& dir) const;
  static RunManifest load(const std::filesystem::path& path);
};

// UTC ISO-8601 time; SOURCE_DATE_EPOCH, when set, pins it for reproducible manifests.
std::string timestamp_now();

}  // namespace conceptflow
