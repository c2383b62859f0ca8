#pragma once

// Run configuration files: a TrainConfig document plus the dataset manifest
// to train on. Unknown keys are errors; the resolved document is echoed into
// the run directory so the run can be repeated from that directory alone.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "stagegen/image_io.hpp"
#include "stagegen/training.hpp"

namespace stagegen {

inline constexpr const char* kResolvedConfigFile = "resolved-config.json";

struct RunConfig {
  std::string manifest;  // manifest file or dataset directory
  TrainConfig train;
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = c.train;
  j["manifest"] = c.manifest;
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  auto rest = j;
  if (rest.contains("manifest")) {
    if (!rest["manifest"].is_string()) throw ConfigError("run config: 'manifest' must be a string");
    c.manifest = rest["manifest"].get<std::string>();
    rest.erase("manifest");
  }
  from_json(rest, c.train);
}

inline RunConfig parse_run_config(const std::string& text, const std::string& identity = "config") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(identity + ": " + e.what());
  }
  try {
    return j.get<RunConfig>();
  } catch (const ConfigError& e) {
    throw ConfigError(identity + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()), path.string());
}

inline std::string dump_config(const nlohmann::json& j) { return j.dump(2) + "\n"; }

/// Writes <dir>/resolved-config.json.
inline void echo_config(const std::filesystem::path& dir, const nlohmann::json& j) {
  std::filesystem::create_directories(dir);
  write_text_atomic(dir / kResolvedConfigFile, dump_config(j));
}

}  // namespace stagegen
