#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "ftq/simkit.hpp"

namespace ftq {

/// Malformed or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Resolved run settings: the scenario plus campaign-level options.
struct RunSettings {
  ScenarioConfig scenario;
  int runs = 1;
  std::string out_dir = "out";
};

/// Configuration documents use flat "section.key" addressing, e.g.
/// {"quad.mass": 0.75, "nmpc.weights.tilt": 50}. Nested objects are accepted
/// and flattened to the same keys. Unknown keys are rejected.
nlohmann::json flatten_config(const nlohmann::json& doc);

/// Parses and flattens a config file. Throws ConfigError.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// Built-in defaults in flat form; identical to config/default.json.
nlohmann::json default_config();

/// Applies a flat config on top of the defaults. `kind` overrides
/// "scenario.kind" when set. Throws ConfigError; an unknown scenario name
/// raises std::invalid_argument from scenario_from_string.
RunSettings resolve_settings(const nlohmann::json& flat,
                             std::optional<ScenarioKind> kind = std::nullopt);

/// Full snapshot of a resolved scenario in flat form; resolve_settings on it
/// reproduces the scenario.
nlohmann::json settings_to_json(const RunSettings& settings);

}  // namespace ftq
