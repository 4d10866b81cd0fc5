#pragma once

#include "cbav/training.hpp"

#include <filesystem>
#include <string>

namespace cbav {

// Training run description. `preset` picks the base values ("desk" or
// "paper") and the remaining keys override them.
struct RunConfig {
  std::string preset = "desk";
  std::string template_name = "humanoid";
  TrainConfig train = TrainConfig::desk();
};

TrainConfig preset_config(const std::string& name);

// Flat TOML subset: [section] headers, key = value with strings, integers,
// floats and booleans, # comments. Unknown, duplicate or missing required
// keys (preset, template) throw ConfigError naming the key.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

// Every key, in the layout parse_run_config accepts.
std::string format_run_config(const RunConfig& config);

}  // namespace cbav
