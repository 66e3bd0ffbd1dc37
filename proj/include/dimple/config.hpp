// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dimple/harness.hpp"
#include "dimple/synth_data.hpp"

namespace dimple {

/// Everything a command needs to reproduce a run.
struct ExperimentConfig {
  TaskSpec task;
  TrainConfig train;
  bool paper_regime = false;

  /// Derives dependent fields: task.seed from the root seed, encoder widths
  /// and patch count from the task, the encoder temperature from loss.tau.
  /// Applies the few-shot regime when enabled, then validates.
  void resolve();
};

/// Every accepted "section.key" name, in echo order.
std::vector<std::string> config_keys();

/// Sets one key. Throws ConfigError naming the closest valid key if `key` is
/// unknown, or describing the value if it does not parse.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const ExperimentConfig& cfg, std::string_view key);

/// Applies "section.key=value".
void apply_override(ExperimentConfig& cfg, std::string_view assignment);

/// Parses the text format: "[section]" headers, "key = value" lines, "#" comments.
ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::string& path);

/// Text form of every key; parse_config(format_config(c)) reproduces c.
std::string format_config(const ExperimentConfig& cfg);

std::size_t edit_distance(std::string_view a, std::string_view b);

}  // namespace dimple
