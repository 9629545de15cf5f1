// SPDX-License-Identifier: Apache-2.0
//
// The run configuration shared by every CLI command. One JSON document
// holds every knob; unknown keys are rejected.
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "elite/datasets.hpp"
#include "elite/distill.hpp"
#include "elite/labelgen.hpp"

namespace elite {

/// Raised for a config that fails schema or range checks; the message
/// names the offending field.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class TeacherLabels { Pseudo, Sparse };

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t scene_count = 8;
  std::size_t train_count = 6;

  SynthParams synth;
  PLGParams plg;
  distill::TrainConfig train;
  TeacherLabels teacher_labels = TeacherLabels::Pseudo;
  unsigned threads = 0;

  std::filesystem::path scene_dir = "work/scenes";
  std::filesystem::path label_dir = "work/labels";
  std::filesystem::path checkpoint = "work/model.ckpt";
  std::filesystem::path history = "work/history.jsonl";
  std::filesystem::path train_report = "work/train_report.json";
  std::filesystem::path report = "work/eval_report.json";
  std::filesystem::path render_dir = "work/render";

  RunConfig();

  void validate() const;
  /// Effective worker count after applying the ELITE_THREADS cap.
  unsigned worker_threads() const;
};

RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const RunConfig& config);

/// Applies "key=value" overrides. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments);

}  // namespace elite
