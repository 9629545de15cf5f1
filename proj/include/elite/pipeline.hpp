// SPDX-License-Identifier: Apache-2.0
//
// The batch pipeline behind the CLI. Each command reads what the previous
// one wrote under the configured directories.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "elite/config.hpp"
#include "elite/datasets.hpp"
#include "elite/metrics.hpp"

namespace elite {

// Scene directory layout:
//   image.ppm, velodyne.bin, labels.label, calib.txt, truth.label, meta.json
void save_scene(const Scene& scene, const std::filesystem::path& dir);
Scene load_scene(const std::filesystem::path& dir);

void write_label_image(const LabelImage& labels, const std::filesystem::path& path);
LabelImage read_label_image(const std::filesystem::path& path, int width, int height);

std::filesystem::path scene_path(const RunConfig& config, std::size_t index);
std::filesystem::path label_path(const RunConfig& config, std::size_t index);

/// Seed of the index-th synthetic scene.
std::uint64_t scene_seed(std::uint64_t seed, std::size_t index);

/// JSON evaluation report: per-class IoU (null when undefined), mIoU and
/// counts.
std::string eval_report(const metrics::ConfusionMatrix& cm, std::size_t scenes);

void cmd_synth(const RunConfig& config);
void cmd_project(const RunConfig& config);
void cmd_plg(const RunConfig& config);
void cmd_train(const RunConfig& config);
void cmd_eval(const RunConfig& config);
void cmd_render(const RunConfig& config);

/// Dispatches a command by name; unknown names raise ConfigError.
void run_command(const std::string& name, const RunConfig& config);

}  // namespace elite
