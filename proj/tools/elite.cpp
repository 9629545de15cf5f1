// SPDX-License-Identifier: Apache-2.0
//
// elite <synth|project|plg|train|eval|render> --config <path> [--set key=value ...]
//
// Exit status: 0 success, 1 invalid config or usage, 2 runtime failure.
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "elite/config.hpp"
#include "elite/pipeline.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR segmentation with image-guided pseudo-labels and distillation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  for (const char* name : {"synth", "project", "plg", "train", "eval", "render"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--set", overrides, "key=value override, repeatable");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "elite: " << one_line(e.what()) << "\n";
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  elite::RunConfig config;
  try {
    config = elite::load_config(config_path);
    elite::apply_overrides(config, overrides);
  } catch (const std::exception& e) {
    std::cerr << "elite " << command << ": " << one_line(e.what()) << "\n";
    return 1;
  }

  try {
    elite::run_command(command, config);
  } catch (const elite::ConfigError& e) {
    std::cerr << "elite " << command << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "elite " << command << ": " << one_line(e.what()) << "\n";
    return 2;
  }
  return 0;
}
