// SPDX-License-Identifier: Apache-2.0
#include "elite/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace elite {

using nlohmann::json;
using nlohmann::ordered_json;

RunConfig::RunConfig() { train.seed = seed; }

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError("config field '" + field + "' " + what);
}

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + key + "' has the wrong type");
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  require(v.is_number_integer() || v.is_number_unsigned(), key, "must be an integer");
  const auto n = v.get<long long>();
  require(n >= 0, key, "must be non-negative");
  return static_cast<std::size_t>(n);
}

double get_real(const json& v, const std::string& key) {
  require(v.is_number(), key, "must be a number");
  return v.get<double>();
}

using Setter = std::function<void(RunConfig&, const json&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, const json& v, const std::string& k) { c.seed = get_count(v, k); }},
      {"scene_count", [](RunConfig& c, const json& v, const std::string& k) { c.scene_count = get_count(v, k); }},
      {"train_count", [](RunConfig& c, const json& v, const std::string& k) { c.train_count = get_count(v, k); }},
      {"width", [](RunConfig& c, const json& v, const std::string& k) { c.synth.width = static_cast<int>(get_count(v, k)); }},
      {"height", [](RunConfig& c, const json& v, const std::string& k) { c.synth.height = static_cast<int>(get_count(v, k)); }},
      {"class_count", [](RunConfig& c, const json& v, const std::string& k) { c.synth.class_count = get_count(v, k); }},
      {"instances", [](RunConfig& c, const json& v, const std::string& k) { c.synth.instances = get_count(v, k); }},
      {"points_per_class", [](RunConfig& c, const json& v, const std::string& k) { c.synth.points_per_class = get_count(v, k); }},
      {"sparsity", [](RunConfig& c, const json& v, const std::string& k) { c.synth.sparsity = get_real(v, k); }},
      {"lr_size",
       [](RunConfig& c, const json& v, const std::string& k) {
         if (v.is_string()) {
           require(v.get<std::string>() == "quarter", k, "must be \"quarter\" or [height, width]");
           c.plg.lr_height = c.plg.lr_width = 0;
           return;
         }
         require(v.is_array() && v.size() == 2, k, "must be \"quarter\" or [height, width]");
         c.plg.lr_height = static_cast<int>(get_count(v[0], k));
         c.plg.lr_width = static_cast<int>(get_count(v[1], k));
         require(c.plg.lr_height > 0 && c.plg.lr_width > 0, k, "entries must be positive");
       }},
      {"theta_high", [](RunConfig& c, const json& v, const std::string& k) { c.plg.theta_high = get_real(v, k); }},
      {"theta_low", [](RunConfig& c, const json& v, const std::string& k) { c.plg.theta_low = get_real(v, k); }},
      {"theta_stability", [](RunConfig& c, const json& v, const std::string& k) { c.plg.theta_stability = get_real(v, k); }},
      {"theta_box_nms", [](RunConfig& c, const json& v, const std::string& k) { c.plg.theta_box_nms = get_real(v, k); }},
      {"binarize_threshold", [](RunConfig& c, const json& v, const std::string& k) { c.plg.binarize_threshold = get_real(v, k); }},
      {"stability_offset", [](RunConfig& c, const json& v, const std::string& k) { c.plg.stability_offset = get_real(v, k); }},
      {"stages", [](RunConfig& c, const json& v, const std::string& k) { c.train.stages = get_count(v, k); }},
      {"hidden", [](RunConfig& c, const json& v, const std::string& k) { c.train.hidden = get_count(v, k); }},
      {"grid", [](RunConfig& c, const json& v, const std::string& k) { c.train.grid = get_count(v, k); }},
      {"rank", [](RunConfig& c, const json& v, const std::string& k) { c.train.rank = get_count(v, k); }},
      {"adapter",
       [](RunConfig& c, const json& v, const std::string& k) {
         const auto s = get_as<std::string>(v, k);
         require(s == "lora" || s == "adalora", k, "must be \"lora\" or \"adalora\"");
         c.train.adapter = s == "lora" ? nets::AdapterKind::Lora : nets::AdapterKind::AdaLora;
       }},
      {"base_voxel_edge", [](RunConfig& c, const json& v, const std::string& k) { c.train.base_voxel_edge = get_real(v, k); }},
      {"learning_rate", [](RunConfig& c, const json& v, const std::string& k) { c.train.learning_rate = get_real(v, k); }},
      {"epochs", [](RunConfig& c, const json& v, const std::string& k) { c.train.epochs = get_count(v, k); }},
      {"batch", [](RunConfig& c, const json& v, const std::string& k) { c.train.batch = get_count(v, k); }},
      {"lambda_kd", [](RunConfig& c, const json& v, const std::string& k) { c.train.lambda_kd = get_real(v, k); }},
      {"lambda_orth", [](RunConfig& c, const json& v, const std::string& k) { c.train.lambda_orth = get_real(v, k); }},
      {"adalora_budget", [](RunConfig& c, const json& v, const std::string& k) { c.train.adalora_budget = get_count(v, k); }},
      {"realloc_every", [](RunConfig& c, const json& v, const std::string& k) { c.train.realloc_every = get_count(v, k); }},
      {"kd_stages",
       [](RunConfig& c, const json& v, const std::string& k) {
         require(v.is_array(), k, "must be an array of stage numbers");
         c.train.kd_stages.clear();
         for (const auto& e : v) c.train.kd_stages.push_back(get_count(e, k));
       }},
      {"weighted_ce", [](RunConfig& c, const json& v, const std::string& k) {
         require(v.is_boolean(), k, "must be a boolean");
         c.train.weighted_ce = v.get<bool>();
       }},
      {"teacher_labels",
       [](RunConfig& c, const json& v, const std::string& k) {
         const auto s = get_as<std::string>(v, k);
         require(s == "pseudo" || s == "sparse", k, "must be \"pseudo\" or \"sparse\"");
         c.teacher_labels = s == "pseudo" ? TeacherLabels::Pseudo : TeacherLabels::Sparse;
       }},
      {"threads", [](RunConfig& c, const json& v, const std::string& k) { c.threads = static_cast<unsigned>(get_count(v, k)); }},
      {"scene_dir", [](RunConfig& c, const json& v, const std::string& k) { c.scene_dir = get_as<std::string>(v, k); }},
      {"label_dir", [](RunConfig& c, const json& v, const std::string& k) { c.label_dir = get_as<std::string>(v, k); }},
      {"checkpoint", [](RunConfig& c, const json& v, const std::string& k) { c.checkpoint = get_as<std::string>(v, k); }},
      {"history", [](RunConfig& c, const json& v, const std::string& k) { c.history = get_as<std::string>(v, k); }},
      {"train_report", [](RunConfig& c, const json& v, const std::string& k) { c.train_report = get_as<std::string>(v, k); }},
      {"report", [](RunConfig& c, const json& v, const std::string& k) { c.report = get_as<std::string>(v, k); }},
      {"render_dir", [](RunConfig& c, const json& v, const std::string& k) { c.render_dir = get_as<std::string>(v, k); }},
  };
  return table;
}

RunConfig from_object(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  const auto& table = setters();
  for (const auto& [key, value] : doc.items()) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("config field '" + key + "' is not a known key");
    it->second(c, value, key);
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  require(scene_count >= 1, "scene_count", "must be at least 1");
  require(train_count >= 1 && train_count <= scene_count, "train_count", "must lie in [1, scene_count]");
  require(synth.width >= 8, "width", "must be at least 8");
  require(synth.height >= 8, "height", "must be at least 8");
  require(synth.class_count >= 2 && synth.class_count <= max_synth_classes(), "class_count",
          "must lie in [2, " + std::to_string(max_synth_classes()) + "]");
  require(synth.sparsity >= 0.0 && synth.sparsity <= 1.0, "sparsity", "must lie in [0, 1]");
  require(plg.theta_low > 0.0, "theta_low", "must be positive");
  require(plg.theta_high > plg.theta_low, "theta_high", "must exceed theta_low");
  require(plg.theta_stability > 0.0 && plg.theta_stability <= 1.0, "theta_stability", "must lie in (0, 1]");
  require(plg.theta_box_nms > 0.0 && plg.theta_box_nms <= 1.0, "theta_box_nms", "must lie in (0, 1]");
  require(plg.stability_offset > 0.0, "stability_offset", "must be positive");
  require(plg.lr_width <= synth.width && plg.lr_height <= synth.height, "lr_size", "must not exceed the image size");
  require(train.stages >= 1, "stages", "must be at least 1");
  require(train.hidden >= 4, "hidden", "must be at least 4");
  require(train.grid >= 1 && synth.width % static_cast<int>(train.grid) == 0 &&
              synth.height % static_cast<int>(train.grid) == 0,
          "grid", "must divide width and height");
  require(train.rank >= 1 && train.rank * 4 <= train.hidden, "rank", "must lie in [1, hidden / 4]");
  require(train.base_voxel_edge > 0.0, "base_voxel_edge", "must be positive");
  require(train.learning_rate > 0.0, "learning_rate", "must be positive");
  require(train.batch >= 1, "batch", "must be at least 1");
  require(train.lambda_kd >= 0.0, "lambda_kd", "must be non-negative");
  require(train.lambda_orth >= 0.0, "lambda_orth", "must be non-negative");
  require(train.adalora_budget <= train.rank * train.stages, "adalora_budget", "must not exceed rank * stages");
  require(train.realloc_every >= 1, "realloc_every", "must be at least 1");
  for (std::size_t s : train.kd_stages) require(s >= 1 && s <= train.stages, "kd_stages", "entries must lie in [1, stages]");
}

unsigned RunConfig::worker_threads() const {
  unsigned n = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  if (const char* cap = std::getenv("ELITE_THREADS")) {
    const long v = std::strtol(cap, nullptr, 10);
    if (v >= 1) n = std::min(n, static_cast<unsigned>(v));
  }
  return n;
}

RunConfig config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_object(doc);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["scene_count"] = c.scene_count;
  j["train_count"] = c.train_count;
  j["width"] = c.synth.width;
  j["height"] = c.synth.height;
  j["class_count"] = c.synth.class_count;
  j["instances"] = c.synth.instances;
  j["points_per_class"] = c.synth.points_per_class;
  j["sparsity"] = c.synth.sparsity;
  if (c.plg.lr_width == 0)
    j["lr_size"] = "quarter";
  else
    j["lr_size"] = {c.plg.lr_height, c.plg.lr_width};
  j["theta_high"] = c.plg.theta_high;
  j["theta_low"] = c.plg.theta_low;
  j["theta_stability"] = c.plg.theta_stability;
  j["theta_box_nms"] = c.plg.theta_box_nms;
  j["binarize_threshold"] = c.plg.binarize_threshold;
  j["stability_offset"] = c.plg.stability_offset;
  j["stages"] = c.train.stages;
  j["hidden"] = c.train.hidden;
  j["grid"] = c.train.grid;
  j["rank"] = c.train.rank;
  j["adapter"] = c.train.adapter == nets::AdapterKind::Lora ? "lora" : "adalora";
  j["base_voxel_edge"] = c.train.base_voxel_edge;
  j["learning_rate"] = c.train.learning_rate;
  j["epochs"] = c.train.epochs;
  j["batch"] = c.train.batch;
  j["lambda_kd"] = c.train.lambda_kd;
  j["lambda_orth"] = c.train.lambda_orth;
  j["adalora_budget"] = c.train.adalora_budget;
  j["realloc_every"] = c.train.realloc_every;
  j["kd_stages"] = c.train.kd_stages;
  j["weighted_ce"] = c.train.weighted_ce;
  j["teacher_labels"] = c.teacher_labels == TeacherLabels::Pseudo ? "pseudo" : "sparse";
  j["threads"] = c.threads;
  j["scene_dir"] = c.scene_dir.string();
  j["label_dir"] = c.label_dir.string();
  j["checkpoint"] = c.checkpoint.string();
  j["history"] = c.history.string();
  j["train_report"] = c.train_report.string();
  j["report"] = c.report.string();
  j["render_dir"] = c.render_dir.string();
  return j.dump(2);
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
  json doc = json::parse(config_to_json(config));
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + a + "' must look like key=value");
    const std::string key = a.substr(0, eq);
    const std::string raw = a.substr(eq + 1);
    if (!setters().contains(key)) throw ConfigError("config field '" + key + "' is not a known key");
    json value = json::parse(raw, nullptr, false);
    doc[key] = value.is_discarded() ? json(raw) : value;
  }
  config = from_object(doc);
}

}  // namespace elite
