// SPDX-License-Identifier: Apache-2.0
#include "elite/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "elite/distill.hpp"
#include "elite/errors.hpp"
#include "elite/labelgen.hpp"
#include "elite/parallel.hpp"
#include "elite/random.hpp"
#include "json.hpp"

namespace elite {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string index_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

void require_exists(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing input " + path.string());
}

std::vector<Scene> load_range(const RunConfig& config, std::size_t begin, std::size_t end) {
  std::vector<Scene> scenes;
  for (std::size_t i = begin; i < end; ++i) scenes.push_back(load_scene(scene_path(config, i)));
  return scenes;
}

}  // namespace

std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) { return derive_seed(seed, 1000 + index); }

fs::path scene_path(const RunConfig& config, std::size_t index) { return config.scene_dir / index_name(index); }
fs::path label_path(const RunConfig& config, std::size_t index) { return config.label_dir / index_name(index); }

void write_label_image(const LabelImage& labels, const fs::path& path) {
  write_kitti_labels(labels.semantic, labels.instance, path);
}

LabelImage read_label_image(const fs::path& path, int width, int height) {
  auto [sem, inst] = read_kitti_labels(path);
  LabelImage out(width, height);
  if (sem.size() != out.semantic.size())
    throw FormatError(path.string() + ": expected " + std::to_string(out.semantic.size()) + " labels, found " +
                      std::to_string(sem.size()));
  out.semantic = std::move(sem);
  out.instance = std::move(inst);
  return out;
}

void save_scene(const Scene& scene, const fs::path& dir) {
  fs::create_directories(dir);
  write_ppm(scene.image, dir / "image.ppm");
  write_kitti_points(scene.cloud, dir / "velodyne.bin");
  write_kitti_labels(scene.point_semantic, scene.point_instance, dir / "labels.label");
  write_calib(scene.cam, dir / "calib.txt");
  write_label_image(scene.pixel_truth, dir / "truth.label");
  ordered_json meta;
  meta["width"] = scene.image.width;
  meta["height"] = scene.image.height;
  meta["class_count"] = scene.class_count;
  meta["points"] = scene.cloud.size();
  ordered_json instances = ordered_json::array();
  for (const auto& inst : scene.instances) {
    ordered_json e;
    e["semantic"] = inst.semantic;
    e["instance"] = inst.instance;
    e["rect"] = {inst.rect.x0, inst.rect.y0, inst.rect.x1, inst.rect.y1};
    e["depth"] = inst.depth;
    instances.push_back(e);
  }
  meta["instances"] = instances;
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

Scene load_scene(const fs::path& dir) {
  require_exists(dir);
  Scene scene;
  json meta;
  try {
    meta = json::parse(read_text(dir / "meta.json"));
    scene.class_count = meta.at("class_count").get<std::size_t>();
    for (const auto& e : meta.at("instances")) {
      SynthInstance inst;
      inst.semantic = e.at("semantic").get<LabelId>();
      inst.instance = e.at("instance").get<LabelId>();
      const auto& r = e.at("rect");
      inst.rect = {r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>(), r.at(3).get<int>()};
      inst.depth = e.at("depth").get<double>();
      scene.instances.push_back(inst);
    }
  } catch (const json::exception& e) {
    throw FormatError((dir / "meta.json").string() + ": " + e.what());
  }
  scene.image = read_ppm(dir / "image.ppm");
  scene.cloud = read_kitti_points(dir / "velodyne.bin");
  auto [sem, inst] = read_kitti_labels(dir / "labels.label");
  if (sem.size() != scene.cloud.size()) throw FormatError(dir.string() + ": label and point counts differ");
  scene.point_semantic = std::move(sem);
  scene.point_instance = std::move(inst);
  scene.cam = read_calib(dir / "calib.txt", scene.image.width, scene.image.height);
  scene.pixel_truth = read_label_image(dir / "truth.label", scene.image.width, scene.image.height);
  return scene;
}

std::string eval_report(const metrics::ConfusionMatrix& cm, std::size_t scenes) {
  ordered_json j;
  j["classes"] = cm.classes();
  j["scenes"] = scenes;
  j["scored_points"] = cm.total();
  json iou = json::array();
  for (const auto& v : cm.iou_per_class()) iou.push_back(v ? json(*v) : json(nullptr));
  j["iou"] = iou;
  j["miou"] = cm.miou();
  json matrix = json::array();
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < cm.classes(); ++p) row.push_back(cm.at(t, p));
    matrix.push_back(row);
  }
  j["confusion"] = matrix;
  return j.dump(2) + "\n";
}

void cmd_synth(const RunConfig& config) {
  parallel_for(config.scene_count, config.worker_threads(), [&](std::size_t i) {
    save_scene(synth_scene(scene_seed(config.seed, i), config.synth), scene_path(config, i));
  });
}

void cmd_project(const RunConfig& config) {
  parallel_for(config.scene_count, config.worker_threads(), [&](std::size_t i) {
    const Scene scene = load_scene(scene_path(config, i));
    const fs::path out = label_path(config, i);
    fs::create_directories(out);
    write_label_image(ppc_gtg(scene), out / "sparse.label");
  });
}

void cmd_plg(const RunConfig& config) {
  const ToySegmenter segmenter;
  std::vector<PLGStats> stats(config.scene_count);
  std::vector<std::size_t> sparse_count(config.scene_count), pseudo_count(config.scene_count);
  // Scenes run in order; the parallelism lives inside each scene.
  for (std::size_t i = 0; i < config.scene_count; ++i) {
    const Scene scene = load_scene(scene_path(config, i));
    const fs::path dir = label_path(config, i);
    require_exists(dir / "sparse.label");
    const LabelImage sparse = read_label_image(dir / "sparse.label", scene.image.width, scene.image.height);
    const PseudoLabel pseudo = generate_pseudo_labels(scene, sparse, segmenter, config.plg, &stats[i],
                                                      config.worker_threads());
    write_label_image(pseudo.labels, dir / "pseudo.label");
    sparse_count[i] = sparse.labeled_count();
    pseudo_count[i] = pseudo.labels.labeled_count();
  }
  ordered_json summary = json::array();
  for (std::size_t i = 0; i < config.scene_count; ++i) {
    ordered_json e;
    e["scene"] = index_name(i);
    e["sparse_pixels"] = sparse_count[i];
    e["pseudo_pixels"] = pseudo_count[i];
    e["prompts"] = stats[i].prompts;
    e["after_stability"] = stats[i].candidates_after_stability;
    e["after_nms"] = stats[i].candidates_after_nms;
    summary.push_back(e);
  }
  write_text(config.label_dir / "plg_summary.json", summary.dump(2) + "\n");
}

void cmd_train(const RunConfig& config) {
  const std::vector<Scene> train_scenes = load_range(config, 0, config.train_count);
  const std::vector<Scene> eval_scenes = load_range(config, config.train_count, config.scene_count);
  const char* label_file = config.teacher_labels == TeacherLabels::Pseudo ? "pseudo.label" : "sparse.label";

  std::vector<distill::TrainingScene> data;
  for (std::size_t i = 0; i < train_scenes.size(); ++i) {
    const Scene& s = train_scenes[i];
    const fs::path path = label_path(config, i) / label_file;
    require_exists(path);
    data.push_back({&s, read_label_image(path, s.image.width, s.image.height),
                    config.teacher_labels == TeacherLabels::Pseudo});
  }

  const distill::TrainResult result = distill::train(config.train, data, config.synth.class_count);
  distill::save_checkpoint(result.models, config.checkpoint);

  std::string history;
  for (std::size_t step = 0; step < result.history.size(); ++step)
    history += result.history[step].to_json_line(step) + "\n";
  write_text(config.history, history);

  if (!eval_scenes.empty()) {
    std::vector<const Scene*> ptrs;
    for (const auto& s : eval_scenes) ptrs.push_back(&s);
    write_text(config.train_report, eval_report(distill::evaluate(result.models.student, ptrs), ptrs.size()));
  }
}

void cmd_eval(const RunConfig& config) {
  if (config.train_count >= config.scene_count) throw ConfigError("config field 'train_count' leaves no eval scenes");
  require_exists(config.checkpoint);
  const distill::Models models = distill::load_checkpoint(config.checkpoint);
  const std::vector<Scene> eval_scenes = load_range(config, config.train_count, config.scene_count);
  std::vector<const Scene*> ptrs;
  for (const auto& s : eval_scenes) ptrs.push_back(&s);
  write_text(config.report, eval_report(distill::evaluate(models.student, ptrs), ptrs.size()));
}

void cmd_render(const RunConfig& config) {
  std::optional<distill::Models> models;
  if (fs::exists(config.checkpoint)) models = distill::load_checkpoint(config.checkpoint);
  for (std::size_t i = 0; i < config.scene_count; ++i) {
    const Scene scene = load_scene(scene_path(config, i));
    const fs::path out = config.render_dir / index_name(i);
    fs::create_directories(out);
    write_ppm(scene.image, out / "image.ppm");
    write_ppm(colorize(scene.pixel_truth), out / "truth.ppm");
    for (const char* name : {"sparse", "pseudo"}) {
      const fs::path src = label_path(config, i) / (std::string(name) + ".label");
      if (fs::exists(src))
        write_ppm(colorize(read_label_image(src, scene.image.width, scene.image.height)),
                  out / (std::string(name) + ".ppm"));
    }
    if (models) {
      // Student predictions splatted at the projected pixels.
      const std::vector<LabelId> pred = distill::infer_student(models->student, scene.cloud);
      LabelImage img(scene.image.width, scene.image.height);
      for (const auto& pc : project_points(scene.cloud, scene.cam)) img.semantic[img.index(pc.u, pc.v)] = pred[pc.point_index];
      write_ppm(colorize(img), out / "prediction.ppm");
    }
  }
}

void run_command(const std::string& name, const RunConfig& config) {
  if (name == "synth") return cmd_synth(config);
  if (name == "project") return cmd_project(config);
  if (name == "plg") return cmd_plg(config);
  if (name == "train") return cmd_train(config);
  if (name == "eval") return cmd_eval(config);
  if (name == "render") return cmd_render(config);
  throw ConfigError("unknown command '" + name + "'");
}

}  // namespace elite
