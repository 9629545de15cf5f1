// SPDX-License-Identifier: Apache-2.0
#include "elite/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "elite/binio.hpp"
#include "elite/errors.hpp"
#include "elite/random.hpp"

namespace elite {

std::size_t LabelImage::labeled_count() const {
  return static_cast<std::size_t>(std::count_if(semantic.begin(), semantic.end(),
                                                [](LabelId s) { return s != kIgnoreLabel; }));
}

PointCloud read_kitti_points(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  if (bytes.size() % 16 != 0) throw FormatError("velodyne file size is not a multiple of 16: " + path.string());
  binio::Reader in(bytes);
  PointCloud cloud(bytes.size() / 16);
  for (Point& p : cloud) {
    p.x = in.f32();
    p.y = in.f32();
    p.z = in.f32();
    p.intensity = in.f32();
  }
  return cloud;
}

void write_kitti_points(const PointCloud& cloud, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(cloud.size() * 16);
  auto put = [&bytes](double v) {
    const float f = static_cast<float>(v);
    const auto* b = reinterpret_cast<const std::uint8_t*>(&f);
    bytes.insert(bytes.end(), b, b + 4);
  };
  for (const Point& p : cloud) {
    put(p.x);
    put(p.y);
    put(p.z);
    put(p.intensity);
  }
  binio::write_file(path, bytes);
}

std::uint32_t encode_label_word(LabelId semantic, LabelId instance) {
  return (static_cast<std::uint32_t>(instance & 0xFFFF) << 16) | (semantic & 0xFFFF);
}

std::pair<LabelId, LabelId> decode_label_word(std::uint32_t word) { return {word & 0xFFFF, word >> 16}; }

std::pair<std::vector<LabelId>, std::vector<LabelId>> read_kitti_labels(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  if (bytes.size() % 4 != 0) throw FormatError("label file size is not a multiple of 4: " + path.string());
  binio::Reader in(bytes);
  std::vector<LabelId> sem(bytes.size() / 4);
  std::vector<LabelId> inst(bytes.size() / 4);
  for (std::size_t i = 0; i < sem.size(); ++i) std::tie(sem[i], inst[i]) = decode_label_word(in.u32());
  return {std::move(sem), std::move(inst)};
}

void write_kitti_labels(const std::vector<LabelId>& semantic, const std::vector<LabelId>& instance,
                        const std::filesystem::path& path) {
  if (semantic.size() != instance.size()) throw DimensionError("label arrays differ in length");
  std::vector<std::uint8_t> bytes;
  bytes.reserve(semantic.size() * 4);
  for (std::size_t i = 0; i < semantic.size(); ++i) binio::put_u32(bytes, encode_label_word(semantic[i], instance[i]));
  binio::write_file(path, bytes);
}

CameraModel read_calib(const std::filesystem::path& path, int width, int height) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key) || key.back() != ':') continue;
    key.pop_back();
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    rows[key] = std::move(vals);
  }
  auto need = [&](const std::string& key) -> const std::vector<double>& {
    auto it = rows.find(key);
    if (it == rows.end()) throw FormatError("calib missing key " + key + ": " + path.string());
    if (it->second.size() != 12) throw FormatError("calib key " + key + " needs 12 values: " + path.string());
    return it->second;
  };
  const auto& p2 = need("P2");
  const auto& tr = need("Tr");

  CameraModel cam;
  cam.fx = p2[0];
  cam.fy = p2[5];
  cam.cx = p2[2];
  cam.cy = p2[6];
  cam.width = width;
  cam.height = height;

  Mat4 velo_to_cam = identity4();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) velo_to_cam[r][c] = tr[r * 4 + c];

  // P2 = K [I | t]: recover t from the fourth column.
  Mat4 offset = identity4();
  offset[2][3] = p2[11];
  offset[0][3] = (p2[3] - cam.cx * p2[11]) / cam.fx;
  offset[1][3] = (p2[7] - cam.cy * p2[11]) / cam.fy;
  cam.extrinsic = compose(offset, velo_to_cam);
  return cam;
}

void write_calib(const CameraModel& cam, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "P2: " << cam.fx << " 0 " << cam.cx << " 0 0 " << cam.fy << " " << cam.cy << " 0 0 0 1 0\n";
  out << "Tr:";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) out << ' ' << cam.extrinsic[r][c];
  out << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

constexpr std::array<std::uint8_t, 3> kLevels = {16, 112, 208};

// LiDAR (x forward, y left, z up) to camera (x right, y down, z forward).
Mat4 synth_extrinsic() {
  Mat4 m{};
  m[0] = {0.0, -1.0, 0.0, 0.0};
  m[1] = {0.0, 0.0, -1.0, -0.08};
  m[2] = {1.0, 0.0, 0.0, -0.27};
  m[3] = {0.0, 0.0, 0.0, 1.0};
  return m;
}

bool overlaps_with_gap(const PixelRect& a, const PixelRect& b) {
  return !(a.x1 + 1 < b.x0 || b.x1 + 1 < a.x0 || a.y1 + 1 < b.y0 || b.y1 + 1 < a.y0);
}

}  // namespace

std::size_t max_synth_classes() { return kLevels.size() * kLevels.size() * kLevels.size(); }

std::array<std::uint8_t, 3> class_color(LabelId semantic) {
  // Start at mid gray so the background class is neither black nor white.
  const std::size_t k = (semantic + 13) % max_synth_classes();
  return {kLevels[k % 3], kLevels[(k / 3) % 3], kLevels[(k / 9) % 3]};
}

Scene synth_scene(std::uint64_t seed, const SynthParams& params) {
  if (params.class_count < 2) throw ContractError("synth_scene: class_count must be at least 2");
  if (params.class_count > max_synth_classes()) throw ContractError("synth_scene: too many classes for the palette");
  if (params.width < 8 || params.height < 8) throw ContractError("synth_scene: image too small");
  if (!(params.sparsity >= 0.0 && params.sparsity <= 1.0)) throw ContractError("synth_scene: sparsity outside [0,1]");

  Rng rng(seed);
  Scene scene;
  scene.class_count = params.class_count;
  scene.cam.fx = scene.cam.fy = static_cast<double>(params.width);
  scene.cam.cx = params.width / 2.0;
  scene.cam.cy = params.height / 2.0;
  scene.cam.width = params.width;
  scene.cam.height = params.height;
  scene.cam.extrinsic = synth_extrinsic();

  constexpr double kBaseDepth = 4.0;
  constexpr double kPlaneGap = 0.5;
  constexpr int kMaxTries = 1000;

  const int min_w = std::max(2, params.width / 8);
  const int max_w = std::max(min_w, params.width / 3);
  const int min_h = std::max(2, params.height / 8);
  const int max_h = std::max(min_h, params.height / 3);
  for (std::size_t j = 0; j < params.instances; ++j) {
    SynthInstance inst;
    inst.semantic = static_cast<LabelId>(1 + j % (params.class_count - 1));
    inst.instance = static_cast<LabelId>(j + 1);
    inst.depth = kBaseDepth + kPlaneGap * static_cast<double>(j);
    bool placed = false;
    for (int t = 0; t < kMaxTries && !placed; ++t) {
      const int w = min_w + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_w - min_w + 1)));
      const int h = min_h + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_h - min_h + 1)));
      const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(params.width - w + 1)));
      const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(params.height - h + 1)));
      inst.rect = {x0, y0, x0 + w - 1, y0 + h - 1};
      placed = std::none_of(scene.instances.begin(), scene.instances.end(),
                            [&](const SynthInstance& o) { return overlaps_with_gap(o.rect, inst.rect); });
    }
    if (!placed) throw GenerationError("synth_scene: could not place instance rectangles without overlap");
    scene.instances.push_back(inst);
  }
  const double background_depth = kBaseDepth + kPlaneGap * static_cast<double>(params.instances);

  scene.image = RgbImage(params.width, params.height);
  scene.pixel_truth = LabelImage(params.width, params.height);
  std::vector<double> pixel_depth(static_cast<std::size_t>(params.width) * params.height, background_depth);
  for (int v = 0; v < params.height; ++v) {
    for (int u = 0; u < params.width; ++u) {
      const std::size_t idx = scene.pixel_truth.index(u, v);
      scene.pixel_truth.semantic[idx] = 0;
      scene.pixel_truth.instance[idx] = kInvalidInstance;
      for (const SynthInstance& inst : scene.instances) {
        if (inst.rect.contains(u, v)) {
          scene.pixel_truth.semantic[idx] = inst.semantic;
          scene.pixel_truth.instance[idx] = inst.instance;
          pixel_depth[idx] = inst.depth;
        }
      }
      const auto color = class_color(scene.pixel_truth.semantic[idx]);
      std::copy(color.begin(), color.end(), scene.image.at(u, v));
    }
  }

  // Partial Fisher-Yates picks the sampled pixel subset.
  const std::size_t pixel_count = pixel_depth.size();
  std::vector<std::size_t> order(pixel_count);
  std::iota(order.begin(), order.end(), 0);
  const auto target = static_cast<std::size_t>(std::llround(params.sparsity * static_cast<double>(pixel_count)));
  for (std::size_t i = 0; i < target; ++i) std::swap(order[i], order[i + rng.below(pixel_count - i)]);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(target));

  // Top up classes that ended with fewer than points_per_class samples.
  std::vector<std::size_t> per_class(params.class_count, 0);
  for (std::size_t idx : chosen) ++per_class[scene.pixel_truth.semantic[idx]];
  for (std::size_t i = target; i < pixel_count; ++i) {
    const LabelId c = scene.pixel_truth.semantic[order[i]];
    if (per_class[c] < params.points_per_class) {
      ++per_class[c];
      chosen.push_back(order[i]);
    }
  }
  std::sort(chosen.begin(), chosen.end());

  const double span = static_cast<double>(params.class_count - 1);
  for (std::size_t idx : chosen) {
    const int u = static_cast<int>(idx % static_cast<std::size_t>(params.width));
    const int v = static_cast<int>(idx / static_cast<std::size_t>(params.width));
    // Jitter stays well inside the pixel so rounding reproduces (u, v).
    const double ju = u + rng.uniform(-0.3, 0.3);
    const double jv = v + rng.uniform(-0.3, 0.3);
    Point p = unproject(ju, jv, pixel_depth[idx], scene.cam);
    const LabelId c = scene.pixel_truth.semantic[idx];
    p.intensity = std::clamp(0.15 + 0.7 * static_cast<double>(c) / span + 0.15 * rng.normal(), 0.0, 1.0);
    scene.cloud.push_back(p);
    scene.point_semantic.push_back(c);
    scene.point_instance.push_back(scene.pixel_truth.instance[idx]);
  }
  return scene;
}

RgbImage colorize(const LabelImage& labels) {
  RgbImage img(labels.width, labels.height);
  for (int v = 0; v < labels.height; ++v) {
    for (int u = 0; u < labels.width; ++u) {
      const LabelId s = labels.semantic[labels.index(u, v)];
      if (s == kIgnoreLabel) continue;
      const auto color = class_color(s);
      std::copy(color.begin(), color.end(), img.at(u, v));
    }
  }
  return img;
}

void write_ppm(const RgbImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  int w = 0;
  int h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw FormatError("unsupported PPM header: " + path.string());
  in.get();
  RgbImage img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw FormatError("PPM payload truncated: " + path.string());
  return img;
}

}  // namespace elite
