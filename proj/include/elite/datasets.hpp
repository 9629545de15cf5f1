// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "elite/geometry.hpp"

namespace elite {

using LabelId = std::uint32_t;

/// Reserved semantic id: excluded from every loss and metric.
inline constexpr LabelId kIgnoreLabel = 0xFFFF;
/// Reserved instance id meaning "no instance".
inline constexpr LabelId kInvalidInstance = 0;

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triples

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  const std::uint8_t* at(int u, int v) const { return pixels.data() + (static_cast<std::size_t>(v) * width + u) * 3; }
  std::uint8_t* at(int u, int v) { return pixels.data() + (static_cast<std::size_t>(v) * width + u) * 3; }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

struct LabelImage {
  int width = 0;
  int height = 0;
  std::vector<LabelId> semantic;
  std::vector<LabelId> instance;

  LabelImage() = default;
  LabelImage(int w, int h)
      : width(w),
        height(h),
        semantic(static_cast<std::size_t>(w) * h, kIgnoreLabel),
        instance(static_cast<std::size_t>(w) * h, kInvalidInstance) {}

  std::size_t index(int u, int v) const { return static_cast<std::size_t>(v) * width + u; }
  std::size_t labeled_count() const;
  friend bool operator==(const LabelImage&, const LabelImage&) = default;
};

/// Axis-aligned rectangle with inclusive pixel bounds.
struct PixelRect {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  bool contains(int u, int v) const { return u >= x0 && u <= x1 && v >= y0 && v <= y1; }
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

struct SynthInstance {
  LabelId semantic = 0;
  LabelId instance = 0;
  PixelRect rect;
  double depth = 0.0;
};

struct Scene {
  RgbImage image;
  PointCloud cloud;
  std::vector<LabelId> point_semantic;
  std::vector<LabelId> point_instance;
  CameraModel cam;
  std::size_t class_count = 0;
  // Dense pixel ground truth; only synthetic scenes carry it.
  LabelImage pixel_truth;
  std::vector<SynthInstance> instances;
};

struct SynthParams {
  int width = 128;
  int height = 96;
  std::size_t class_count = 4;
  std::size_t instances = 6;
  std::size_t points_per_class = 8;
  double sparsity = 0.05;
};

PointCloud read_kitti_points(const std::filesystem::path& path);
void write_kitti_points(const PointCloud& cloud, const std::filesystem::path& path);

std::uint32_t encode_label_word(LabelId semantic, LabelId instance);
std::pair<LabelId, LabelId> decode_label_word(std::uint32_t word);

std::pair<std::vector<LabelId>, std::vector<LabelId>> read_kitti_labels(const std::filesystem::path& path);
void write_kitti_labels(const std::vector<LabelId>& semantic, const std::vector<LabelId>& instance,
                        const std::filesystem::path& path);

/// KITTI calib text ("P2:" and "Tr:" rows). The image size is not part of
/// the format and is supplied by the caller.
CameraModel read_calib(const std::filesystem::path& path, int width, int height);
void write_calib(const CameraModel& cam, const std::filesystem::path& path);

/// The fixed per-class color used by synthetic images.
std::array<std::uint8_t, 3> class_color(LabelId semantic);
std::size_t max_synth_classes();

Scene synth_scene(std::uint64_t seed, const SynthParams& params);

RgbImage colorize(const LabelImage& labels);
void write_ppm(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);

}  // namespace elite
