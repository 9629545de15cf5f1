// SPDX-License-Identifier: Apache-2.0
//
// Toy point-branch student and patch-branch teacher with per-stage decoders,
// plus the segmentation and distillation losses.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "elite/autodiff.hpp"
#include "elite/datasets.hpp"
#include "elite/geometry.hpp"
#include "elite/peft.hpp"

namespace elite::nets {

inline constexpr double kLogClamp = 1e-12;

/// Linear layer x * W + b with W stored in x out.
struct Linear {
  ad::Parameter weight;
  ad::Parameter bias;

  static Linear create(std::size_t in, std::size_t out, Rng& rng, const std::string& name);
  ad::Var forward(ad::Graph& g, ad::Var x);
  std::size_t in_dim() const { return weight.value.rows(); }
  std::size_t out_dim() const { return weight.value.cols(); }
};

struct StudentConfig {
  std::size_t stages = 4;
  std::size_t hidden = 64;
  std::size_t classes = 4;
  double base_voxel_edge = 0.2;
};

struct StudentStage {
  Linear encoder;
  Linear head;
};

struct StudentNet {
  StudentConfig config;
  std::vector<StudentStage> stages;
  Linear final_head;

  static StudentNet create(const StudentConfig& config, Rng& rng);
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
};

/// Per-stage features and class scores, one row per point (student) or per
/// patch (teacher).
struct StageOutputs {
  ad::Var features;
  ad::Var scores;
};

struct StudentOutputs {
  std::vector<StageOutputs> stages;
  ad::Var final_scores;
};

/// Normalized (x, y, z, intensity): coordinates centered on the cloud mean
/// and divided by the largest absolute offset.
Tensor student_input(const PointCloud& cloud);

StudentOutputs student_forward(ad::Graph& g, const PointCloud& cloud, StudentNet& net);

enum class AdapterKind { Lora, AdaLora };

struct TeacherConfig {
  std::size_t grid = 8;
  std::size_t stages = 4;
  std::size_t hidden = 64;
  std::size_t classes = 4;
  std::size_t rank = 8;
  AdapterKind adapter = AdapterKind::AdaLora;
};

using Adapter = std::variant<peft::LoraAdapter, peft::AdaLoraAdapter>;

struct PatchDecoder {
  Linear upscale;     // h -> h/2
  Linear classifier;  // h/2 -> C
};

struct TeacherNet {
  TeacherConfig config;
  ad::Parameter embed;  // frozen, kPatchInput x h
  std::vector<Adapter> adapters;
  std::vector<PatchDecoder> decoders;
  Linear final_head;  // L*h -> C

  static TeacherNet create(const TeacherConfig& config, Rng& rng);
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  std::vector<peft::AdaLoraAdapter*> adalora_adapters();
  // Counts forward passes; inference must never touch the teacher.
  mutable std::size_t forward_calls = 0;
  mutable std::size_t decode_calls = 0;
};

inline constexpr std::size_t kPatchInput = 5;

/// Mean RGB (scaled to [0,1]) and normalized center for each grid cell,
/// row-major over the grid.
Tensor patch_input(const RgbImage& image, std::size_t grid);

std::vector<StageOutputs> teacher_forward(ad::Graph& g, const RgbImage& image, TeacherNet& net);

/// Patch index covering pixel (u, v) under nearest-neighbor upsampling.
std::size_t patch_of_pixel(int u, int v, int width, int height, std::size_t grid);

/// Decodes stage features to class scores at the requested pixels: upscale
/// layer, nearest-neighbor interpolation to full resolution, classifier,
/// softmax, then a gather at each pixel.
ad::Var patch_decode(ad::Graph& g, ad::Var features, PatchDecoder& decoder, int width, int height,
                     std::size_t grid, std::span<const PixelCoord> pixels, const TeacherNet* counter = nullptr);

/// Final teacher head over concatenated stage features, gathered at pixels.
ad::Var teacher_final_decode(ad::Graph& g, std::span<const StageOutputs> stages, TeacherNet& net, int width,
                             int height, std::span<const PixelCoord> pixels);

struct LossResult {
  ad::Var value;
  bool empty = false;
};

/// Mean over non-ignore rows of -w_y log p_y.
LossResult loss_wce(ad::Var scores, std::span<const LabelId> labels, std::span<const double> class_weights);

/// Lovasz-softmax averaged over the classes present in labels.
LossResult loss_lovasz(ad::Var scores, std::span<const LabelId> labels);

/// (1/N) sum_i KL(teacher_i || student_i); the teacher is a constant.
LossResult loss_kl(const Tensor& teacher, ad::Var student);

/// Gradient of the Jaccard loss' Lovasz extension for a descending-sorted
/// ground-truth indicator sequence.
std::vector<double> lovasz_grad(const std::vector<bool>& sorted_truth);

/// 1/sqrt(freq + 1), normalized to mean 1, over labels < classes.
std::vector<double> class_weights_from_counts(std::span<const std::size_t> counts);

}  // namespace elite::nets
