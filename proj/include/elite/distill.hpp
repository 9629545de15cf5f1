// SPDX-License-Identifier: Apache-2.0
//
// Patch-to-point multi-stage distillation: loss assembly, the training
// loop, student-only inference and checkpoints.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "elite/datasets.hpp"
#include "elite/metrics.hpp"
#include "elite/nets.hpp"

namespace elite::distill {

struct TrainConfig {
  std::size_t stages = 4;
  std::size_t hidden = 64;
  std::size_t grid = 8;
  std::size_t rank = 8;
  nets::AdapterKind adapter = nets::AdapterKind::AdaLora;
  double base_voxel_edge = 0.2;
  double learning_rate = 0.05;
  std::size_t epochs = 50;
  std::size_t batch = 1;
  double lambda_kd = 1.0;
  double lambda_orth = 0.1;
  std::uint64_t seed = 0;
  // Overrides the teacher's init stream when set.
  std::optional<std::uint64_t> teacher_seed;
  // 0 keeps every adapter rank; otherwise the global AdaLoRA rank budget.
  std::size_t adalora_budget = 0;
  std::size_t realloc_every = 10;
  // 1-based stages that carry a KD term; empty means all stages.
  std::vector<std::size_t> kd_stages;
  bool weighted_ce = true;

  void validate() const;
};

/// One scene prepared for training: point labels for the student and pixel
/// labels for the teacher.
struct TrainingScene {
  const Scene* scene = nullptr;
  // Pseudo-labels when available, otherwise the sparse projection.
  LabelImage teacher_labels;
  bool dense_teacher_labels = false;
};

struct LossBreakdown {
  std::vector<double> teacher_stage;
  std::vector<double> student_stage;
  double teacher_final = 0.0;
  double student_final = 0.0;
  double kd = 0.0;
  double orth = 0.0;
  double total = 0.0;

  std::size_t segmentation_terms() const { return teacher_stage.size() + student_stage.size() + 2; }
  /// Recomputes the total from the terms.
  double resum(double lambda_kd, double lambda_orth) const;
  std::string to_json_line(std::size_t step) const;
};

struct Models {
  nets::StudentNet student;
  nets::TeacherNet teacher;
};

Models init_models(const TrainConfig& config, std::size_t classes);

/// Sum over stages of KL(teacher patch scores || student point scores),
/// over points that have a pixel correspondence. stages_used lists 0-based
/// stage indices.
ad::Var ppmskd_loss(std::span<const Tensor> teacher_scores, std::span<const ad::Var> student_scores,
                    std::span<const PixelCorrespondence> correspondences, std::span<const std::size_t> stages_used);

struct LossGraph {
  ad::Var total;
  LossBreakdown breakdown;
};

LossGraph total_loss(ad::Graph& g, const TrainingScene& data, Models& models, const TrainConfig& config,
                     std::span<const double> class_weights);

struct TrainResult {
  Models models;
  std::vector<LossBreakdown> history;
  std::vector<double> class_weights;
};

TrainResult train(const TrainConfig& config, const std::vector<TrainingScene>& scenes, std::size_t classes);

std::vector<LabelId> infer_student(const nets::StudentNet& student, const PointCloud& cloud);

metrics::ConfusionMatrix evaluate(const nets::StudentNet& student, const std::vector<const Scene*>& scenes);

struct ComponentParams {
  peft::ParamCount student;
  peft::ParamCount teacher;
  peft::ParamCount decoders;
};
ComponentParams count_params(const Models& models);

void save_checkpoint(const Models& models, const std::filesystem::path& path);
Models load_checkpoint(const std::filesystem::path& path);

}  // namespace elite::distill
