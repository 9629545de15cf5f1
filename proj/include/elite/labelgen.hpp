// SPDX-License-Identifier: Apache-2.0
//
// Sparse ground truth from point-to-pixel correspondences, and the
// two-stage promptable-segmenter pseudo-labeler that densifies it.
#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "elite/datasets.hpp"

namespace elite {

/// Row-major H x W real grid.
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(int w, int h, double fill = 0.0) : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}
  double& at(int u, int v) { return values[static_cast<std::size_t>(v) * width + u]; }
  double at(int u, int v) const { return values[static_cast<std::size_t>(v) * width + u]; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}
  bool at(int u, int v) const { return bits[static_cast<std::size_t>(v) * width + u] != 0; }
  void set(int u, int v, bool on = true) { bits[static_cast<std::size_t>(v) * width + u] = on ? 1 : 0; }
  std::size_t count() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Inclusive pixel bounds (x = column, y = row).
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  long area() const { return static_cast<long>(x1 - x0 + 1) * (y1 - y0 + 1); }
  friend bool operator==(const Box&, const Box&) = default;
};

struct PromptSet {
  std::vector<PixelCoord> points;  // low-resolution (row, col)
  std::vector<Grid> masks;         // one H_lr x W_lr grid per prompt
};

struct MaskCandidate {
  Mask mask;
  double iou_prediction = 0.0;
  double stability = 1.0;
  Box box;
  LabelId semantic = kIgnoreLabel;
  LabelId instance = kInvalidInstance;
};

struct PLGParams {
  // {0, 0} selects a quarter of the full resolution.
  int lr_height = 0;
  int lr_width = 0;
  double theta_high = 16.0;
  double theta_low = 1.0;
  double theta_stability = 0.9;
  double theta_box_nms = 0.7;
  double binarize_threshold = 0.0;
  double stability_offset = 1.0;

  void validate() const;
  std::pair<int, int> resolve_lr_size(int full_width, int full_height) const;
};

struct PseudoLabel {
  LabelImage labels;
};

/// One promptable-segmenter output.
struct SegmenterCandidate {
  Grid logits;
  double iou_prediction = 0.0;
};

/// Port for a promptable segmenter. Implementations must be callable
/// concurrently for different prompts.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  /// prompt is in full-resolution pixel coordinates; returns exactly three
  /// candidates.
  virtual std::vector<SegmenterCandidate> segment(const RgbImage& image, PixelCoord prompt,
                                                  const Grid& low_res_mask) const = 0;
};

/// Deterministic color-region stand-in for a learned promptable segmenter.
class ToySegmenter final : public Segmenter {
 public:
  std::vector<SegmenterCandidate> segment(const RgbImage& image, PixelCoord prompt,
                                          const Grid& low_res_mask) const override;
};

LabelImage ppc_gtg(const Scene& scene);

LabelImage downsample_labels(const LabelImage& labels, int lr_width, int lr_height);

PromptSet build_prompts(const LabelImage& lr_labels, const PLGParams& params);

double stability_score(const Grid& logits, double threshold, double offset);

Box mask_to_box(const Mask& mask);

double box_iou(const Box& a, const Box& b);

/// Greedy suppression; returns the kept candidates in selection order.
std::vector<MaskCandidate> box_nms(const std::vector<MaskCandidate>& candidates, double iou_threshold);

std::pair<LabelId, LabelId> assign_majority_labels(const Mask& mask, const LabelImage& truth);

PseudoLabel overlay_masks(const std::vector<MaskCandidate>& kept, int width, int height);

struct PLGStats {
  std::size_t prompts = 0;
  std::size_t segmenter_calls = 0;
  std::size_t candidates_after_stability = 0;
  std::size_t candidates_after_nms = 0;
};

/// threads caps per-prompt parallelism (0 = hardware concurrency).
PseudoLabel generate_pseudo_labels(const Scene& scene, const LabelImage& sparse, const Segmenter& segmenter,
                                   const PLGParams& params, PLGStats* stats = nullptr, unsigned threads = 1);

/// Low-res cell center mapped to full resolution.
PixelCoord lr_to_full(PixelCoord lr, int lr_width, int lr_height, int full_width, int full_height);

}  // namespace elite
