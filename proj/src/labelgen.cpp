// SPDX-License-Identifier: Apache-2.0
#include "elite/labelgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "elite/errors.hpp"
#include "elite/parallel.hpp"

namespace elite {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

void PLGParams::validate() const {
  if (!(theta_high > theta_low && theta_low > 0.0)) throw ContractError("theta_high > theta_low > 0 required");
  if (!(theta_stability > 0.0 && theta_stability <= 1.0)) throw ContractError("theta_stability must lie in (0, 1]");
  if (!(theta_box_nms > 0.0 && theta_box_nms <= 1.0)) throw ContractError("theta_box_nms must lie in (0, 1]");
  if (!(stability_offset > 0.0)) throw ContractError("stability_offset must be positive");
  if (lr_width < 0 || lr_height < 0 || (lr_width == 0) != (lr_height == 0))
    throw ContractError("lr size must be both zero or both positive");
}

std::pair<int, int> PLGParams::resolve_lr_size(int full_width, int full_height) const {
  if (lr_width == 0) return {std::max(1, full_width / 4), std::max(1, full_height / 4)};
  if (lr_width > full_width || lr_height > full_height) throw ContractError("lr size exceeds image size");
  return {lr_width, lr_height};
}

LabelImage ppc_gtg(const Scene& scene) {
  LabelImage out(scene.cam.width, scene.cam.height);
  std::vector<double> zbuf(out.semantic.size(), std::numeric_limits<double>::infinity());
  for (const PixelCorrespondence& pc : project_points(scene.cloud, scene.cam)) {
    const std::size_t idx = out.index(pc.u, pc.v);
    if (pc.depth < zbuf[idx]) {
      zbuf[idx] = pc.depth;
      out.semantic[idx] = scene.point_semantic[pc.point_index];
      out.instance[idx] = scene.point_instance[pc.point_index];
    }
  }
  return out;
}

namespace {

int cell_center(int i, int lr, int full) {
  // floor((i + 0.5) * full / lr) in integer arithmetic.
  return static_cast<int>((2L * i + 1) * full / (2L * lr));
}

}  // namespace

PixelCoord lr_to_full(PixelCoord lr, int lr_width, int lr_height, int full_width, int full_height) {
  return {cell_center(lr.row, lr_height, full_height), cell_center(lr.col, lr_width, full_width)};
}

LabelImage downsample_labels(const LabelImage& labels, int lr_width, int lr_height) {
  if (lr_width <= 0 || lr_height <= 0 || lr_width > labels.width || lr_height > labels.height)
    throw ContractError("downsample_labels: lr size must be positive and no larger than the source");
  LabelImage out(lr_width, lr_height);
  for (int i = 0; i < lr_height; ++i) {
    for (int j = 0; j < lr_width; ++j) {
      const PixelCoord src = lr_to_full({i, j}, lr_width, lr_height, labels.width, labels.height);
      const std::size_t s = labels.index(src.col, src.row);
      out.semantic[out.index(j, i)] = labels.semantic[s];
      out.instance[out.index(j, i)] = labels.instance[s];
    }
  }
  return out;
}

PromptSet build_prompts(const LabelImage& lr, const PLGParams& params) {
  PromptSet out;
  std::vector<std::size_t> flat;
  for (int r = 0; r < lr.height; ++r) {
    for (int c = 0; c < lr.width; ++c) {
      if (lr.semantic[lr.index(c, r)] == kIgnoreLabel) continue;
      out.points.push_back({r, c});
      flat.push_back(lr.index(c, r));
    }
  }
  out.masks.reserve(flat.size());
  for (std::size_t self : flat) {
    const LabelId cls = lr.semantic[self];
    const LabelId inst = lr.instance[self];
    const bool has_instance = inst != kInvalidInstance;
    Grid m(lr.width, lr.height);
    // Only prompt pixels are written; everything else stays neutral.
    for (std::size_t q : flat) {
      double value = 0.0;
      if (has_instance && lr.instance[q] == inst) {
        value = params.theta_high;
      } else if (lr.semantic[q] != cls) {
        value = -params.theta_high;
      } else if (!has_instance) {
        value = params.theta_low;
      }
      m.values[q] = value;
    }
    out.masks.push_back(std::move(m));
  }
  return out;
}

double stability_score(const Grid& logits, double threshold, double offset) {
  if (!(offset > 0.0)) throw ContractError("stability_score: offset must be positive");
  std::size_t high = 0;
  std::size_t low = 0;
  for (double v : logits.values) {
    if (v > threshold + offset) ++high;
    if (v > threshold - offset) ++low;
  }
  return low == 0 ? 1.0 : static_cast<double>(high) / static_cast<double>(low);
}

Box mask_to_box(const Mask& mask) {
  Box box{mask.width, mask.height, -1, -1};
  for (int v = 0; v < mask.height; ++v) {
    for (int u = 0; u < mask.width; ++u) {
      if (!mask.at(u, v)) continue;
      box.x0 = std::min(box.x0, u);
      box.y0 = std::min(box.y0, v);
      box.x1 = std::max(box.x1, u);
      box.y1 = std::max(box.y1, v);
    }
  }
  if (box.x1 < 0) throw ContractError("mask_to_box: empty mask");
  return box;
}

double box_iou(const Box& a, const Box& b) {
  const long iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0) + 1;
  const long ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0) + 1;
  const long inter = iw > 0 && ih > 0 ? iw * ih : 0;
  const long uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<MaskCandidate> box_nms(const std::vector<MaskCandidate>& candidates, double iou_threshold) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].iou_prediction > candidates[b].iou_prediction;
  });
  std::vector<MaskCandidate> kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const MaskCandidate& k) {
      return box_iou(k.box, candidates[i].box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(candidates[i]);
  }
  return kept;
}

std::pair<LabelId, LabelId> assign_majority_labels(const Mask& mask, const LabelImage& truth) {
  if (mask.width != truth.width || mask.height != truth.height)
    throw DimensionError("assign_majority_labels: mask and labels differ in size");
  std::map<LabelId, std::size_t> sem;
  std::map<LabelId, std::size_t> inst;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    if (!mask.bits[i] || truth.semantic[i] == kIgnoreLabel) continue;
    ++sem[truth.semantic[i]];
    ++inst[truth.instance[i]];
  }
  if (sem.empty()) return {kIgnoreLabel, kInvalidInstance};
  // std::map iterates ids ascending, so the first maximum is the smallest id.
  auto mode = [](const std::map<LabelId, std::size_t>& counts) {
    return std::max_element(counts.begin(), counts.end(),
                            [](const auto& a, const auto& b) { return a.second < b.second; })
        ->first;
  };
  return {mode(sem), mode(inst)};
}

PseudoLabel overlay_masks(const std::vector<MaskCandidate>& kept, int width, int height) {
  PseudoLabel out{LabelImage(width, height)};
  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return kept[a].iou_prediction < kept[b].iou_prediction; });
  for (std::size_t i : order) {
    const MaskCandidate& cand = kept[i];
    if (cand.mask.width != width || cand.mask.height != height)
      throw DimensionError("overlay_masks: mask size differs from output");
    for (std::size_t p = 0; p < cand.mask.bits.size(); ++p) {
      if (!cand.mask.bits[p]) continue;
      out.labels.semantic[p] = cand.semantic;
      out.labels.instance[p] = cand.instance;
    }
  }
  return out;
}

PseudoLabel generate_pseudo_labels(const Scene& scene, const LabelImage& sparse, const Segmenter& segmenter,
                                   const PLGParams& params, PLGStats* stats, unsigned threads) {
  params.validate();
  const int width = scene.image.width;
  const int height = scene.image.height;
  if (sparse.width != width || sparse.height != height)
    throw DimensionError("generate_pseudo_labels: sparse labels not aligned with the image");

  const auto [lr_w, lr_h] = params.resolve_lr_size(width, height);
  const LabelImage lr = downsample_labels(sparse, lr_w, lr_h);
  const PromptSet prompts = build_prompts(lr, params);

  // Per-prompt slots keep prompt order then candidate order regardless of
  // scheduling.
  std::vector<std::vector<MaskCandidate>> per_prompt(prompts.points.size());
  parallel_for(prompts.points.size(), threads, [&](std::size_t i) {
    const PixelCoord full = lr_to_full(prompts.points[i], lr_w, lr_h, width, height);
    auto outputs = segmenter.segment(scene.image, full, prompts.masks[i]);
    if (outputs.size() != 3) throw ContractError("segmenter must return exactly three candidates");
    for (const SegmenterCandidate& out : outputs) {
      if (out.logits.width != width || out.logits.height != height)
        throw DimensionError("segmenter logits do not match the image size");
      const double s = stability_score(out.logits, params.binarize_threshold, params.stability_offset);
      if (!(s > params.theta_stability)) continue;
      MaskCandidate cand;
      cand.mask = Mask(width, height);
      for (std::size_t p = 0; p < out.logits.values.size(); ++p)
        cand.mask.bits[p] = out.logits.values[p] > params.binarize_threshold ? 1 : 0;
      if (cand.mask.count() == 0) continue;
      cand.iou_prediction = out.iou_prediction;
      cand.stability = s;
      cand.box = mask_to_box(cand.mask);
      per_prompt[i].push_back(std::move(cand));
    }
  });

  std::vector<MaskCandidate> data;
  for (auto& group : per_prompt)
    for (auto& cand : group) data.push_back(std::move(cand));
  const std::size_t after_stability = data.size();

  std::vector<MaskCandidate> kept = box_nms(data, params.theta_box_nms);
  for (MaskCandidate& cand : kept) std::tie(cand.semantic, cand.instance) = assign_majority_labels(cand.mask, sparse);

  if (stats != nullptr) {
    stats->prompts = prompts.points.size();
    stats->segmenter_calls = prompts.points.size();
    stats->candidates_after_stability = after_stability;
    stats->candidates_after_nms = kept.size();
  }
  return overlay_masks(kept, width, height);
}

namespace {

using Bucket = std::array<int, 3>;

Bucket bucket_of(const RgbImage& img, int u, int v) {
  const std::uint8_t* p = img.at(u, v);
  return {p[0] / 32, p[1] / 32, p[2] / 32};
}

bool within_buckets(const Bucket& a, const Bucket& b, int tolerance) {
  for (int k = 0; k < 3; ++k)
    if (std::abs(a[k] - b[k]) > tolerance) return false;
  return true;
}

}  // namespace

std::vector<SegmenterCandidate> ToySegmenter::segment(const RgbImage& image, PixelCoord prompt,
                                                      const Grid& low_res_mask) const {
  const int w = image.width;
  const int h = image.height;
  if (prompt.row < 0 || prompt.col < 0 || prompt.row >= h || prompt.col >= w)
    throw ContractError("toy segmenter: prompt outside the image");
  const Bucket seed = bucket_of(image, prompt.col, prompt.row);

  Mask component(w, h);
  std::deque<PixelCoord> queue{prompt};
  component.set(prompt.col, prompt.row);
  constexpr int kDr[4] = {-1, 1, 0, 0};
  constexpr int kDc[4] = {0, 0, -1, 1};
  while (!queue.empty()) {
    const PixelCoord p = queue.front();
    queue.pop_front();
    for (int k = 0; k < 4; ++k) {
      const int r = p.row + kDr[k];
      const int c = p.col + kDc[k];
      if (r < 0 || c < 0 || r >= h || c >= w || component.at(c, r)) continue;
      if (bucket_of(image, c, r) != seed) continue;
      component.set(c, r);
      queue.push_back({r, c});
    }
  }

  Mask dilated = component;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (component.at(c, r) || !within_buckets(bucket_of(image, c, r), seed, 2)) continue;
      bool touches = false;
      for (int dr = -1; dr <= 1 && !touches; ++dr)
        for (int dc = -1; dc <= 1 && !touches; ++dc) {
          const int rr = r + dr;
          const int cc = c + dc;
          touches = rr >= 0 && cc >= 0 && rr < h && cc < w && component.at(cc, rr);
        }
      if (touches) dilated.set(c, r);
    }
  }

  Mask same_color(w, h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (bucket_of(image, c, r) == seed) same_color.set(c, r);

  std::vector<SegmenterCandidate> out;
  for (const Mask* m : {&component, &dilated, &same_color}) {
    SegmenterCandidate cand;
    cand.logits = Grid(w, h, -2.0);
    double score = 0.0;
    std::size_t area = 0;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        if (!m->at(c, r)) continue;
        cand.logits.at(c, r) = 2.0;
        ++area;
        const int lr_r = static_cast<int>(static_cast<long>(r) * low_res_mask.height / h);
        const int lr_c = static_cast<int>(static_cast<long>(c) * low_res_mask.width / w);
        const double hint = low_res_mask.at(lr_c, lr_r);
        if (hint > 0.0) score += 1.0;
        else if (hint == 0.0) score += 0.5;
      }
    }
    cand.iou_prediction = score / static_cast<double>(area);
    out.push_back(std::move(cand));
  }
  return out;
}

}  // namespace elite
