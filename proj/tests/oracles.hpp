// Independent reference implementations used by unit and acceptance tests.
// They favor the most literal formulation over speed.
#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "elite/datasets.hpp"
#include "elite/labelgen.hpp"
#include "elite/random.hpp"

namespace oracle {

using elite::LabelId;

struct PromptOracle {
  std::vector<elite::PixelCoord> points;
  std::vector<std::vector<double>> masks;  // row-major lr grids
};

// Literal transcription of the stage-1 prompt builder: each assignment
// writes every prompt position selected by the boolean index, in order.
inline PromptOracle stage1_prompts(const elite::LabelImage& lr, double theta_h, double theta_l) {
  PromptOracle out;
  const int w = lr.width;
  const int h = lr.height;
  auto ls = [&](elite::PixelCoord p) { return lr.semantic[static_cast<std::size_t>(p.row) * w + p.col]; };
  auto li = [&](elite::PixelCoord p) { return lr.instance[static_cast<std::size_t>(p.row) * w + p.col]; };
  auto at = [&](std::vector<double>& m, elite::PixelCoord p) -> double& {
    return m[static_cast<std::size_t>(p.row) * w + p.col];
  };
  // P <- where(Ls_lr is not ignore)
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (lr.semantic[static_cast<std::size_t>(r) * w + c] != elite::kIgnoreLabel) out.points.push_back({r, c});
  const std::size_t n = out.points.size();
  // M <- zeros
  out.masks.assign(n, std::vector<double>(static_cast<std::size_t>(w) * h, 0.0));
  const auto& P = out.points;
  for (std::size_t i = 0; i < n; ++i) {
    if (ls(P[i]) == elite::kIgnoreLabel) continue;
    // M[i][Ls[P] != Ls[P[i]]] <- -theta_h
    for (std::size_t j = 0; j < n; ++j)
      if (ls(P[j]) != ls(P[i])) at(out.masks[i], P[j]) = -theta_h;
    if (li(P[i]) != elite::kInvalidInstance) {
      // M[i][Li[P] == Li[P[i]]] <- theta_h
      for (std::size_t j = 0; j < n; ++j)
        if (li(P[j]) == li(P[i])) at(out.masks[i], P[j]) = theta_h;
    } else {
      // M[i][Ls[P] == Ls[P[i]]] <- theta_l
      for (std::size_t j = 0; j < n; ++j)
        if (ls(P[j]) == ls(P[i])) at(out.masks[i], P[j]) = theta_l;
    }
  }
  return out;
}

// Box IoU by counting covered pixels.
inline double pixel_iou(const elite::Box& a, const elite::Box& b) {
  long inter = 0;
  const int x0 = std::min(a.x0, b.x0);
  const int x1 = std::max(a.x1, b.x1);
  const int y0 = std::min(a.y0, b.y0);
  const int y1 = std::max(a.y1, b.y1);
  long uni = 0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const bool in_a = x >= a.x0 && x <= a.x1 && y >= a.y0 && y <= a.y1;
      const bool in_b = x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Greedy suppression: repeatedly take the best remaining candidate (first
// index on ties) and discard everything overlapping it beyond threshold.
// Returns kept indices in selection order.
inline std::vector<std::size_t> greedy_nms(const std::vector<elite::MaskCandidate>& cands, double threshold) {
  std::vector<bool> alive(cands.size(), true);
  std::vector<std::size_t> kept;
  while (true) {
    std::size_t best = cands.size();
    for (std::size_t i = 0; i < cands.size(); ++i)
      if (alive[i] && (best == cands.size() || cands[i].iou_prediction > cands[best].iou_prediction)) best = i;
    if (best == cands.size()) break;
    kept.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < cands.size(); ++i)
      if (alive[i] && pixel_iou(cands[best].box, cands[i].box) > threshold) alive[i] = false;
  }
  return kept;
}

// Jaccard loss of an error set against the ground-truth set of one class.
inline double jaccard_loss(const std::vector<bool>& errors, const std::vector<bool>& truth) {
  std::size_t err = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    err += errors[i];
    uni += errors[i] || truth[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(err) / static_cast<double>(uni);
}

// Lovasz extension of a submodular set function evaluated as the maximum,
// over all orderings, of the greedy marginal sum.
inline double lovasz_extension_bruteforce(const std::vector<double>& m, const std::vector<bool>& truth) {
  const std::size_t n = m.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    std::vector<bool> set(n, false);
    double prev = 0.0;
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      set[perm[k]] = true;
      const double cur = jaccard_loss(set, truth);
      total += m[perm[k]] * (cur - prev);
      prev = cur;
    }
    best = std::max(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Mean over classes present among non-ignored labels.
inline double lovasz_softmax_bruteforce(const std::vector<std::vector<double>>& probs,
                                        const std::vector<LabelId>& labels, std::size_t classes) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != elite::kIgnoreLabel) rows.push_back(i);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<bool> truth;
    std::vector<double> m;
    bool any = false;
    for (std::size_t i : rows) {
      const bool t = labels[i] == c;
      any = any || t;
      truth.push_back(t);
      m.push_back(std::abs((t ? 1.0 : 0.0) - probs[i][c]));
    }
    if (!any) continue;
    ++present;
    sum += lovasz_extension_bruteforce(m, truth);
  }
  return present == 0 ? 0.0 : sum / static_cast<double>(present);
}

inline elite::LabelImage random_label_grid(elite::Rng& rng, int max_side, int classes, int instances) {
  const int w = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_side)));
  const int h = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_side)));
  elite::LabelImage img(w, h);
  for (std::size_t i = 0; i < img.semantic.size(); ++i) {
    if (rng.uniform() < 0.3) continue;
    img.semantic[i] = static_cast<LabelId>(rng.below(static_cast<std::uint64_t>(classes)));
    img.instance[i] = static_cast<LabelId>(rng.below(static_cast<std::uint64_t>(instances + 1)));
  }
  return img;
}

}  // namespace oracle
