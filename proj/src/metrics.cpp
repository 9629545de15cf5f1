// SPDX-License-Identifier: Apache-2.0
#include "elite/metrics.hpp"

#include <chrono>
#include <numeric>

#include "elite/errors.hpp"

namespace elite::metrics {

void ConfusionMatrix::update(std::span<const LabelId> truth, std::span<const LabelId> predicted) {
  if (truth.size() != predicted.size()) throw DimensionError("confusion update: length mismatch");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == kIgnoreLabel) continue;
    if (truth[i] >= classes_ || predicted[i] >= classes_) throw IndexError("confusion update: class id out of range");
    ++counts_[truth[i] * classes_ + predicted[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw DimensionError("confusion merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::vector<std::optional<double>> ConfusionMatrix::iou_per_class() const {
  std::vector<std::optional<double>> out(classes_);
  for (std::size_t c = 0; c < classes_; ++c) {
    std::uint64_t tp = at(c, c);
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    for (std::size_t k = 0; k < classes_; ++k) {
      if (k == c) continue;
      fp += at(k, c);
      fn += at(c, k);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

double ConfusionMatrix::miou() const {
  if (total() == 0) throw ContractError("miou: no scored samples");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& iou : iou_per_class()) {
    if (!iou) continue;
    sum += *iou;
    ++n;
  }
  return sum / static_cast<double>(n);
}

double throughput(const std::function<void()>& workload, std::size_t warmup_iters, std::size_t timed_iters) {
  if (timed_iters == 0) throw ContractError("throughput: timed_iters must be at least 1");
  for (std::size_t i = 0; i < warmup_iters; ++i) workload();
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < timed_iters; ++i) workload();
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
  return static_cast<double>(timed_iters) / elapsed.count();
}

}  // namespace elite::metrics
