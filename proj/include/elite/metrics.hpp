// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "elite/datasets.hpp"

namespace elite::metrics {

/// Rows are ground truth, columns predictions. Ignore-labeled samples are
/// never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  void update(std::span<const LabelId> truth, std::span<const LabelId> predicted);
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::uint64_t total() const;

  /// IoU per class; empty where the class has zero union.
  std::vector<std::optional<double>> iou_per_class() const;
  /// Mean over classes with a defined IoU. Throws ContractError when no
  /// sample was scored.
  double miou() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// Invocations per second of a single-item workload. Each call returns only
/// after its work is complete; the clock is read between calls.
double throughput(const std::function<void()>& workload, std::size_t warmup_iters, std::size_t timed_iters);

}  // namespace elite::metrics
