// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters over a frozen base weight W0 (d1 x d2). Inputs are row
// vectors and every layer computes x * W^T, so W0 maps d2 features to d1.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "elite/autodiff.hpp"
#include "elite/binio.hpp"
#include "elite/random.hpp"

namespace elite::peft {

/// W = W0 + scaling * B * A, with B zero at creation.
struct LoraAdapter {
  ad::Parameter w0;  // frozen
  ad::Parameter a;   // r x d2
  ad::Parameter b;   // d1 x r
  double scaling = 1.0;

  static LoraAdapter create(Tensor w0, std::size_t rank, Rng& rng, double alpha = 0.0);

  std::size_t rank() const { return a.value.rows(); }
  std::size_t out_dim() const { return w0.value.rows(); }
  std::size_t in_dim() const { return w0.value.cols(); }
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
};

/// SVD-style adapter W = W0 + P diag(lambda) Q. Pruned ranks keep their
/// factors but hold lambda = 0 and receive no updates.
struct AdaLoraAdapter {
  ad::Parameter w0;      // frozen
  ad::Parameter p;       // d1 x r
  ad::Parameter lambda;  // 1 x r, zero at creation
  ad::Parameter q;       // r x d2
  std::vector<bool> active;
  std::vector<double> importance;  // EMA of |lambda_k * dL/dlambda_k|

  static AdaLoraAdapter create(Tensor w0, std::size_t rank, Rng& rng);

  std::size_t rank() const { return lambda.value.cols(); }
  std::size_t active_rank() const;
  std::size_t out_dim() const { return w0.value.rows(); }
  std::size_t in_dim() const { return w0.value.cols(); }
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;

  /// Zeroes lambda/P/Q gradients of pruned ranks.
  void mask_inactive_grads();
};

inline constexpr double kImportanceDecay = 0.85;

/// Rank must satisfy r <= min(d1, d2) / 4.
void check_rank(std::size_t d1, std::size_t d2, std::size_t rank);

ad::Var lora_forward(ad::Graph& g, ad::Var x, LoraAdapter& adapter);
ad::Var adalora_forward(ad::Graph& g, ad::Var x, AdaLoraAdapter& adapter);
/// Frozen-base only: x * W0^T.
ad::Var base_forward(ad::Graph& g, ad::Var x, const ad::Parameter& w0);

Tensor lora_merge(const LoraAdapter& adapter);
Tensor lora_merge(const AdaLoraAdapter& adapter);

/// ||P^T P - I||_F^2 + ||Q Q^T - I||_F^2 over active ranks.
ad::Var orth_reg(ad::Graph& g, AdaLoraAdapter& adapter);

/// Folds the current lambda gradient into the importance EMA (active ranks
/// only) and returns the scores, 0 for pruned ranks.
std::vector<double> update_importance(AdaLoraAdapter& adapter);
std::vector<double> importance_scores(const AdaLoraAdapter& adapter);

/// Keeps the total_budget most important ranks across all adapters.
void reallocate_budget(std::span<AdaLoraAdapter* const> adapters, std::size_t total_budget);

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
};
ParamCount count_params(std::span<const ad::Parameter* const> params);

// Flat binary checkpoints: d1, d2, r as u32 LE, then f64 LE payloads
// (row-major). LoRA payload: scaling, W0, A, B. AdaLoRA payload: W0, P,
// lambda, Q, active flags (0/1), importance.
void append_adapter(std::vector<std::uint8_t>& out, const LoraAdapter& adapter);
void append_adapter(std::vector<std::uint8_t>& out, const AdaLoraAdapter& adapter);
LoraAdapter read_lora(binio::Reader& in);
AdaLoraAdapter read_adalora(binio::Reader& in);

}  // namespace elite::peft
