// SPDX-License-Identifier: Apache-2.0
#include "elite/peft.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elite/errors.hpp"

namespace elite::peft {

void check_rank(std::size_t d1, std::size_t d2, std::size_t rank) {
  if (rank == 0) throw ContractError("adapter rank must be positive");
  if (rank * 4 > std::min(d1, d2)) throw ContractError("adapter rank must not exceed min(d1, d2) / 4");
}

namespace {

// Gram-Schmidt over the columns of a seeded Gaussian matrix.
Tensor orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor m(rows, cols);
  for (double& v : m.data()) v = rng.normal();
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < rows; ++i) dot += m(i, j) * m(i, k);
      for (std::size_t i = 0; i < rows; ++i) m(i, j) -= dot * m(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < rows; ++i) norm += m(i, j) * m(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < rows; ++i) m(i, j) /= norm;
  }
  return m;
}

}  // namespace

LoraAdapter LoraAdapter::create(Tensor w0, std::size_t rank, Rng& rng, double alpha) {
  const std::size_t d1 = w0.rows();
  const std::size_t d2 = w0.cols();
  check_rank(d1, d2, rank);
  LoraAdapter ad;
  ad.w0 = ad::Parameter("w0", std::move(w0), false);
  Tensor a(rank, d2);
  for (double& v : a.data()) v = rng.uniform(-0.02, 0.02);
  ad.a = ad::Parameter("lora_a", std::move(a));
  ad.b = ad::Parameter("lora_b", Tensor(d1, rank));
  ad.scaling = (alpha > 0.0 ? alpha : static_cast<double>(rank)) / static_cast<double>(rank);
  return ad;
}

std::vector<ad::Parameter*> LoraAdapter::parameters() { return {&w0, &a, &b}; }
std::vector<const ad::Parameter*> LoraAdapter::parameters() const { return {&w0, &a, &b}; }

AdaLoraAdapter AdaLoraAdapter::create(Tensor w0, std::size_t rank, Rng& rng) {
  const std::size_t d1 = w0.rows();
  const std::size_t d2 = w0.cols();
  check_rank(d1, d2, rank);
  AdaLoraAdapter ad;
  ad.w0 = ad::Parameter("w0", std::move(w0), false);
  ad.p = ad::Parameter("adalora_p", orthonormal_columns(d1, rank, rng));
  ad.lambda = ad::Parameter("adalora_lambda", Tensor(1, rank));
  ad.q = ad::Parameter("adalora_q", orthonormal_columns(d2, rank, rng).transposed());
  ad.active.assign(rank, true);
  ad.importance.assign(rank, 0.0);
  return ad;
}

std::size_t AdaLoraAdapter::active_rank() const {
  return static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
}

std::vector<ad::Parameter*> AdaLoraAdapter::parameters() { return {&w0, &p, &lambda, &q}; }
std::vector<const ad::Parameter*> AdaLoraAdapter::parameters() const { return {&w0, &p, &lambda, &q}; }

void AdaLoraAdapter::mask_inactive_grads() {
  for (std::size_t k = 0; k < rank(); ++k) {
    if (active[k]) continue;
    if (!lambda.grad.empty()) lambda.grad(0, k) = 0.0;
    if (!p.grad.empty())
      for (std::size_t i = 0; i < p.grad.rows(); ++i) p.grad(i, k) = 0.0;
    if (!q.grad.empty())
      for (std::size_t j = 0; j < q.grad.cols(); ++j) q.grad(k, j) = 0.0;
  }
}

ad::Var base_forward(ad::Graph& g, ad::Var x, const ad::Parameter& w0) {
  if (x.cols() != w0.value.cols()) throw DimensionError("adapter input width does not match d2");
  ad::Var wt = g.leaf(w0.value.transposed());
  return ad::matmul(x, wt);
}

ad::Var lora_forward(ad::Graph& g, ad::Var x, LoraAdapter& adapter) {
  ad::Var base = base_forward(g, x, adapter.w0);
  ad::Var xa = ad::matmul(x, ad::transpose(g.param(adapter.a)));
  ad::Var delta = ad::matmul(xa, ad::transpose(g.param(adapter.b)));
  if (adapter.scaling != 1.0) delta = ad::scale(delta, adapter.scaling);
  return ad::add(base, delta);
}

ad::Var adalora_forward(ad::Graph& g, ad::Var x, AdaLoraAdapter& adapter) {
  ad::Var base = base_forward(g, x, adapter.w0);
  ad::Var xq = ad::matmul(x, ad::transpose(g.param(adapter.q)));
  ad::Var scaled = ad::scale_cols(xq, g.param(adapter.lambda));
  ad::Var delta = ad::matmul(scaled, ad::transpose(g.param(adapter.p)));
  return ad::add(base, delta);
}

Tensor lora_merge(const LoraAdapter& adapter) {
  Tensor w = adapter.w0.value;
  const Tensor ba = matmul(adapter.b.value, adapter.a.value);
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += adapter.scaling * ba.data()[i];
  return w;
}

Tensor lora_merge(const AdaLoraAdapter& adapter) {
  Tensor w = adapter.w0.value;
  for (std::size_t k = 0; k < adapter.rank(); ++k) {
    if (!adapter.active[k]) continue;
    const double l = adapter.lambda.value(0, k);
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) += adapter.p.value(i, k) * l * adapter.q.value(k, j);
  }
  return w;
}

ad::Var orth_reg(ad::Graph& g, AdaLoraAdapter& adapter) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < adapter.rank(); ++k)
    if (adapter.active[k]) idx.push_back(k);
  if (idx.empty()) return g.leaf(Tensor(1, 1));
  const Tensor eye = Tensor::identity(idx.size());
  ad::Var p = ad::gather_cols(g.param(adapter.p), idx);
  ad::Var q = ad::gather_rows(g.param(adapter.q), idx);
  ad::Var ptp = ad::matmul(ad::transpose(p), p);
  ad::Var qqt = ad::matmul(q, ad::transpose(q));
  ad::Var rp = ad::sum_squares(ad::sub(ptp, g.leaf(eye)));
  ad::Var rq = ad::sum_squares(ad::sub(qqt, g.leaf(eye)));
  return ad::add(rp, rq);
}

std::vector<double> update_importance(AdaLoraAdapter& adapter) {
  for (std::size_t k = 0; k < adapter.rank(); ++k) {
    if (!adapter.active[k]) continue;
    const double g = adapter.lambda.grad.empty() ? 0.0 : adapter.lambda.grad(0, k);
    const double current = std::abs(adapter.lambda.value(0, k) * g);
    adapter.importance[k] = kImportanceDecay * adapter.importance[k] + (1.0 - kImportanceDecay) * current;
  }
  return importance_scores(adapter);
}

std::vector<double> importance_scores(const AdaLoraAdapter& adapter) {
  std::vector<double> out(adapter.rank(), 0.0);
  for (std::size_t k = 0; k < adapter.rank(); ++k)
    if (adapter.active[k]) out[k] = adapter.importance[k];
  return out;
}

void reallocate_budget(std::span<AdaLoraAdapter* const> adapters, std::size_t total_budget) {
  struct Slot {
    std::size_t adapter;
    std::size_t rank;
    double score;
  };
  std::vector<Slot> slots;
  for (std::size_t a = 0; a < adapters.size(); ++a)
    for (std::size_t k = 0; k < adapters[a]->rank(); ++k) slots.push_back({a, k, adapters[a]->importance[k]});
  if (total_budget > slots.size()) throw ContractError("reallocate_budget: budget exceeds total rank count");

  std::stable_sort(slots.begin(), slots.end(), [](const Slot& x, const Slot& y) { return x.score > y.score; });
  for (std::size_t i = 0; i < slots.size(); ++i) {
    AdaLoraAdapter& ad = *adapters[slots[i].adapter];
    const std::size_t k = slots[i].rank;
    const bool keep = i < total_budget;
    ad.active[k] = keep;
    if (!keep) ad.lambda.value(0, k) = 0.0;
  }
}

ParamCount count_params(std::span<const ad::Parameter* const> params) {
  ParamCount c;
  for (const ad::Parameter* p : params) (p->trainable ? c.trainable : c.frozen) += p->value.size();
  return c;
}

namespace {

void put_header(std::vector<std::uint8_t>& out, std::size_t d1, std::size_t d2, std::size_t r) {
  binio::put_u32(out, static_cast<std::uint32_t>(d1));
  binio::put_u32(out, static_cast<std::uint32_t>(d2));
  binio::put_u32(out, static_cast<std::uint32_t>(r));
}

void put_payload(std::vector<std::uint8_t>& out, const Tensor& t) {
  for (double v : t.data()) binio::put_f64(out, v);
}

Tensor get_payload(binio::Reader& in, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = in.f64();
  return t;
}

}  // namespace

void append_adapter(std::vector<std::uint8_t>& out, const LoraAdapter& adapter) {
  put_header(out, adapter.out_dim(), adapter.in_dim(), adapter.rank());
  binio::put_f64(out, adapter.scaling);
  put_payload(out, adapter.w0.value);
  put_payload(out, adapter.a.value);
  put_payload(out, adapter.b.value);
}

void append_adapter(std::vector<std::uint8_t>& out, const AdaLoraAdapter& adapter) {
  put_header(out, adapter.out_dim(), adapter.in_dim(), adapter.rank());
  put_payload(out, adapter.w0.value);
  put_payload(out, adapter.p.value);
  put_payload(out, adapter.lambda.value);
  put_payload(out, adapter.q.value);
  for (bool on : adapter.active) binio::put_f64(out, on ? 1.0 : 0.0);
  for (double s : adapter.importance) binio::put_f64(out, s);
}

LoraAdapter read_lora(binio::Reader& in) {
  const std::size_t d1 = in.u32();
  const std::size_t d2 = in.u32();
  const std::size_t r = in.u32();
  LoraAdapter ad;
  ad.scaling = in.f64();
  ad.w0 = ad::Parameter("w0", get_payload(in, d1, d2), false);
  ad.a = ad::Parameter("lora_a", get_payload(in, r, d2));
  ad.b = ad::Parameter("lora_b", get_payload(in, d1, r));
  return ad;
}

AdaLoraAdapter read_adalora(binio::Reader& in) {
  const std::size_t d1 = in.u32();
  const std::size_t d2 = in.u32();
  const std::size_t r = in.u32();
  AdaLoraAdapter ad;
  ad.w0 = ad::Parameter("w0", get_payload(in, d1, d2), false);
  ad.p = ad::Parameter("adalora_p", get_payload(in, d1, r));
  ad.lambda = ad::Parameter("adalora_lambda", get_payload(in, 1, r));
  ad.q = ad::Parameter("adalora_q", get_payload(in, r, d2));
  ad.active.resize(r);
  for (std::size_t k = 0; k < r; ++k) ad.active[k] = in.f64() != 0.0;
  ad.importance.resize(r);
  for (double& s : ad.importance) s = in.f64();
  return ad;
}

}  // namespace elite::peft
