// SPDX-License-Identifier: Apache-2.0
#include "elite/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "elite/errors.hpp"

namespace elite::ad {

const Tensor& Var::value() const { return graph->node(id).value; }
const Tensor& Var::grad() const { return graph->node(id).grad; }

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.op = Op::Leaf;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.op = Op::Param;
  n.requires_grad = p.trainable;
  n.param = p.trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, Op op, std::vector<std::size_t> parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                [this](std::size_t p) { return nodes_[p].requires_grad; });
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Graph::accumulate(std::size_t id, const Tensor& delta) {
  Node& n = nodes_[id];
  if (n.requires_grad) n.grad += delta;
}

void Graph::backward(Var root) {
  if (root.graph != this) throw ContractError("backward: root belongs to another graph");
  const Tensor& rv = nodes_[root.id].value;
  if (rv.rows() != 1 || rv.cols() != 1) throw ContractError("backward: root must be 1x1");
  for (std::size_t i = 0; i <= root.id; ++i) {
    Node& n = nodes_[i];
    n.grad = n.requires_grad ? Tensor(n.value.rows(), n.value.cols()) : Tensor();
  }
  if (!nodes_[root.id].requires_grad) return;
  nodes_[root.id].grad(0, 0) = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

namespace {

void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw ContractError("operands belong to different graphs");
}

bool needs(Graph& g, std::size_t id) { return g.node(id).requires_grad; }

}  // namespace

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  Tensor out = elite::matmul(a.value(), b.value());
  return a.graph->record(std::move(out), Op::MatMul, {a.id, b.id}, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
    const Tensor& grad = g.node(self).grad;
    if (needs(g, ia)) g.node(ia).grad += matmul_transposed_b(grad, g.node(ib).value);
    if (needs(g, ib)) add_matmul_transposed_a(g.node(ib).grad, g.node(ia).value, grad);
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.graph->record(std::move(out), Op::Relu, {a.id}, [ia = a.id](Graph& g, std::size_t self) {
    const auto& grad = g.node(self).grad.data();
    const auto& x = g.node(ia).value.data();
    auto& pg = g.node(ia).grad.data();
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (x[i] > 0.0) pg[i] += grad[i];
  });
}

Var add_bias(Var a, Var bias_row) {
  require_same_graph(a, bias_row);
  const Tensor& b = bias_row.value();
  if (b.rows() != 1 || b.cols() != a.cols()) throw DimensionError("add_bias: bias must be 1 x a.cols");
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b(0, c);
  return a.graph->record(std::move(out), Op::AddBias, {a.id, bias_row.id},
                         [ia = a.id, ib = bias_row.id](Graph& g, std::size_t self) {
                           const Tensor& grad = g.node(self).grad;
                           if (needs(g, ia)) g.node(ia).grad += grad;
                           if (needs(g, ib)) {
                             Tensor& pb = g.node(ib).grad;
                             for (std::size_t r = 0; r < grad.rows(); ++r)
                               for (std::size_t c = 0; c < grad.cols(); ++c) pb(0, c) += grad(r, c);
                           }
                         });
}

Var scale_cols(Var a, Var row) {
  require_same_graph(a, row);
  const Tensor& s = row.value();
  if (s.rows() != 1 || s.cols() != a.cols()) throw DimensionError("scale_cols: row must be 1 x a.cols");
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= s(0, c);
  return a.graph->record(std::move(out), Op::ScaleCols, {a.id, row.id},
                         [ia = a.id, is = row.id](Graph& g, std::size_t self) {
                           const Tensor& grad = g.node(self).grad;
                           const Tensor& x = g.node(ia).value;
                           const Tensor& s = g.node(is).value;
                           if (needs(g, ia)) {
                             Tensor& px = g.node(ia).grad;
                             for (std::size_t r = 0; r < grad.rows(); ++r)
                               for (std::size_t c = 0; c < grad.cols(); ++c) px(r, c) += grad(r, c) * s(0, c);
                           }
                           if (needs(g, is)) {
                             Tensor& ps = g.node(is).grad;
                             for (std::size_t r = 0; r < grad.rows(); ++r)
                               for (std::size_t c = 0; c < grad.cols(); ++c) ps(0, c) += grad(r, c) * x(r, c);
                           }
                         });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty list");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    require_same_graph(parts[0], p);
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    offset += v.cols();
  }
  return parts[0].graph->record(std::move(out), Op::ConcatCols, ids, [](Graph& g, std::size_t self) {
    const Tensor& grad = g.node(self).grad;
    std::size_t off = 0;
    for (std::size_t pid : g.node(self).parents) {
      const std::size_t w = g.node(pid).value.cols();
      if (needs(g, pid)) {
        Tensor& pg = g.node(pid).grad;
        for (std::size_t r = 0; r < grad.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) pg(r, c) += grad(r, off + c);
      }
      off += w;
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  const Tensor& v = a.value();
  Tensor out(index.size(), v.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= v.rows()) throw IndexError("gather_rows: index out of range");
    std::copy(v.row(index[i]).begin(), v.row(index[i]).end(), out.row(i).begin());
  }
  return a.graph->record(std::move(out), Op::GatherRows, {a.id},
                         [ia = a.id, idx = std::vector<std::size_t>(index.begin(), index.end())](Graph& g,
                                                                                                 std::size_t self) {
                           const Tensor& grad = g.node(self).grad;
                           Tensor& pg = g.node(ia).grad;
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             auto src = grad.row(i);
                             auto dst = pg.row(idx[i]);
                             for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                           }
                         });
}

Var gather_cols(Var a, std::span<const std::size_t> index) {
  const Tensor& v = a.value();
  Tensor out(v.rows(), index.size());
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= v.cols()) throw IndexError("gather_cols: index out of range");
    for (std::size_t r = 0; r < v.rows(); ++r) out(r, j) = v(r, index[j]);
  }
  return a.graph->record(std::move(out), Op::GatherCols, {a.id},
                         [ia = a.id, idx = std::vector<std::size_t>(index.begin(), index.end())](Graph& g,
                                                                                                 std::size_t self) {
                           const Tensor& grad = g.node(self).grad;
                           Tensor& pg = g.node(ia).grad;
                           for (std::size_t r = 0; r < grad.rows(); ++r)
                             for (std::size_t j = 0; j < idx.size(); ++j) pg(r, idx[j]) += grad(r, j);
                         });
}

Var group_mean_rows(Var a, std::span<const std::size_t> group, std::size_t group_count) {
  const Tensor& v = a.value();
  if (group.size() != v.rows()) throw DimensionError("group_mean_rows: one group id per row required");
  std::vector<double> counts(group_count, 0.0);
  for (std::size_t gid : group) {
    if (gid >= group_count) throw IndexError("group_mean_rows: group id out of range");
    counts[gid] += 1.0;
  }
  Tensor out(group_count, v.cols());
  for (std::size_t r = 0; r < v.rows(); ++r) {
    auto dst = out.row(group[r]);
    auto src = v.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  for (std::size_t k = 0; k < group_count; ++k) {
    if (counts[k] == 0.0) continue;
    for (double& x : out.row(k)) x /= counts[k];
  }
  return a.graph->record(std::move(out), Op::GroupMeanRows, {a.id},
                         [ia = a.id, grp = std::vector<std::size_t>(group.begin(), group.end()),
                          counts = std::move(counts)](Graph& g, std::size_t self) {
                           const Tensor& grad = g.node(self).grad;
                           Tensor& pg = g.node(ia).grad;
                           for (std::size_t r = 0; r < grp.size(); ++r) {
                             auto src = grad.row(grp[r]);
                             auto dst = pg.row(r);
                             const double inv = 1.0 / counts[grp[r]];
                             for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c] * inv;
                           }
                         });
}

Var softmax_rows(Var a) {
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    if (row.empty()) continue;
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& x : row) {
      x = std::exp(x - m);
      z += x;
    }
    for (double& x : row) x /= z;
  }
  return a.graph->record(std::move(out), Op::SoftmaxRows, {a.id}, [ia = a.id](Graph& g, std::size_t self) {
    const Tensor& grad = g.node(self).grad;
    const Tensor& y = g.node(self).value;
    Tensor& pg = g.node(ia).grad;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += grad(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) pg(r, c) += y(r, c) * (grad(r, c) - dot);
    }
  });
}

Var transpose(Var a) {
  return a.graph->record(a.value().transposed(), Op::Transpose, {a.id}, [ia = a.id](Graph& g, std::size_t self) {
    g.node(ia).grad += g.node(self).grad.transposed();
  });
}

Var add(Var a, Var b) {
  require_same_graph(a, b);
  if (!a.value().same_shape(b.value())) throw DimensionError("add: shape mismatch");
  Tensor out = a.value();
  out += b.value();
  return a.graph->record(std::move(out), Op::Add, {a.id, b.id}, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
    const Tensor& grad = g.node(self).grad;
    if (needs(g, ia)) g.node(ia).grad += grad;
    if (needs(g, ib)) g.node(ib).grad += grad;
  });
}

Var sub(Var a, Var b) {
  require_same_graph(a, b);
  if (!a.value().same_shape(b.value())) throw DimensionError("sub: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.value().data()[i];
  return a.graph->record(std::move(out), Op::Sub, {a.id, b.id}, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
    const Tensor& grad = g.node(self).grad;
    if (needs(g, ia)) g.node(ia).grad += grad;
    if (needs(g, ib)) {
      auto& pg = g.node(ib).grad.data();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= grad.data()[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& x : out.data()) x *= s;
  return a.graph->record(std::move(out), Op::Scale, {a.id}, [ia = a.id, s](Graph& g, std::size_t self) {
    const auto& grad = g.node(self).grad.data();
    auto& pg = g.node(ia).grad.data();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += s * grad[i];
  });
}

Var sum(Var a) {
  const auto& d = a.value().data();
  Tensor out(1, 1, std::accumulate(d.begin(), d.end(), 0.0));
  return a.graph->record(std::move(out), Op::Sum, {a.id}, [ia = a.id](Graph& g, std::size_t self) {
    const double gs = g.node(self).grad(0, 0);
    for (double& x : g.node(ia).grad.data()) x += gs;
  });
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x * x;
  return a.graph->record(Tensor(1, 1, s), Op::SumSquares, {a.id}, [ia = a.id](Graph& g, std::size_t self) {
    const double gs = g.node(self).grad(0, 0);
    const auto& x = g.node(ia).value.data();
    auto& pg = g.node(ia).grad.data();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += 2.0 * x[i] * gs;
  });
}

double grad_check(const LossBuilder& loss, std::vector<Tensor>& params, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("grad_check: eps must be positive");

  auto evaluate = [&](bool track, std::vector<Tensor>* grads) {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(g.leaf(p, track));
    Var out = loss(g, vars);
    const Tensor& v = out.value();
    if (v.rows() != 1 || v.cols() != 1) throw ContractError("grad_check: loss must be 1x1");
    const double value = v(0, 0);
    if (!std::isfinite(value)) throw NumericError("grad_check: loss is not finite");
    if (grads != nullptr) {
      g.backward(out);
      grads->clear();
      for (const Var& pv : vars) {
        const Tensor& gr = pv.grad();
        grads->push_back(gr.empty() ? Tensor(pv.rows(), pv.cols()) : gr);
      }
    }
    return value;
  };

  std::vector<Tensor> analytic;
  evaluate(true, &analytic);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) coords.emplace_back(p, i);
  std::mt19937_64 rng(options.seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > options.samples) coords.resize(options.samples);

  double worst = 0.0;
  for (auto [p, i] : coords) {
    double& x = params[p].data()[i];
    const double saved = x;
    x = saved + options.eps;
    const double up = evaluate(false, nullptr);
    x = saved - options.eps;
    const double down = evaluate(false, nullptr);
    x = saved;
    const double numeric = (up - down) / (2.0 * options.eps);
    const double a = analytic[p].data()[i];
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace elite::ad
