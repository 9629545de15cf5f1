// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense 2-D tensors.
//
// A Graph owns every node created while building an expression. Nodes are
// appended in creation order, which is already a topological order, so
// backward() simply walks the tape in reverse. Trainable weights live
// outside the graph in Parameter objects; binding one with Graph::param()
// makes backward() accumulate into Parameter::grad.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "elite/tensor.hpp"

namespace elite::ad {

struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()), trainable(train) {}

  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor(value.rows(), value.cols()); }
};

enum class Op : std::uint8_t {
  Leaf,
  Param,
  MatMul,
  Relu,
  AddBias,
  ScaleCols,
  ConcatCols,
  GatherRows,
  GatherCols,
  GroupMeanRows,
  SoftmaxRows,
  Transpose,
  Add,
  Sub,
  Scale,
  Sum,
  SumSquares,
  Custom,
};

class Graph;

/// Handle to a node on a Graph's tape.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Graph {
 public:
  // Adjoint callback: reads the node's own grad and accumulates into parents.
  using Backward = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    Tensor value;
    Tensor grad;
    Op op = Op::Leaf;
    std::vector<std::size_t> parents;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant input; gradients are still recorded when requires_grad is set
  /// (used by the gradient checker).
  Var leaf(Tensor value, bool requires_grad = false);
  /// Binds an external parameter. Frozen parameters enter as constants.
  Var param(Parameter& p);

  /// Appends a node. The backward callback is dropped when no parent needs
  /// a gradient.
  Var record(Tensor value, Op op, std::vector<std::size_t> parents, Backward backward);

  void backward(Var root);

  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Adds delta into the grad of node id when that node tracks gradients.
  void accumulate(std::size_t id, const Tensor& delta);

 private:
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var relu(Var a);
Var add_bias(Var a, Var bias_row);
/// Multiplies column j of a by row(0, j).
Var scale_cols(Var a, Var row);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const std::size_t> index);
Var gather_cols(Var a, std::span<const std::size_t> index);
Var group_mean_rows(Var a, std::span<const std::size_t> group, std::size_t group_count);
Var softmax_rows(Var a);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var sum_squares(Var a);

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t samples = 50;
  std::uint64_t seed = 0;
};

using LossBuilder = std::function<Var(Graph&, std::span<const Var>)>;

/// Compares analytic gradients against central differences on a random
/// sample of parameter coordinates. Returns the largest
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const LossBuilder& loss, std::vector<Tensor>& params,
                  const GradCheckOptions& options = {});

}  // namespace elite::ad
