#include <cmath>
#include <vector>

#include "doctest.h"
#include "elite/autodiff.hpp"
#include "elite/errors.hpp"
#include "elite/random.hpp"

using namespace elite;
using namespace elite::ad;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

}  // namespace

TEST_CASE("matmul forward values") {
  Graph g;
  Var id = g.leaf(Tensor::identity(2));
  Var b = g.leaf(Tensor{{3, 4}, {5, 6}});
  CHECK(matmul(id, b).value() == Tensor{{3, 4}, {5, 6}});
  Var r = g.leaf(Tensor{{1, 2}});
  Var c = g.leaf(Tensor{{3}, {4}});
  CHECK(matmul(r, c).value() == Tensor{{11}});
  CHECK_THROWS_AS(matmul(g.leaf(Tensor(2, 3)), g.leaf(Tensor(2, 3))), DimensionError);
}

TEST_CASE("gather, group mean and concat") {
  Graph g;
  Var a = g.leaf(Tensor{{1}, {2}, {3}});
  std::vector<std::size_t> idx{2, 0};
  CHECK(gather_rows(a, idx).value() == Tensor{{3}, {1}});

  Var b = g.leaf(Tensor{{2}, {4}, {6}});
  std::vector<std::size_t> groups{0, 0, 1};
  CHECK(group_mean_rows(b, groups, 2).value() == Tensor{{3}, {6}});

  std::vector<Var> parts{g.leaf(Tensor(2, 1)), g.leaf(Tensor(2, 2))};
  Var cat = concat_cols(parts);
  CHECK(cat.rows() == 2);
  CHECK(cat.cols() == 3);
}

TEST_CASE("softmax rows") {
  Graph g;
  CHECK(softmax_rows(g.leaf(Tensor{{0, 0}})).value() == Tensor{{0.5, 0.5}});
  const Tensor big = softmax_rows(g.leaf(Tensor{{1000, 1000}})).value();
  CHECK(big(0, 0) == 0.5);
  CHECK(big(0, 1) == 0.5);
  const Tensor s = softmax_rows(g.leaf(Tensor{{0, std::log(3.0)}})).value();
  CHECK(s(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(s(0, 1) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("relu subgradient is zero at zero") {
  Graph g;
  Var x = g.leaf(Tensor{{-1, 0, 2}}, true);
  Var y = sum(relu(x));
  g.backward(y);
  CHECK(x.grad() == Tensor{{0, 0, 1}});
}

TEST_CASE("backward requires a scalar root") {
  Graph g;
  Var x = g.leaf(Tensor(2, 2), true);
  CHECK_THROWS_AS(g.backward(x), ContractError);
}

TEST_CASE("gradient accumulates across shared uses") {
  Graph g;
  Var x = g.leaf(Tensor{{3}}, true);
  // d/dx (x*x + 2x) = 2x + 2 = 8
  Var y = add(matmul(x, x), scale(x, 2.0));
  g.backward(sum(y));
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0));
}

TEST_CASE("frozen parameters receive no gradient") {
  Parameter w("w", Tensor{{1, 2}, {3, 4}}, false);
  Parameter v("v", Tensor{{1}, {1}});
  Graph g;
  Var out = sum(matmul(g.param(w), g.param(v)));
  g.backward(out);
  CHECK(w.grad == Tensor(2, 2));
  CHECK(v.grad == Tensor{{4}, {6}});
}

TEST_CASE("grad_check on a linear loss is exact") {
  Rng rng(1);
  const Tensor x = random_tensor(3, 1, rng);
  std::vector<Tensor> params{random_tensor(2, 3, rng)};
  const double err = grad_check(
      [&](Graph& g, std::span<const Var> p) { return sum(matmul(p[0], g.leaf(x))); }, params);
  CHECK(err < 1e-7);
}

TEST_CASE("grad_check on a two-layer relu net") {
  Rng rng(2);
  const Tensor x = random_tensor(6, 4, rng);
  std::vector<Tensor> params{random_tensor(4, 8, rng), random_tensor(1, 8, rng), random_tensor(8, 3, rng)};
  const double err = grad_check(
      [&](Graph& g, std::span<const Var> p) {
        Var h = relu(add_bias(matmul(g.leaf(x), p[0]), p[1]));
        return sum_squares(softmax_rows(matmul(h, p[2])));
      },
      params, {1e-5, 50, 3});
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check covers structural ops") {
  Rng rng(3);
  std::vector<Tensor> params{random_tensor(5, 4, rng), random_tensor(1, 4, rng)};
  const std::vector<std::size_t> rows{4, 0, 0, 2};
  const std::vector<std::size_t> cols{3, 1};
  const std::vector<std::size_t> groups{0, 1, 1, 2, 0};
  const double err = grad_check(
      [&](Graph&, std::span<const Var> p) {
        Var a = scale_cols(p[0], p[1]);
        std::vector<Var> parts{a, transpose(transpose(p[0]))};
        Var cat = concat_cols(parts);
        Var r = gather_cols(gather_rows(cat, rows), cols);
        Var m = group_mean_rows(p[0], groups, 3);
        return add(sum_squares(r), sum(sub(m, scale(m, 0.3))));
      },
      params, {1e-5, 50, 4});
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check rejects non-positive eps") {
  std::vector<Tensor> params{Tensor(1, 1)};
  auto loss = [](Graph&, std::span<const Var> p) { return sum(p[0]); };
  CHECK_THROWS_AS(grad_check(loss, params, {0.0, 10, 0}), ContractError);
}

TEST_CASE("grad_check flags non-finite losses") {
  std::vector<Tensor> params{Tensor{{1.0}}};
  auto loss = [](Graph& g, std::span<const Var> p) {
    return sum(matmul(p[0], g.leaf(Tensor{{std::numeric_limits<double>::infinity()}})));
  };
  CHECK_THROWS_AS(grad_check(loss, params), NumericError);
}
