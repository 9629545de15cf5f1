#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "elite/errors.hpp"
#include "elite/nets.hpp"
#include "oracles.hpp"

using namespace elite;
using namespace elite::nets;

namespace {

Tensor random_probs(std::size_t n, std::size_t c, Rng& rng) {
  Tensor t(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (t(i, k) = 0.05 + rng.uniform());
    for (std::size_t k = 0; k < c; ++k) t(i, k) /= s;
  }
  return t;
}

PointCloud random_cloud(std::size_t n, Rng& rng) {
  PointCloud cloud;
  for (std::size_t i = 0; i < n; ++i)
    cloud.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-0.5, 0.5), rng.uniform()});
  return cloud;
}

}  // namespace

TEST_CASE("weighted cross-entropy") {
  ad::Graph g;
  const std::vector<double> w{1, 1};
  const std::vector<LabelId> y0{0};
  CHECK(loss_wce(g.leaf(Tensor{{0.5, 0.5}}), y0, w).value.value()(0, 0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const std::vector<LabelId> y{0, 1};
  CHECK(loss_wce(g.leaf(Tensor{{1, 0}, {0, 1}}), y, w).value.value()(0, 0) == 0.0);
  const std::vector<LabelId> ign{kIgnoreLabel, kIgnoreLabel};
  const LossResult e = loss_wce(g.leaf(Tensor{{1, 0}, {0, 1}}), ign, w);
  CHECK(e.empty);
  CHECK(e.value.value()(0, 0) == 0.0);
  const std::vector<LabelId> bad{2};
  CHECK_THROWS_AS(loss_wce(g.leaf(Tensor{{0.5, 0.5}}), bad, w), IndexError);
  // Zero probability is clamped, not infinite.
  CHECK(std::isfinite(loss_wce(g.leaf(Tensor{{0, 1}}), y0, w).value.value()(0, 0)));
}

TEST_CASE("lovasz examples") {
  ad::Graph g;
  const std::vector<LabelId> y{0, 1};
  CHECK(loss_lovasz(g.leaf(Tensor{{1, 0}, {0, 1}}), y).value.value()(0, 0) == 0.0);
  const std::vector<LabelId> one{0};
  CHECK(loss_lovasz(g.leaf(Tensor{{0.3, 0.7}}), one).value.value()(0, 0) == doctest::Approx(0.7).epsilon(1e-15));
  const std::vector<LabelId> ign{kIgnoreLabel};
  CHECK(loss_lovasz(g.leaf(Tensor{{0.3, 0.7}}), ign).empty);
}

TEST_CASE("lovasz_grad of a sorted indicator") {
  // truth [1, 0, 1]: Jaccard losses 1/2, 2/3, 1 after each prefix.
  const auto gr = lovasz_grad({true, false, true});
  CHECK(gr[0] == doctest::Approx(0.5));
  CHECK(gr[1] == doctest::Approx(1.0 / 6.0));
  CHECK(gr[2] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("lovasz matches the brute-force extension") {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.below(5);
    const std::size_t c = 2 + rng.below(3);
    const Tensor p = random_probs(n, c, rng);
    std::vector<LabelId> y(n);
    for (auto& v : y) v = rng.uniform() < 0.15 ? kIgnoreLabel : static_cast<LabelId>(rng.below(c));
    std::vector<std::vector<double>> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i].assign(p.row(i).begin(), p.row(i).end());
    ad::Graph g;
    const double got = loss_lovasz(g.leaf(p), y).value.value()(0, 0);
    CHECK(got == doctest::Approx(oracle::lovasz_softmax_bruteforce(rows, y, c)).epsilon(1e-12));
  }
}

TEST_CASE("kl divergence") {
  ad::Graph g;
  const Tensor t{{0.5, 0.5}};
  CHECK(loss_kl(t, g.leaf(Tensor{{0.5, 0.5}})).value.value()(0, 0) == 0.0);
  const double expect = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(loss_kl(t, g.leaf(Tensor{{0.9, 0.1}})).value.value()(0, 0) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(expect == doctest::Approx(0.5108).epsilon(1e-4));
  CHECK(loss_kl(Tensor(0, 2), g.leaf(Tensor(0, 2))).empty);
  CHECK_THROWS_AS(loss_kl(Tensor(2, 2), g.leaf(Tensor(1, 2))), ContractError);
}

TEST_CASE("loss gradients pass finite differences") {
  Rng rng(4);
  const std::vector<LabelId> y{0, 2, 1, kIgnoreLabel, 2, 0};
  const std::vector<double> w{0.8, 1.3, 0.9};
  const Tensor teacher = random_probs(6, 3, rng);
  std::vector<Tensor> params{Tensor(6, 3)};
  for (double& v : params[0].data()) v = rng.uniform(-2, 2);
  const double err = ad::grad_check(
      [&](ad::Graph&, std::span<const ad::Var> p) {
        ad::Var s = ad::softmax_rows(p[0]);
        ad::Var total = ad::add(loss_wce(s, y, w).value, loss_lovasz(s, y).value);
        return ad::add(total, loss_kl(teacher, s).value);
      },
      params, {1e-6, 50, 5});
  CHECK(err < 1e-4);
}

TEST_CASE("class weights") {
  const std::vector<std::size_t> counts{90, 10};
  const auto w = class_weights_from_counts(counts);
  CHECK((w[0] + w[1]) / 2 == doctest::Approx(1.0));
  CHECK(w[1] > w[0]);
  const std::vector<std::size_t> none{0, 0};
  CHECK(class_weights_from_counts(none) == std::vector<double>{1, 1});
}

TEST_CASE("student output shapes") {
  Rng rng(5);
  StudentConfig cfg{3, 16, 3, 0.2};
  StudentNet net = StudentNet::create(cfg, rng);
  const PointCloud cloud = random_cloud(10, rng);
  ad::Graph g;
  const StudentOutputs out = student_forward(g, cloud, net);
  REQUIRE(out.stages.size() == 3);
  for (const auto& s : out.stages) {
    CHECK(s.features.rows() == 10);
    CHECK(s.features.cols() == 16);
    CHECK(s.scores.rows() == 10);
    CHECK(s.scores.cols() == 3);
  }
  CHECK(out.final_scores.rows() == 10);
  CHECK(out.final_scores.cols() == 3);
  CHECK_THROWS_AS(student_forward(g, {}, net), ContractError);
}

TEST_CASE("zero classifier gives uniform scores") {
  Rng rng(6);
  StudentNet net = StudentNet::create({1, 8, 4, 0.2}, rng);
  net.final_head.weight.value.fill(0.0);
  net.stages[0].head.weight.value.fill(0.0);
  ad::Graph g;
  const StudentOutputs out = student_forward(g, random_cloud(5, rng), net);
  for (double v : out.final_scores.value().data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  for (double v : out.stages[0].scores.value().data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("points sharing a voxel share stage features") {
  Rng rng(7);
  StudentNet net = StudentNet::create({2, 8, 3, 0.5}, rng);
  PointCloud cloud{{0.1, 0.1, 0.1, 0.2}, {0.2, 0.15, 0.1, 0.9}, {3, 3, 0, 0.5}};
  ad::Graph g;
  const StudentOutputs out = student_forward(g, cloud, net);
  const Tensor& f = out.stages[0].features.value();
  for (std::size_t c = 0; c < f.cols(); ++c) CHECK(f(0, c) == f(1, c));
}

TEST_CASE("student gradient passes finite differences") {
  Rng rng(8);
  StudentNet net = StudentNet::create({2, 8, 3, 0.3}, rng);
  const PointCloud cloud = random_cloud(12, rng);
  std::vector<LabelId> y(12);
  for (auto& v : y) v = static_cast<LabelId>(rng.below(3));
  const std::vector<double> w{1, 1, 1};
  auto loss_of = [&] {
    ad::Graph g;
    StudentOutputs out = student_forward(g, cloud, net);
    ad::Var total = loss_wce(out.final_scores, y, w).value;
    for (const auto& s : out.stages) total = ad::add(total, loss_lovasz(s.scores, y).value);
    return total.value()(0, 0);
  };
  auto params = net.parameters();
  for (auto* p : params) p->zero_grad();
  {
    ad::Graph g;
    StudentOutputs out = student_forward(g, cloud, net);
    ad::Var total = loss_wce(out.final_scores, y, w).value;
    for (const auto& s : out.stages) total = ad::add(total, loss_lovasz(s.scores, y).value);
    g.backward(total);
  }
  double worst = 0.0;
  const double eps = 1e-6;
  for (int k = 0; k < 60; ++k) {
    ad::Parameter* p = params[rng.below(params.size())];
    const std::size_t i = rng.below(p->value.size());
    double& v = p->value.data()[i];
    const double keep = v;
    v = keep + eps;
    const double up = loss_of();
    v = keep - eps;
    const double down = loss_of();
    v = keep;
    const double num = (up - down) / (2 * eps);
    const double ana = p->grad.data()[i];
    worst = std::max(worst, std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)}));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("teacher patch input and decode") {
  Rng rng(9);
  TeacherConfig tc{2, 2, 8, 3, 2, AdapterKind::Lora};
  TeacherNet net = TeacherNet::create(tc, rng);
  RgbImage img(8, 6);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i % 251);
  const Tensor x = patch_input(img, 2);
  CHECK(x.rows() == 4);
  CHECK(x.cols() == kPatchInput);
  CHECK(x(1, 3) == 0.75);
  CHECK(x(1, 4) == 0.25);
  CHECK_THROWS_AS(patch_input(RgbImage(7, 6), 2), ContractError);

  ad::Graph g;
  auto stages = teacher_forward(g, img, net);
  CHECK(net.forward_calls == 1);
  REQUIRE(stages.size() == 2);
  CHECK(stages[0].features.rows() == 4);

  // Pixel (u=5, v=1) lies in patch column 1, row 0.
  CHECK(patch_of_pixel(5, 1, 8, 6, 2) == 1);
  const std::vector<PixelCoord> px{{1, 5}, {0, 0}, {5, 7}};
  ad::Var dec = patch_decode(g, stages[0].features, net.decoders[0], 8, 6, 2, px, &net);
  CHECK(net.decode_calls == 1);
  const std::vector<PixelCoord> all{{0, 0}, {0, 4}, {3, 0}, {3, 4}};
  ad::Var per_patch = patch_decode(g, stages[0].features, net.decoders[0], 8, 6, 2, all);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(dec.value()(0, c) == per_patch.value()(1, c));
    CHECK(dec.value()(2, c) == per_patch.value()(3, c));
  }
  const std::vector<PixelCoord> none;
  CHECK(patch_decode(g, stages[0].features, net.decoders[0], 8, 6, 2, none).rows() == 0);
  const std::vector<PixelCoord> outside{{6, 0}};
  CHECK_THROWS_AS(patch_decode(g, stages[0].features, net.decoders[0], 8, 6, 2, outside), IndexError);
}

TEST_CASE("single-patch grid decodes every pixel identically") {
  Rng rng(10);
  TeacherNet net = TeacherNet::create({1, 1, 8, 2, 2, AdapterKind::AdaLora}, rng);
  RgbImage img(4, 4);
  ad::Graph g;
  auto stages = teacher_forward(g, img, net);
  const std::vector<PixelCoord> px{{0, 0}, {3, 3}, {1, 2}};
  const Tensor s = patch_decode(g, stages[0].features, net.decoders[0], 4, 4, 1, px).value();
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) CHECK(s(i, c) == s(0, c));
}
