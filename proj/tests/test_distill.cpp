#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "elite/distill.hpp"
#include "elite/errors.hpp"
#include "elite/labelgen.hpp"
#include "test_util.hpp"

using namespace elite;
using namespace elite::distill;

namespace {

SynthParams small_params() {
  SynthParams p;
  p.width = 32;
  p.height = 24;
  p.class_count = 3;
  p.instances = 3;
  p.sparsity = 0.2;
  return p;
}

TrainConfig small_config(std::size_t stages = 2) {
  TrainConfig c;
  c.stages = stages;
  c.hidden = 16;
  c.grid = 4;
  c.rank = 2;
  c.epochs = 1;
  c.seed = 11;
  return c;
}

struct Fixture {
  std::vector<Scene> scenes;
  std::vector<TrainingScene> data;

  explicit Fixture(std::size_t n, std::uint64_t seed = 5) {
    for (std::size_t i = 0; i < n; ++i) scenes.push_back(synth_scene(derive_seed(seed, i), small_params()));
    for (const Scene& s : scenes) data.push_back({&s, ppc_gtg(s), false});
  }
};

Tensor row_probs(std::initializer_list<std::initializer_list<double>> rows) { return Tensor(rows); }

}  // namespace

TEST_CASE("ppmskd loss") {
  const std::vector<PixelCorrespondence> corr{{0, 0, 0}, {2, 1, 1}};
  ad::Graph g;
  const Tensor s1{{0.9, 0.1}, {0.5, 0.5}, {0.2, 0.8}};
  const Tensor s2{{0.6, 0.4}, {0.5, 0.5}, {0.3, 0.7}};
  std::vector<ad::Var> student{g.leaf(s1), g.leaf(s2)};

  SUBCASE("identical distributions give zero") {
    const std::vector<Tensor> teacher{row_probs({{0.9, 0.1}, {0.2, 0.8}}), row_probs({{0.6, 0.4}, {0.3, 0.7}})};
    const std::vector<std::size_t> used{0, 1};
    CHECK(ppmskd_loss(teacher, student, corr, used).value()(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("stage sum") {
    const std::vector<Tensor> teacher{row_probs({{0.5, 0.5}, {0.5, 0.5}}), row_probs({{0.1, 0.9}, {0.8, 0.2}})};
    auto kl = [](double t0, double t1, double s0, double s1) {
      return t0 * std::log(t0 / s0) + t1 * std::log(t1 / s1);
    };
    const double stage1 = (kl(0.5, 0.5, 0.9, 0.1) + kl(0.5, 0.5, 0.2, 0.8)) / 2;
    const double stage2 = (kl(0.1, 0.9, 0.6, 0.4) + kl(0.8, 0.2, 0.3, 0.7)) / 2;
    const std::vector<std::size_t> first{0};
    CHECK(ppmskd_loss(teacher, student, corr, first).value()(0, 0) == doctest::Approx(stage1).epsilon(1e-14));
    const std::vector<std::size_t> both{0, 1};
    CHECK(ppmskd_loss(teacher, student, corr, both).value()(0, 0) ==
          doctest::Approx(stage1 + stage2).epsilon(1e-14));
    // A single stage is exactly the KL term.
    ad::Var direct = nets::loss_kl(teacher[0], ad::gather_rows(student[0], std::vector<std::size_t>{0, 2})).value;
    CHECK(ppmskd_loss(teacher, student, corr, first).value()(0, 0) == direct.value()(0, 0));
  }
  SUBCASE("stage index out of range") {
    const std::vector<Tensor> teacher{Tensor(2, 2), Tensor(2, 2)};
    const std::vector<std::size_t> bad{2};
    CHECK_THROWS_AS(ppmskd_loss(teacher, student, corr, bad), IndexError);
  }
}

TEST_CASE("total loss has 2L+2 segmentation terms and resums") {
  Fixture fx(1);
  for (std::size_t stages : {1u, 2u, 4u}) {
    TrainConfig cfg = small_config(stages);
    Models m = init_models(cfg, 3);
    const std::vector<double> w(3, 1.0);
    ad::Graph g;
    const LossGraph lg = total_loss(g, fx.data[0], m, cfg, w);
    CHECK(lg.breakdown.segmentation_terms() == 2 * stages + 2);
    CHECK(std::abs(lg.breakdown.resum(cfg.lambda_kd, cfg.lambda_orth) - lg.breakdown.total) < 1e-12);
    CHECK(lg.breakdown.kd >= 0.0);
  }
}

TEST_CASE("lambda_kd zero removes the distillation term") {
  Fixture fx(1);
  TrainConfig cfg = small_config();
  Models m = init_models(cfg, 3);
  const std::vector<double> w(3, 1.0);
  ad::Graph g1;
  const LossBreakdown with = total_loss(g1, fx.data[0], m, cfg, w).breakdown;
  cfg.lambda_kd = 0.0;
  ad::Graph g2;
  const LossBreakdown without = total_loss(g2, fx.data[0], m, cfg, w).breakdown;
  CHECK(without.kd == with.kd);
  CHECK(without.total == doctest::Approx(with.total - with.kd).epsilon(1e-12));
}

TEST_CASE("zero epochs leaves parameters at initialization") {
  Fixture fx(1);
  TrainConfig cfg = small_config();
  cfg.epochs = 0;
  TrainResult r = train(cfg, fx.data, 3);
  CHECK(r.history.empty());
  Models fresh = init_models(cfg, 3);
  auto a = r.models.student.parameters();
  auto b = fresh.student.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
}

TEST_CASE("training is deterministic and reduces the loss") {
  Fixture fx(2);
  TrainConfig cfg = small_config();
  cfg.epochs = 100;
  cfg.adapter = nets::AdapterKind::AdaLora;
  cfg.adalora_budget = 3;
  const TrainResult r1 = train(cfg, fx.data, 3);
  const TrainResult r2 = train(cfg, fx.data, 3);
  REQUIRE(r1.history.size() == 200);
  for (std::size_t i = 0; i < r1.history.size(); ++i) CHECK(r1.history[i].total == r2.history[i].total);
  auto window = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 20; ++i) s += r1.history[i].total;
    return s;
  };
  CHECK(window(180) < window(0));
  for (const auto& h : r1.history) CHECK(std::abs(h.resum(cfg.lambda_kd, cfg.lambda_orth) - h.total) < 1e-12);
  std::size_t active = 0;
  for (auto* ada : const_cast<Models&>(r1.models).teacher.adalora_adapters()) active += ada->active_rank();
  CHECK(active == 3);
}

TEST_CASE("without distillation the student ignores the teacher seed") {
  Fixture fx(1);
  TrainConfig cfg = small_config();
  cfg.epochs = 5;
  cfg.lambda_kd = 0.0;
  cfg.teacher_seed = 1;
  TrainResult a = train(cfg, fx.data, 3);
  cfg.teacher_seed = 2;
  TrainResult b = train(cfg, fx.data, 3);
  auto pa = a.models.student.parameters();
  auto pb = b.models.student.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  CHECK(a.models.teacher.final_head.weight.value != b.models.teacher.final_head.weight.value);
}

TEST_CASE("student inference") {
  Rng rng(3);
  nets::StudentNet net = nets::StudentNet::create({1, 8, 3, 0.2}, rng);
  net.final_head.weight.value.fill(0.0);
  net.final_head.bias.value = Tensor{{0.0, 0.0, 0.0}};
  const PointCloud cloud{{0, 0, 0, 0}, {1, 1, 1, 1}, {2, 0, 1, 0.5}};
  // All-equal scores resolve to the lowest class index.
  CHECK(distill::infer_student(net, cloud) == std::vector<LabelId>{0, 0, 0});
  net.final_head.bias.value = Tensor{{0.0, 1.0, 1.0}};
  CHECK(distill::infer_student(net, cloud) == std::vector<LabelId>{1, 1, 1});
  CHECK_THROWS_AS(distill::infer_student(net, {}), ContractError);

  // Reordering the points reorders the predictions.
  Rng rng2(4);
  nets::StudentNet net2 = nets::StudentNet::create({2, 8, 3, 0.2}, rng2);
  PointCloud big;
  for (std::size_t i = 0; i < 20; ++i)
    big.push_back({rng2.uniform(-5, 5), rng2.uniform(-5, 5), rng2.uniform(-1, 1), rng2.uniform()});
  const PointCloud reversed(big.rbegin(), big.rend());
  auto fwd = distill::infer_student(net2, big);
  std::reverse(fwd.begin(), fwd.end());
  CHECK(fwd == distill::infer_student(net2, reversed));
}

TEST_CASE("parameter counts") {
  TrainConfig cfg = small_config(1);
  cfg.hidden = 64;
  cfg.rank = 2;
  cfg.grid = 8;
  const Models m = init_models(cfg, 3);
  const ComponentParams c = count_params(m);
  CHECK(c.student.trainable == 710);
  CHECK(c.student.frozen == 0);
  CHECK(c.teacher.frozen == nets::kPatchInput * 64 + 64 * 64);
  CHECK(c.teacher.trainable == 2 * (64 * 2) + 2);
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  for (auto kind : {nets::AdapterKind::Lora, nets::AdapterKind::AdaLora}) {
    TrainConfig cfg = small_config();
    cfg.adapter = kind;
    const Models m = init_models(cfg, 3);
    save_checkpoint(m, dir / "m.ckpt");
    const Models back = load_checkpoint(dir / "m.ckpt");
    auto a = m.student.parameters();
    auto b = back.student.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
    auto ta = m.teacher.parameters();
    auto tb = back.teacher.parameters();
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) {
      CHECK(ta[i]->value == tb[i]->value);
      CHECK(ta[i]->trainable == tb[i]->trainable);
    }
  }
  binio::write_file(dir / "bad.ckpt", std::vector<std::uint8_t>{'n', 'o', 'p', 'e'});
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), FormatError);
}
