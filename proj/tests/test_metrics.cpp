#include <algorithm>
#include <chrono>
#include <thread>

#include "doctest.h"
#include "elite/errors.hpp"
#include "elite/metrics.hpp"
#include "elite/random.hpp"

using namespace elite;
using elite::metrics::ConfusionMatrix;

TEST_CASE("hand example gives 7/12") {
  ConfusionMatrix cm(2);
  const std::vector<LabelId> t{0, 0, 1, 1};
  const std::vector<LabelId> p{0, 1, 1, 1};
  cm.update(t, p);
  const auto iou = cm.iou_per_class();
  CHECK(*iou[0] == 0.5);
  CHECK(*iou[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(cm.miou() == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
  CHECK(cm.total() == 4);
}

TEST_CASE("perfect prediction and ignore") {
  ConfusionMatrix cm(2);
  const std::vector<LabelId> t{0, 1, kIgnoreLabel};
  const std::vector<LabelId> p{0, 1, 0};
  cm.update(t, p);
  CHECK(cm.miou() == 1.0);
  CHECK(cm.total() == 2);
}

TEST_CASE("absent classes are excluded") {
  ConfusionMatrix cm(3);
  const std::vector<LabelId> t{0, 0, 1, 1};
  const std::vector<LabelId> p{0, 1, 1, 1};
  cm.update(t, p);
  CHECK_FALSE(cm.iou_per_class()[2].has_value());
  CHECK(cm.miou() == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
}

TEST_CASE("errors") {
  ConfusionMatrix cm(2);
  CHECK_THROWS_AS(cm.miou(), ContractError);
  const std::vector<LabelId> a{0};
  const std::vector<LabelId> b{0, 1};
  CHECK_THROWS_AS(cm.update(a, b), DimensionError);
  const std::vector<LabelId> bad{2};
  CHECK_THROWS_AS(cm.update(a, bad), IndexError);
  CHECK_THROWS_AS(cm.merge(ConfusionMatrix(3)), DimensionError);
}

TEST_CASE("order independence, merging and relabeling") {
  Rng rng(1);
  std::vector<LabelId> t(200);
  std::vector<LabelId> p(200);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<LabelId>(rng.below(4));
    p[i] = static_cast<LabelId>(rng.below(4));
  }
  ConfusionMatrix whole(4);
  whole.update(t, p);

  std::vector<std::size_t> perm(t.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<LabelId> tp(t.size()), pp(t.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    tp[i] = t[perm[i]];
    pp[i] = p[perm[i]];
  }
  ConfusionMatrix shuffled(4);
  shuffled.update(tp, pp);
  CHECK(shuffled == whole);

  ConfusionMatrix a(4), b(4);
  a.update(std::span(t).first(77), std::span(p).first(77));
  b.update(std::span(t).subspan(77), std::span(p).subspan(77));
  a.merge(b);
  CHECK(a == whole);

  const std::vector<LabelId> relabel{2, 0, 3, 1};
  auto map = [&](LabelId v) { return v == kIgnoreLabel ? v : relabel[v]; };
  std::vector<LabelId> tr(t.size()), pr(t.size());
  std::transform(t.begin(), t.end(), tr.begin(), map);
  std::transform(p.begin(), p.end(), pr.begin(), map);
  ConfusionMatrix moved(4);
  moved.update(tr, pr);
  CHECK(moved.miou() == doctest::Approx(whole.miou()).epsilon(1e-15));
}

TEST_CASE("throughput") {
  const double rate = metrics::throughput([] { std::this_thread::sleep_for(std::chrono::milliseconds(10)); }, 1, 10);
  CHECK(rate >= 80.0);
  CHECK(rate <= 120.0);

  int calls = 0;
  const double steady = metrics::throughput(
      [&] {
        std::this_thread::sleep_for(std::chrono::milliseconds(calls++ == 0 ? 300 : 5));
      },
      1, 10);
  CHECK(steady > 100.0);
  CHECK_THROWS_AS(metrics::throughput([] {}, 0, 0), ContractError);
}
