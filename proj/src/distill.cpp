// SPDX-License-Identifier: Apache-2.0
#include "elite/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include "json.hpp"

#include "elite/binio.hpp"
#include "elite/errors.hpp"

namespace elite::distill {

void TrainConfig::validate() const {
  if (stages < 1) throw ContractError("stages must be at least 1");
  if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be positive");
  if (batch < 1) throw ContractError("batch must be at least 1");
  if (hidden < 4) throw ContractError("hidden must be at least 4");
  if (rank * 4 > hidden) throw ContractError("rank must not exceed hidden / 4");
  if (!(lambda_kd >= 0.0) || !(lambda_orth >= 0.0)) throw ContractError("loss weights must be non-negative");
  if (!(base_voxel_edge > 0.0)) throw ContractError("base_voxel_edge must be positive");
  if (realloc_every < 1) throw ContractError("realloc_every must be at least 1");
  if (adalora_budget > rank * stages) throw ContractError("adalora_budget exceeds total adapter rank");
  for (std::size_t s : kd_stages)
    if (s < 1 || s > stages) throw ContractError("kd_stages entries must lie in [1, stages]");
}

double LossBreakdown::resum(double lambda_kd, double lambda_orth) const {
  const double inv_l = 1.0 / static_cast<double>(teacher_stage.size());
  double stage_sum = 0.0;
  for (std::size_t l = 0; l < teacher_stage.size(); ++l) stage_sum += teacher_stage[l] + student_stage[l];
  return student_final + teacher_final + inv_l * stage_sum + lambda_kd * kd + lambda_orth * orth;
}

std::string LossBreakdown::to_json_line(std::size_t step) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["teacher_stage"] = teacher_stage;
  j["student_stage"] = student_stage;
  j["teacher_final"] = teacher_final;
  j["student_final"] = student_final;
  j["kd"] = kd;
  j["orth"] = orth;
  j["total"] = total;
  return j.dump();
}

namespace {


double seg_loss(ad::Var scores, std::span<const LabelId> labels, std::span<const double> weights, ad::Var& out) {
  const auto wce = nets::loss_wce(scores, labels, weights);
  const auto lov = nets::loss_lovasz(scores, labels);
  out = ad::add(wce.value, lov.value);
  return out.value()(0, 0);
}

}  // namespace

Models init_models(const TrainConfig& config, std::size_t classes) {
  config.validate();
  Rng student_rng(derive_seed(config.seed, 1));
  Rng teacher_rng(derive_seed(config.teacher_seed.value_or(config.seed), 2));
  nets::StudentConfig sc{config.stages, config.hidden, classes, config.base_voxel_edge};
  nets::TeacherConfig tc{config.grid, config.stages, config.hidden, classes, config.rank, config.adapter};
  return {nets::StudentNet::create(sc, student_rng), nets::TeacherNet::create(tc, teacher_rng)};
}

ad::Var ppmskd_loss(std::span<const Tensor> teacher_scores, std::span<const ad::Var> student_scores,
                    std::span<const PixelCorrespondence> correspondences, std::span<const std::size_t> stages_used) {
  if (teacher_scores.size() != student_scores.size())
    throw ContractError("ppmskd_loss: teacher and student stage counts differ");
  if (student_scores.empty()) throw ContractError("ppmskd_loss: no stages");
  ad::Graph& g = *student_scores[0].graph;
  std::vector<std::size_t> points;
  points.reserve(correspondences.size());
  for (const auto& pc : correspondences) points.push_back(pc.point_index);
  ad::Var total = g.leaf(Tensor(1, 1));
  for (std::size_t l : stages_used) {
    if (l >= student_scores.size()) throw IndexError("ppmskd_loss: stage index out of range");
    ad::Var student_at = ad::gather_rows(student_scores[l], points);
    total = ad::add(total, nets::loss_kl(teacher_scores[l], student_at).value);
  }
  return total;
}

LossGraph total_loss(ad::Graph& g, const TrainingScene& data, Models& models, const TrainConfig& config,
                     std::span<const double> class_weights) {
  const Scene& scene = *data.scene;
  const int width = scene.image.width;
  const int height = scene.image.height;
  const std::size_t stages = config.stages;
  const std::size_t grid = models.teacher.config.grid;

  const auto corr = project_points(scene.cloud, scene.cam);
  std::vector<PixelCoord> corr_pixels;
  corr_pixels.reserve(corr.size());
  for (const auto& pc : corr) corr_pixels.push_back({pc.v, pc.u});

  // Teacher supervision support: every labeled pixel of dense labels, or the
  // corresponded pixels of sparse ones.
  std::vector<PixelCoord> sup_pixels;
  std::vector<LabelId> sup_labels;
  const LabelImage& tl = data.teacher_labels;
  if (data.dense_teacher_labels) {
    for (int v = 0; v < tl.height; ++v)
      for (int u = 0; u < tl.width; ++u)
        if (tl.semantic[tl.index(u, v)] != kIgnoreLabel) {
          sup_pixels.push_back({v, u});
          sup_labels.push_back(tl.semantic[tl.index(u, v)]);
        }
  } else {
    for (const auto& px : corr_pixels) {
      const LabelId s = tl.semantic[tl.index(px.col, px.row)];
      if (s == kIgnoreLabel) continue;
      sup_pixels.push_back(px);
      sup_labels.push_back(s);
    }
  }

  auto student_out = nets::student_forward(g, scene.cloud, models.student);
  auto teacher_feats = nets::teacher_forward(g, scene.image, models.teacher);

  LossGraph out;
  LossBreakdown& br = out.breakdown;
  br.teacher_stage.resize(stages);
  br.student_stage.resize(stages);
  const double inv_l = 1.0 / static_cast<double>(stages);

  ad::Var stage_sum = g.leaf(Tensor(1, 1));
  std::vector<Tensor> teacher_kd(stages);
  std::vector<ad::Var> student_stage_scores(stages);
  for (std::size_t l = 0; l < stages; ++l) {
    ad::Var t_scores = nets::patch_decode(g, teacher_feats[l].features, models.teacher.decoders[l], width, height,
                                          grid, sup_pixels, &models.teacher);
    teacher_feats[l].scores = t_scores;
    ad::Var t_loss;
    br.teacher_stage[l] = seg_loss(t_scores, sup_labels, class_weights, t_loss);
    ad::Var s_loss;
    br.student_stage[l] = seg_loss(student_out.stages[l].scores, scene.point_semantic, class_weights, s_loss);
    stage_sum = ad::add(stage_sum, ad::add(t_loss, s_loss));

    // KD targets are decoded on a scratch graph: the teacher receives no
    // gradient from the distillation term.
    ad::Graph scratch;
    teacher_kd[l] = nets::patch_decode(scratch, scratch.leaf(teacher_feats[l].features.value()),
                                       models.teacher.decoders[l], width, height, grid, corr_pixels, &models.teacher)
                        .value();
    student_stage_scores[l] = student_out.stages[l].scores;
  }

  ad::Var t_final_scores = nets::teacher_final_decode(g, teacher_feats, models.teacher, width, height, sup_pixels);
  ad::Var t_final;
  br.teacher_final = seg_loss(t_final_scores, sup_labels, class_weights, t_final);
  ad::Var s_final;
  br.student_final = seg_loss(student_out.final_scores, scene.point_semantic, class_weights, s_final);

  std::vector<std::size_t> kd_used;
  if (config.kd_stages.empty()) {
    for (std::size_t l = 0; l < stages; ++l) kd_used.push_back(l);
  } else {
    for (std::size_t s : config.kd_stages) kd_used.push_back(s - 1);
  }
  ad::Var kd = ppmskd_loss(teacher_kd, student_stage_scores, corr, kd_used);
  br.kd = kd.value()(0, 0);

  ad::Var orth = g.leaf(Tensor(1, 1));
  for (auto* ada : models.teacher.adalora_adapters()) orth = ad::add(orth, peft::orth_reg(g, *ada));
  br.orth = orth.value()(0, 0);

  ad::Var total = ad::add(s_final, t_final);
  total = ad::add(total, ad::scale(stage_sum, inv_l));
  total = ad::add(total, ad::scale(kd, config.lambda_kd));
  total = ad::add(total, ad::scale(orth, config.lambda_orth));
  br.total = total.value()(0, 0);
  out.total = total;
  return out;
}

namespace {

std::vector<ad::Parameter*> trainable(Models& m) {
  std::vector<ad::Parameter*> out;
  for (auto* p : m.student.parameters())
    if (p->trainable) out.push_back(p);
  for (auto* p : m.teacher.parameters())
    if (p->trainable) out.push_back(p);
  return out;
}

void check_finite(const LossBreakdown& b) {
  auto bad = [](double v) { return !std::isfinite(v); };
  for (std::size_t l = 0; l < b.teacher_stage.size(); ++l) {
    if (bad(b.teacher_stage[l])) throw NumericError("non-finite loss: teacher stage " + std::to_string(l + 1));
    if (bad(b.student_stage[l])) throw NumericError("non-finite loss: student stage " + std::to_string(l + 1));
  }
  if (bad(b.teacher_final)) throw NumericError("non-finite loss: teacher final");
  if (bad(b.student_final)) throw NumericError("non-finite loss: student final");
  if (bad(b.kd)) throw NumericError("non-finite loss: kd");
  if (bad(b.orth)) throw NumericError("non-finite loss: orth");
  if (bad(b.total)) throw NumericError("non-finite loss: total");
}

void accumulate_mean(LossBreakdown& acc, const LossBreakdown& b, double w) {
  if (acc.teacher_stage.empty()) {
    acc.teacher_stage.assign(b.teacher_stage.size(), 0.0);
    acc.student_stage.assign(b.student_stage.size(), 0.0);
  }
  for (std::size_t l = 0; l < b.teacher_stage.size(); ++l) {
    acc.teacher_stage[l] += w * b.teacher_stage[l];
    acc.student_stage[l] += w * b.student_stage[l];
  }
  acc.teacher_final += w * b.teacher_final;
  acc.student_final += w * b.student_final;
  acc.kd += w * b.kd;
  acc.orth += w * b.orth;
  acc.total += w * b.total;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<TrainingScene>& scenes, std::size_t classes) {
  config.validate();
  if (scenes.empty()) throw ContractError("train: at least one scene required");
  TrainResult result{init_models(config, classes), {}, std::vector<double>(classes, 1.0)};

  if (config.weighted_ce) {
    std::vector<std::size_t> counts(classes, 0);
    for (const auto& s : scenes)
      for (LabelId y : s.scene->point_semantic)
        if (y != kIgnoreLabel && y < classes) ++counts[y];
    result.class_weights = nets::class_weights_from_counts(counts);
  }

  Models& models = result.models;
  const std::vector<ad::Parameter*> params = trainable(models);
  const std::size_t steps_per_epoch = (scenes.size() + config.batch - 1) / config.batch;
  const std::size_t total_steps = config.epochs * steps_per_epoch;
  const double batch_weight = 1.0 / static_cast<double>(config.batch);

  for (std::size_t step = 0; step < total_steps; ++step) {
    for (auto* p : params) p->zero_grad();
    LossBreakdown mean;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const TrainingScene& data = scenes[(step * config.batch + b) % scenes.size()];
      ad::Graph g;
      LossGraph lg = total_loss(g, data, models, config, result.class_weights);
      check_finite(lg.breakdown);
      g.backward(config.batch == 1 ? lg.total : ad::scale(lg.total, batch_weight));
      accumulate_mean(mean, lg.breakdown, batch_weight);
    }
    result.history.push_back(mean);

    auto adapters = models.teacher.adalora_adapters();
    for (auto* ada : adapters) {
      ada->mask_inactive_grads();
      peft::update_importance(*ada);
    }
    for (auto* p : params) {
      auto& v = p->value.data();
      const auto& gr = p->grad.data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= config.learning_rate * gr[i];
    }
    if (config.adalora_budget > 0 && !adapters.empty() && (step + 1) % config.realloc_every == 0)
      peft::reallocate_budget(adapters, config.adalora_budget);
  }
  return result;
}

std::vector<LabelId> infer_student(const nets::StudentNet& student, const PointCloud& cloud) {
  if (cloud.empty()) throw ContractError("infer_student: empty point cloud");
  nets::StudentNet frozen = student;
  for (auto* p : frozen.parameters()) p->trainable = false;
  ad::Graph g;
  const auto out = nets::student_forward(g, cloud, frozen);
  const Tensor& s = out.final_scores.value();
  std::vector<LabelId> pred(s.rows());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.cols(); ++c)
      if (s(i, c) > s(i, best)) best = c;
    pred[i] = static_cast<LabelId>(best);
  }
  return pred;
}

metrics::ConfusionMatrix evaluate(const nets::StudentNet& student, const std::vector<const Scene*>& scenes) {
  metrics::ConfusionMatrix cm(student.config.classes);
  for (const Scene* s : scenes) cm.update(s->point_semantic, infer_student(student, s->cloud));
  return cm;
}

ComponentParams count_params(const Models& models) {
  ComponentParams out;
  out.student = peft::count_params(models.student.parameters());
  std::vector<const ad::Parameter*> backbone{&models.teacher.embed};
  for (const auto& a : models.teacher.adapters)
    std::visit([&](const auto& ad) { for (const auto* p : ad.parameters()) backbone.push_back(p); }, a);
  out.teacher = peft::count_params(backbone);
  std::vector<const ad::Parameter*> heads;
  for (const auto& d : models.teacher.decoders)
    for (const auto* p : {&d.upscale.weight, &d.upscale.bias, &d.classifier.weight, &d.classifier.bias})
      heads.push_back(p);
  heads.push_back(&models.teacher.final_head.weight);
  heads.push_back(&models.teacher.final_head.bias);
  out.decoders = peft::count_params(heads);
  return out;
}

namespace {

constexpr char kMagic[8] = {'E', 'L', 'I', 'T', 'E', 'C', 'K', '1'};

void put_linear(std::vector<std::uint8_t>& out, const nets::Linear& l) {
  binio::put_tensor(out, l.weight.value);
  binio::put_tensor(out, l.bias.value);
}

nets::Linear get_linear(binio::Reader& in, const std::string& name) {
  Tensor w = binio::get_tensor(in);
  Tensor b = binio::get_tensor(in);
  return {ad::Parameter(name + ".weight", std::move(w)), ad::Parameter(name + ".bias", std::move(b))};
}

}  // namespace

void save_checkpoint(const Models& models, const std::filesystem::path& path) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  const auto& sc = models.student.config;
  binio::put_u32(out, static_cast<std::uint32_t>(sc.stages));
  binio::put_u32(out, static_cast<std::uint32_t>(sc.hidden));
  binio::put_u32(out, static_cast<std::uint32_t>(sc.classes));
  binio::put_f64(out, sc.base_voxel_edge);
  for (const auto& s : models.student.stages) {
    put_linear(out, s.encoder);
    put_linear(out, s.head);
  }
  put_linear(out, models.student.final_head);

  const auto& tc = models.teacher.config;
  binio::put_u32(out, static_cast<std::uint32_t>(tc.grid));
  binio::put_u32(out, static_cast<std::uint32_t>(tc.stages));
  binio::put_u32(out, static_cast<std::uint32_t>(tc.hidden));
  binio::put_u32(out, static_cast<std::uint32_t>(tc.classes));
  binio::put_u32(out, static_cast<std::uint32_t>(tc.rank));
  binio::put_u32(out, tc.adapter == nets::AdapterKind::Lora ? 0u : 1u);
  binio::put_tensor(out, models.teacher.embed.value);
  for (const auto& a : models.teacher.adapters) std::visit([&](const auto& ad) { peft::append_adapter(out, ad); }, a);
  for (const auto& d : models.teacher.decoders) {
    put_linear(out, d.upscale);
    put_linear(out, d.classifier);
  }
  put_linear(out, models.teacher.final_head);
  binio::write_file(path, out);
}

Models load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw FormatError("not a checkpoint: " + path.string());
  const std::vector<std::uint8_t> body(bytes.begin() + 8, bytes.end());
  binio::Reader in(body);
  Models m;
  auto& sc = m.student.config;
  sc.stages = in.u32();
  sc.hidden = in.u32();
  sc.classes = in.u32();
  sc.base_voxel_edge = in.f64();
  for (std::size_t l = 0; l < sc.stages; ++l) {
    const std::string tag = "student.stage" + std::to_string(l + 1);
    nets::Linear enc = get_linear(in, tag + ".encoder");
    nets::Linear head = get_linear(in, tag + ".head");
    m.student.stages.push_back({std::move(enc), std::move(head)});
  }
  m.student.final_head = get_linear(in, "student.final");

  auto& tc = m.teacher.config;
  tc.grid = in.u32();
  tc.stages = in.u32();
  tc.hidden = in.u32();
  tc.classes = in.u32();
  tc.rank = in.u32();
  tc.adapter = in.u32() == 0 ? nets::AdapterKind::Lora : nets::AdapterKind::AdaLora;
  m.teacher.embed = ad::Parameter("teacher.embed", binio::get_tensor(in), false);
  for (std::size_t l = 0; l < tc.stages; ++l) {
    if (tc.adapter == nets::AdapterKind::Lora)
      m.teacher.adapters.emplace_back(peft::read_lora(in));
    else
      m.teacher.adapters.emplace_back(peft::read_adalora(in));
  }
  for (std::size_t l = 0; l < tc.stages; ++l) {
    const std::string tag = "teacher.decoder" + std::to_string(l + 1);
    nets::Linear up = get_linear(in, tag + ".upscale");
    nets::Linear cls = get_linear(in, tag + ".classifier");
    m.teacher.decoders.push_back({std::move(up), std::move(cls)});
  }
  m.teacher.final_head = get_linear(in, "teacher.final");
  if (!in.done()) throw FormatError("trailing bytes in checkpoint: " + path.string());
  return m;
}

}  // namespace elite::distill
