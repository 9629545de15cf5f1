// SPDX-License-Identifier: Apache-2.0
#include "elite/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "elite/errors.hpp"

namespace elite::nets {

namespace {

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w(in, out);
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  return w;
}

void append(std::vector<ad::Parameter*>& out, Linear& l) {
  out.push_back(&l.weight);
  out.push_back(&l.bias);
}

void append(std::vector<const ad::Parameter*>& out, const Linear& l) {
  out.push_back(&l.weight);
  out.push_back(&l.bias);
}

}  // namespace

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, const std::string& name) {
  return {ad::Parameter(name + ".weight", glorot(in, out, rng)), ad::Parameter(name + ".bias", Tensor(1, out))};
}

ad::Var Linear::forward(ad::Graph& g, ad::Var x) {
  return ad::add_bias(ad::matmul(x, g.param(weight)), g.param(bias));
}

StudentNet StudentNet::create(const StudentConfig& config, Rng& rng) {
  if (config.stages == 0) throw ContractError("student needs at least one stage");
  StudentNet net;
  net.config = config;
  std::size_t in = 4;
  for (std::size_t l = 0; l < config.stages; ++l) {
    const std::string tag = "student.stage" + std::to_string(l + 1);
    net.stages.push_back({Linear::create(in, config.hidden, rng, tag + ".encoder"),
                          Linear::create(config.hidden, config.classes, rng, tag + ".head")});
    in = config.hidden;
  }
  net.final_head = Linear::create(config.hidden * config.stages, config.classes, rng, "student.final");
  return net;
}

std::vector<ad::Parameter*> StudentNet::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& s : stages) {
    append(out, s.encoder);
    append(out, s.head);
  }
  append(out, final_head);
  return out;
}

std::vector<const ad::Parameter*> StudentNet::parameters() const {
  std::vector<const ad::Parameter*> out;
  for (const auto& s : stages) {
    append(out, s.encoder);
    append(out, s.head);
  }
  append(out, final_head);
  return out;
}

Tensor student_input(const PointCloud& cloud) {
  const double n = static_cast<double>(cloud.size());
  double mx = 0.0, my = 0.0, mz = 0.0;
  for (const Point& p : cloud) {
    mx += p.x;
    my += p.y;
    mz += p.z;
  }
  mx /= n;
  my /= n;
  mz /= n;
  double extent = 0.0;
  for (const Point& p : cloud)
    extent = std::max({extent, std::abs(p.x - mx), std::abs(p.y - my), std::abs(p.z - mz)});
  if (extent == 0.0) extent = 1.0;
  Tensor x(cloud.size(), 4);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    x(i, 0) = (cloud[i].x - mx) / extent;
    x(i, 1) = (cloud[i].y - my) / extent;
    x(i, 2) = (cloud[i].z - mz) / extent;
    x(i, 3) = cloud[i].intensity;
  }
  return x;
}

StudentOutputs student_forward(ad::Graph& g, const PointCloud& cloud, StudentNet& net) {
  if (cloud.empty()) throw ContractError("student_forward: empty point cloud");
  StudentOutputs out;
  ad::Var x = g.leaf(student_input(cloud));
  std::vector<ad::Var> features;
  for (std::size_t l = 0; l < net.stages.size(); ++l) {
    const VoxelPartition part = voxelize(cloud, stage_voxel_edge(net.config.base_voxel_edge, l + 1));
    ad::Var pooled = ad::group_mean_rows(x, part.assignment, part.voxel_count);
    ad::Var hidden = ad::relu(net.stages[l].encoder.forward(g, pooled));
    ad::Var f = ad::gather_rows(hidden, part.assignment);
    ad::Var s = ad::softmax_rows(net.stages[l].head.forward(g, f));
    out.stages.push_back({f, s});
    features.push_back(f);
    x = f;
  }
  out.final_scores = ad::softmax_rows(net.final_head.forward(g, ad::concat_cols(features)));
  return out;
}

TeacherNet TeacherNet::create(const TeacherConfig& config, Rng& rng) {
  if (config.stages == 0 || config.grid == 0) throw ContractError("teacher needs stages and a grid");
  if (config.hidden < 2) throw ContractError("teacher hidden width too small");
  TeacherNet net;
  net.config = config;
  net.embed = ad::Parameter("teacher.embed", glorot(kPatchInput, config.hidden, rng), false);
  for (std::size_t l = 0; l < config.stages; ++l) {
    // The base is stored d1 x d2 (out x in) for the x * W0^T convention.
    Tensor w0 = glorot(config.hidden, config.hidden, rng);
    if (config.adapter == AdapterKind::Lora)
      net.adapters.emplace_back(peft::LoraAdapter::create(std::move(w0), config.rank, rng));
    else
      net.adapters.emplace_back(peft::AdaLoraAdapter::create(std::move(w0), config.rank, rng));
  }
  const std::size_t half = config.hidden / 2;
  for (std::size_t l = 0; l < config.stages; ++l) {
    const std::string tag = "teacher.decoder" + std::to_string(l + 1);
    net.decoders.push_back({Linear::create(config.hidden, half, rng, tag + ".upscale"),
                            Linear::create(half, config.classes, rng, tag + ".classifier")});
  }
  net.final_head = Linear::create(config.hidden * config.stages, config.classes, rng, "teacher.final");
  return net;
}

std::vector<ad::Parameter*> TeacherNet::parameters() {
  std::vector<ad::Parameter*> out{&embed};
  for (auto& a : adapters) std::visit([&](auto& ad) { for (auto* p : ad.parameters()) out.push_back(p); }, a);
  for (auto& d : decoders) {
    append(out, d.upscale);
    append(out, d.classifier);
  }
  append(out, final_head);
  return out;
}

std::vector<const ad::Parameter*> TeacherNet::parameters() const {
  std::vector<const ad::Parameter*> out{&embed};
  for (const auto& a : adapters)
    std::visit([&](const auto& ad) { for (const auto* p : ad.parameters()) out.push_back(p); }, a);
  for (const auto& d : decoders) {
    append(out, d.upscale);
    append(out, d.classifier);
  }
  append(out, final_head);
  return out;
}

std::vector<peft::AdaLoraAdapter*> TeacherNet::adalora_adapters() {
  std::vector<peft::AdaLoraAdapter*> out;
  for (auto& a : adapters)
    if (auto* ada = std::get_if<peft::AdaLoraAdapter>(&a)) out.push_back(ada);
  return out;
}

Tensor patch_input(const RgbImage& image, std::size_t grid) {
  if (image.width % static_cast<int>(grid) != 0 || image.height % static_cast<int>(grid) != 0)
    throw ContractError("teacher: image size must be divisible by the patch grid");
  const int cw = image.width / static_cast<int>(grid);
  const int ch = image.height / static_cast<int>(grid);
  Tensor x(grid * grid, kPatchInput);
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      double rgb[3] = {0.0, 0.0, 0.0};
      for (int v = 0; v < ch; ++v)
        for (int u = 0; u < cw; ++u) {
          const std::uint8_t* p = image.at(static_cast<int>(gx) * cw + u, static_cast<int>(gy) * ch + v);
          for (int k = 0; k < 3; ++k) rgb[k] += p[k];
        }
      const std::size_t row = gy * grid + gx;
      const double n = static_cast<double>(cw) * ch * 255.0;
      for (int k = 0; k < 3; ++k) x(row, static_cast<std::size_t>(k)) = rgb[k] / n;
      x(row, 3) = (static_cast<double>(gx) + 0.5) / static_cast<double>(grid);
      x(row, 4) = (static_cast<double>(gy) + 0.5) / static_cast<double>(grid);
    }
  }
  return x;
}

std::vector<StageOutputs> teacher_forward(ad::Graph& g, const RgbImage& image, TeacherNet& net) {
  ++net.forward_calls;
  ad::Var x = ad::matmul(g.leaf(patch_input(image, net.config.grid)), g.param(net.embed));
  std::vector<StageOutputs> out;
  for (auto& adapter : net.adapters) {
    ad::Var pre = std::visit(
        [&](auto& a) {
          if constexpr (std::is_same_v<std::decay_t<decltype(a)>, peft::LoraAdapter>)
            return peft::lora_forward(g, x, a);
          else
            return peft::adalora_forward(g, x, a);
        },
        adapter);
    x = ad::relu(pre);
    out.push_back({x, ad::Var{}});
  }
  return out;
}

std::size_t patch_of_pixel(int u, int v, int width, int height, std::size_t grid) {
  const auto gx = static_cast<std::size_t>(static_cast<long>(u) * static_cast<long>(grid) / width);
  const auto gy = static_cast<std::size_t>(static_cast<long>(v) * static_cast<long>(grid) / height);
  return gy * grid + gx;
}

namespace {

std::vector<std::size_t> patch_indices(std::span<const PixelCoord> pixels, int width, int height, std::size_t grid) {
  std::vector<std::size_t> idx;
  idx.reserve(pixels.size());
  for (const PixelCoord& p : pixels) {
    if (p.row < 0 || p.col < 0 || p.row >= height || p.col >= width)
      throw IndexError("patch_decode: pixel outside the image");
    idx.push_back(patch_of_pixel(p.col, p.row, width, height, grid));
  }
  return idx;
}

}  // namespace

ad::Var patch_decode(ad::Graph& g, ad::Var features, PatchDecoder& decoder, int width, int height,
                     std::size_t grid, std::span<const PixelCoord> pixels, const TeacherNet* counter) {
  if (counter != nullptr) ++counter->decode_calls;
  ad::Var up = decoder.upscale.forward(g, features);
  // Nearest-neighbor interpolation replicates each patch row over its cell,
  // and the classifier and softmax act row-wise, so scoring patches and then
  // gathering equals scoring every interpolated pixel.
  ad::Var patch_scores = ad::softmax_rows(decoder.classifier.forward(g, up));
  return ad::gather_rows(patch_scores, patch_indices(pixels, width, height, grid));
}

ad::Var teacher_final_decode(ad::Graph& g, std::span<const StageOutputs> stages, TeacherNet& net, int width,
                             int height, std::span<const PixelCoord> pixels) {
  ++net.decode_calls;
  std::vector<ad::Var> feats;
  for (const auto& s : stages) feats.push_back(s.features);
  ad::Var cat = ad::concat_cols(feats);
  ad::Var patch_scores = ad::softmax_rows(net.final_head.forward(g, cat));
  return ad::gather_rows(patch_scores, patch_indices(pixels, width, height, net.config.grid));
}

namespace {

void check_labels(const Tensor& scores, std::span<const LabelId> labels) {
  if (scores.rows() != labels.size()) throw DimensionError("loss: one label per score row required");
  for (LabelId y : labels)
    if (y != kIgnoreLabel && y >= scores.cols()) throw IndexError("loss: label outside class range");
}

}  // namespace

LossResult loss_wce(ad::Var scores, std::span<const LabelId> labels, std::span<const double> class_weights) {
  const Tensor& p = scores.value();
  check_labels(p, labels);
  if (class_weights.size() != p.cols()) throw DimensionError("loss_wce: one weight per class required");
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kIgnoreLabel) valid.push_back(i);
  ad::Graph& g = *scores.graph;
  if (valid.empty()) return {g.leaf(Tensor(1, 1)), true};
  const double inv = 1.0 / static_cast<double>(valid.size());
  double total = 0.0;
  for (std::size_t i : valid) total -= class_weights[labels[i]] * std::log(std::max(p(i, labels[i]), kLogClamp));
  std::vector<LabelId> lab(labels.begin(), labels.end());
  std::vector<double> w(class_weights.begin(), class_weights.end());
  ad::Var out = g.record(Tensor(1, 1, total * inv), ad::Op::Custom, {scores.id},
                         [src = scores.id, valid, lab = std::move(lab), w = std::move(w), inv](ad::Graph& gr,
                                                                                                std::size_t self) {
                           const double gs = gr.node(self).grad(0, 0);
                           const Tensor& pv = gr.node(src).value;
                           Tensor& pg = gr.node(src).grad;
                           for (std::size_t i : valid) {
                             const double pi = pv(i, lab[i]);
                             if (pi > kLogClamp) pg(i, lab[i]) -= gs * inv * w[lab[i]] / pi;
                           }
                         });
  return {out, false};
}

std::vector<double> lovasz_grad(const std::vector<bool>& sorted_truth) {
  const std::size_t n = sorted_truth.size();
  std::vector<double> grad(n);
  const double gts = static_cast<double>(std::count(sorted_truth.begin(), sorted_truth.end(), true));
  double cum_fg = 0.0;
  double cum_bg = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    (sorted_truth[i] ? cum_fg : cum_bg) += 1.0;
    const double inter = gts - cum_fg;
    const double uni = gts + cum_bg;
    const double jaccard = 1.0 - inter / uni;
    grad[i] = jaccard - prev;
    prev = jaccard;
  }
  return grad;
}

LossResult loss_lovasz(ad::Var scores, std::span<const LabelId> labels) {
  const Tensor& p = scores.value();
  check_labels(p, labels);
  std::vector<std::size_t> valid;
  std::set<LabelId> present;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    valid.push_back(i);
    present.insert(labels[i]);
  }
  ad::Graph& g = *scores.graph;
  if (valid.empty()) return {g.leaf(Tensor(1, 1)), true};

  // Per present class: the sorted row order, the extension weights, and the
  // sign of dm/dp for each sorted entry.
  struct ClassTerm {
    LabelId cls;
    std::vector<std::size_t> rows;
    std::vector<double> weights;
    std::vector<double> signs;
  };
  std::vector<ClassTerm> terms;
  double total = 0.0;
  for (LabelId c : present) {
    std::vector<double> err(valid.size());
    for (std::size_t k = 0; k < valid.size(); ++k) {
      const std::size_t i = valid[k];
      err[k] = labels[i] == c ? 1.0 - p(i, c) : p(i, c);
    }
    std::vector<std::size_t> order(valid.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
    std::vector<bool> fg_sorted(order.size());
    for (std::size_t k = 0; k < order.size(); ++k) fg_sorted[k] = labels[valid[order[k]]] == c;
    const std::vector<double> wts = lovasz_grad(fg_sorted);
    ClassTerm term{c, {}, wts, {}};
    double loss_c = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      loss_c += err[order[k]] * wts[k];
      term.rows.push_back(valid[order[k]]);
      term.signs.push_back(fg_sorted[k] ? -1.0 : 1.0);
    }
    total += loss_c;
    terms.push_back(std::move(term));
  }
  const double inv = 1.0 / static_cast<double>(present.size());
  ad::Var out = g.record(Tensor(1, 1, total * inv), ad::Op::Custom, {scores.id},
                         [src = scores.id, terms = std::move(terms), inv](ad::Graph& gr, std::size_t self) {
                           const double gs = gr.node(self).grad(0, 0) * inv;
                           Tensor& pg = gr.node(src).grad;
                           for (const auto& t : terms)
                             for (std::size_t k = 0; k < t.rows.size(); ++k)
                               pg(t.rows[k], t.cls) += gs * t.weights[k] * t.signs[k];
                         });
  return {out, false};
}

LossResult loss_kl(const Tensor& teacher, ad::Var student) {
  const Tensor& s = student.value();
  if (teacher.rows() != s.rows()) throw ContractError("loss_kl: teacher and student row counts differ");
  if (teacher.cols() != s.cols()) throw DimensionError("loss_kl: class counts differ");
  ad::Graph& g = *student.graph;
  if (s.rows() == 0) return {g.leaf(Tensor(1, 1)), true};
  const double inv = 1.0 / static_cast<double>(s.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t c = 0; c < s.cols(); ++c) {
      const double t = teacher(i, c);
      if (t <= 0.0) continue;
      total += t * (std::log(std::max(t, kLogClamp)) - std::log(std::max(s(i, c), kLogClamp)));
    }
  ad::Var out = g.record(Tensor(1, 1, total * inv), ad::Op::Custom, {student.id},
                         [src = student.id, teacher, inv](ad::Graph& gr, std::size_t self) {
                           const double gs = gr.node(self).grad(0, 0) * inv;
                           const Tensor& sv = gr.node(src).value;
                           Tensor& pg = gr.node(src).grad;
                           for (std::size_t i = 0; i < sv.rows(); ++i)
                             for (std::size_t c = 0; c < sv.cols(); ++c) {
                               const double t = teacher(i, c);
                               if (t > 0.0 && sv(i, c) > kLogClamp) pg(i, c) -= gs * t / sv(i, c);
                             }
                         });
  return {out, false};
}

std::vector<double> class_weights_from_counts(std::span<const std::size_t> counts) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  std::vector<double> w(counts.size(), 1.0);
  if (counts.empty() || total == 0.0) return w;
  for (std::size_t c = 0; c < counts.size(); ++c) w[c] = 1.0 / std::sqrt(static_cast<double>(counts[c]) / total + 1.0);
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  for (double& x : w) x /= mean;
  return w;
}

}  // namespace elite::nets
