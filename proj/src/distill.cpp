#include "distilseg/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "distilseg/error.hpp"
#include "distilseg/reg_net.hpp"

namespace distilseg {

std::string to_string(HintMetric m) { return m == HintMetric::cosine ? "cosine" : "l2"; }

HintMetric hint_metric_from_string(const std::string& s) {
  if (s == "cosine") return HintMetric::cosine;
  if (s == "l2") return HintMetric::l2;
  throw ConfigError("unknown hint metric '" + s + "' (expected cosine or l2)");
}

std::string to_string(Pairing p) { return p == Pairing::si_sl ? "si+sl" : "ri+sl"; }

Pairing pairing_from_string(const std::string& s) {
  if (s == "si+sl" || s == "si_sl") return Pairing::si_sl;
  if (s == "ri+sl" || s == "ri_sl") return Pairing::ri_sl;
  throw ConfigError("unknown pairing '" + s + "' (expected si+sl or ri+sl)");
}

void DistillConfig::validate() const {
  if (!(lambda_recon >= 0) || !(lambda_hint >= 0)) throw ConfigError("distillation weights must be >= 0");
  net.validate();
  if (hint_layers < 1 || hint_layers > net.feature_depth()) {
    throw ConfigError("hint_layers must be in [1, " + std::to_string(net.feature_depth()) + "]");
  }
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!teacher_enabled && (lambda_recon > 0 || lambda_hint > 0)) {
    throw ConfigError("lambda_recon and lambda_hint must be 0 when the teacher is disabled");
  }
}

namespace {

void check_stacks(const FeatureStack& s, const FeatureStack& t, int k) {
  if (k < 1) throw ValidationError("hint_loss: k must be >= 1");
  if (s.size() < static_cast<std::size_t>(k) || t.size() < static_cast<std::size_t>(k)) {
    throw ValidationError("hint_loss: feature stacks have fewer than k layers");
  }
  for (int i = 0; i < k; ++i) {
    const auto& a = s.layers[static_cast<std::size_t>(i)];
    const auto& b = t.layers[static_cast<std::size_t>(i)];
    if (a.dims != b.dims || a.values.size() != b.values.size()) {
      throw DimensionError("hint_loss: layer " + std::to_string(i) + " shapes differ: " + nn::dims_str(a.dims) +
                           " vs " + nn::dims_str(b.dims));
    }
  }
}

}  // namespace

HintGrad hint_loss_grad(const FeatureStack& student, const FeatureStack& teacher, int k, HintMetric metric) {
  check_stacks(student, teacher, k);
  HintGrad out;
  for (int i = 0; i < k; ++i) {
    const auto& a = student.layers[static_cast<std::size_t>(i)].values;
    const auto& b = teacher.layers[static_cast<std::size_t>(i)].values;
    std::vector<double> da(a.size()), db(b.size());
    if (metric == HintMetric::cosine) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t j = 0; j < a.size(); ++j) {
        ab += a[j] * b[j];
        aa += a[j] * a[j];
        bb += b[j] * b[j];
      }
      if (aa == 0 || bb == 0) throw DegenerateInputError("hint_loss: zero-norm feature layer " + std::to_string(i));
      const double na = std::sqrt(aa), nb = std::sqrt(bb);
      const double c = ab / (na * nb);
      out.value += 1.0 - c;
      for (std::size_t j = 0; j < a.size(); ++j) {
        da[j] = -(b[j] / (na * nb) - c * a[j] / aa);
        db[j] = -(a[j] / (na * nb) - c * b[j] / bb);
      }
    } else {
      const double n = static_cast<double>(a.size());
      double s = 0;
      for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - b[j];
        s += d * d;
        da[j] = 2 * d / n;
        db[j] = -2 * d / n;
      }
      out.value += s / n;
    }
    out.d_student.push_back(std::move(da));
    out.d_teacher.push_back(std::move(db));
  }
  return out;
}

double hint_loss(const FeatureStack& student, const FeatureStack& teacher, int k, HintMetric metric) {
  return hint_loss_grad(student, teacher, k, metric).value;
}

LossGrad recon_loss_grad(const Volume& real, const Volume& recon) {
  require_same_shape(real.shape(), recon.shape(), "recon_loss");
  const auto a = real.data();
  const auto b = recon.data();
  const double n = static_cast<double>(a.size());
  LossGrad out;
  out.grad.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = b[i] - a[i];
    out.value += d * d;
    out.grad[i] = 2 * d / n;
  }
  out.value /= n;
  return out;
}

double recon_loss(const Volume& real, const Volume& recon) { return recon_loss_grad(real, recon).value; }

LossGrad seg_ce_loss_grad(const LabelMap& labels, const Logits& logits) {
  require_same_shape(labels.shape(), logits.shape, "seg_ce_loss");
  const int C = logits.num_classes;
  const auto n = static_cast<std::size_t>(labels.voxels());
  if (C < 2 || logits.values.size() != n * static_cast<std::size_t>(C)) {
    throw DimensionError("seg_ce_loss: logits must be (C, D, H, W) with C >= 2");
  }
  const auto lab = labels.data();
  LossGrad out;
  out.grad.assign(logits.values.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t p = 0; p < n; ++p) {
    if (lab[p] < 0 || lab[p] >= C) {
      throw ValidationError("seg_ce_loss: label " + std::to_string(lab[p]) + " outside [0, " + std::to_string(C - 1) + "]");
    }
    double mx = -INFINITY;
    for (int c = 0; c < C; ++c) mx = std::max(mx, logits.values[static_cast<std::size_t>(c) * n + p]);
    double z = 0;
    for (int c = 0; c < C; ++c) z += std::exp(logits.values[static_cast<std::size_t>(c) * n + p] - mx);
    const double lse = mx + std::log(z);
    out.value += lse - logits.values[static_cast<std::size_t>(lab[p]) * n + p];
    for (int c = 0; c < C; ++c) {
      const auto k = static_cast<std::size_t>(c) * n + p;
      out.grad[k] = (std::exp(logits.values[k] - lse) - (c == lab[p] ? 1.0 : 0.0)) * inv;
    }
  }
  out.value *= inv;
  return out;
}

double seg_ce_loss(const LabelMap& labels, const Logits& logits) { return seg_ce_loss_grad(labels, logits).value; }

KdGrad kd_loss_grad(const KdInputs& in, const DistillConfig& cfg) {
  if (!in.labels || !in.logits) throw ValidationError("kd_loss: labels and logits are required");
  KdGrad out;
  auto seg = seg_ce_loss_grad(*in.labels, *in.logits);
  out.breakdown.seg = seg.value;
  out.d_logits = std::move(seg.grad);
  if (cfg.lambda_recon > 0) {
    if (!in.real || !in.recon) throw ValidationError("kd_loss: reconstruction term needs real and recon volumes");
    auto rec = recon_loss_grad(*in.real, *in.recon);
    out.breakdown.recon = rec.value;
    out.d_recon = std::move(rec.grad);
    for (auto& g : out.d_recon) g *= cfg.lambda_recon;
  }
  if (cfg.lambda_hint > 0) {
    if (!in.student_features || !in.teacher_features) throw ValidationError("kd_loss: hint term needs both feature stacks");
    auto h = hint_loss_grad(*in.student_features, *in.teacher_features, cfg.hint_layers, cfg.hint_metric);
    out.breakdown.hint = h.value;
    for (auto& v : h.d_student)
      for (auto& g : v) g *= cfg.lambda_hint;
    for (auto& v : h.d_teacher)
      for (auto& g : v) g *= cfg.lambda_hint;
    out.d_student_features = std::move(h.d_student);
    out.d_teacher_features = std::move(h.d_teacher);
  }
  out.breakdown.weighted_recon = cfg.lambda_recon * out.breakdown.recon;
  out.breakdown.weighted_hint = cfg.lambda_hint * out.breakdown.hint;
  out.breakdown.total = out.breakdown.seg + out.breakdown.weighted_recon + out.breakdown.weighted_hint;
  return out;
}

KdBreakdown kd_loss(const KdInputs& in, const DistillConfig& cfg) { return kd_loss_grad(in, cfg).breakdown; }

namespace {

void check_unet_input(const Volume& v, const UNet& net, const char* what) {
  const std::int64_t f = std::int64_t{1} << net.config().num_stages;
  if (!v.shape().divisible_by(f)) {
    throw DimensionError(std::string(what) + ": shape " + v.shape().str() + " is not divisible by " + std::to_string(f));
  }
}

FeatureStack stack_of(const nn::Graph& g, const std::vector<nn::Var>& vars) {
  FeatureStack s;
  for (auto v : vars) {
    const auto& t = g.value(v);
    s.layers.push_back({t.dims, std::vector<double>(t.data.begin(), t.data.end())});
  }
  return s;
}

Logits logits_of(const nn::Graph& g, nn::Var v, const Shape3& shape) {
  const auto& t = g.value(v);
  return Logits{static_cast<int>(t.dims[0]), shape, std::vector<double>(t.data.begin(), t.data.end())};
}

}  // namespace

TeacherOutput teacher_forward(const Volume& real, const UNet& teacher) {
  check_unet_input(real, teacher, "teacher_forward");
  nn::Graph g;
  // No backward pass runs on this graph, so parameters are never written.
  const auto v = const_cast<UNet&>(teacher).forward(g, g.constant(volume_tensor(real)));
  const auto& r = g.value(v.output).data;
  return TeacherOutput{Volume(real.shape(), std::vector<double>(r.begin(), r.end()), real.spacing()),
                       stack_of(g, v.features)};
}

StudentOutput student_forward(const Volume& synth, const UNet& student) {
  check_unet_input(synth, student, "student_forward");
  nn::Graph g;
  const auto v = const_cast<UNet&>(student).forward(g, g.constant(volume_tensor(synth)));
  return StudentOutput{logits_of(g, v.output, synth.shape()), stack_of(g, v.features)};
}

LabelMap infer_student(const Volume& img, const UNet& student) {
  const auto out = student_forward(img, student);
  const int C = out.logits.num_classes;
  const auto n = static_cast<std::size_t>(img.voxels());
  std::vector<std::int32_t> lab(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    double best = out.logits.values[p];
    for (int c = 1; c < C; ++c) {
      const double v = out.logits.values[static_cast<std::size_t>(c) * n + p];
      if (v > best) {
        best = v;
        lab[p] = c;
      }
    }
  }
  return LabelMap(img.shape(), std::move(lab), C, img.spacing());
}

DistillResult train_distillation(const std::vector<SyntheticPair>& pairs, const std::vector<Volume>& reals,
                                 UNet& teacher, UNet& student, const DistillConfig& cfg,
                                 const DistillEpochCallback& on_epoch) {
  cfg.validate();
  if (pairs.empty()) throw ValidationError("train_distillation: empty dataset");
  if (student.config().head != HeadKind::seg) throw ConfigError("student must have a seg head");
  if (teacher.config().head != HeadKind::rec) throw ConfigError("teacher must have a rec head");
  for (const auto& p : pairs) {
    if (p.source_id >= reals.size()) {
      throw ValidationError("train_distillation: source_id " + std::to_string(p.source_id) + " has no real volume");
    }
    require_same_shape(p.image.shape(), reals[p.source_id].shape(), "train_distillation");
    check_unet_input(p.image, student, "train_distillation");
    if (p.labels.num_classes() > student.config().num_classes) {
      throw ConfigError("train_distillation: labels have more classes than the student head");
    }
  }
  const bool use_teacher = cfg.teacher_enabled;
  const bool need_teacher_graph = use_teacher && (cfg.lambda_recon > 0 || cfg.lambda_hint > 0);
  const auto k = static_cast<std::size_t>(cfg.hint_layers);

  std::vector<nn::Tensor> student_in, teacher_in;
  DistillResult result;
  for (const auto& p : pairs) {
    if (cfg.pairing == Pairing::si_sl) {
      student_in.push_back(volume_tensor(p.image));
    } else {
      student_in.push_back(volume_tensor(reals[p.source_id]));
      ++result.student_real_inputs;
    }
    teacher_in.push_back(volume_tensor(reals[p.source_id]));
  }

  nn::Adam opt_s(student.params(), nn::AdamConfig{cfg.learning_rate});
  nn::Adam opt_t(teacher.params(), nn::AdamConfig{cfg.learning_rate});
  student.params().zero_grad();
  teacher.params().zero_grad();
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pairs.size());
  const auto B = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    DistillEpochLoss acc;
    for (std::size_t s = 0; s < order.size(); s += B) {
      const std::size_t e = std::min(order.size(), s + B);
      const double inv_b = 1.0 / static_cast<double>(e - s);
      nn::Graph g;
      std::vector<nn::Var> terms;
      for (std::size_t q = s; q < e; ++q) {
        const auto& pair = pairs[order[q]];
        const Volume& real = reals[pair.source_id];
        const auto sv = student.forward(g, g.constant(student_in[order[q]]));
        const Logits logits = logits_of(g, sv.output, pair.image.shape());
        KdInputs in;
        in.labels = &pair.labels;
        in.logits = &logits;
        std::vector<nn::Var> inputs = {sv.output};
        Volume recon;
        FeatureStack fs, ft;
        UNet::Vars tv;
        if (need_teacher_graph) {
          tv = teacher.forward(g, g.constant(teacher_in[order[q]]));
          const auto& r = g.value(tv.output).data;
          recon = Volume(real.shape(), std::vector<double>(r.begin(), r.end()), real.spacing());
          in.real = &real;
          in.recon = &recon;
          fs = stack_of(g, std::vector<nn::Var>(sv.features.begin(), sv.features.begin() + static_cast<std::ptrdiff_t>(k)));
          ft = stack_of(g, std::vector<nn::Var>(tv.features.begin(), tv.features.begin() + static_cast<std::ptrdiff_t>(k)));
          in.student_features = &fs;
          in.teacher_features = &ft;
        }
        KdGrad kg = kd_loss_grad(in, cfg);
        std::vector<std::vector<double>> grads = {std::move(kg.d_logits)};
        if (!kg.d_recon.empty()) {
          inputs.push_back(tv.output);
          grads.push_back(std::move(kg.d_recon));
        }
        for (std::size_t i = 0; i < kg.d_student_features.size(); ++i) {
          inputs.push_back(sv.features[i]);
          grads.push_back(std::move(kg.d_student_features[i]));
          inputs.push_back(tv.features[i]);
          grads.push_back(std::move(kg.d_teacher_features[i]));
        }
        terms.push_back(g.external_loss(inputs, kg.breakdown.total, std::move(grads)));
        acc.total += kg.breakdown.total;
        acc.seg += kg.breakdown.seg;
        acc.recon += kg.breakdown.recon;
        acc.hint += kg.breakdown.hint;
      }
      g.backward(g.weighted_sum(terms, std::vector<double>(terms.size(), inv_b)));
      opt_s.step();
      if (need_teacher_graph) opt_t.step();
    }
    const double n = static_cast<double>(pairs.size());
    acc.total /= n;
    acc.seg /= n;
    acc.recon /= n;
    acc.hint /= n;
    result.history.push_back(acc);
    if (on_epoch) on_epoch(epoch, acc);
  }
  return result;
}

}  // namespace distilseg
