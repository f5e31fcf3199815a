#pragma once

#include <functional>
#include <string>
#include <vector>

#include "distilseg/optim.hpp"
#include "distilseg/reg_losses.hpp"
#include "distilseg/unet.hpp"
#include "distilseg/volume.hpp"

namespace distilseg {

struct FeatureLayer {
  nn::Dims dims;
  std::vector<double> values;
};

// Per-layer features along a network's output path; layers[0] is closest to the head.
struct FeatureStack {
  std::vector<FeatureLayer> layers;
  std::size_t size() const noexcept { return layers.size(); }
};

// Class scores laid out (C, D, H, W).
struct Logits {
  int num_classes = 0;
  Shape3 shape;
  std::vector<double> values;
};

enum class HintMetric { cosine, l2 };
std::string to_string(HintMetric m);
HintMetric hint_metric_from_string(const std::string& s);

// Student data pairing: synthetic image + synthetic label, or real image + synthetic label.
enum class Pairing { si_sl, ri_sl };
std::string to_string(Pairing p);
Pairing pairing_from_string(const std::string& s);

struct DistillConfig {
  double lambda_recon = 1.0;
  double lambda_hint = 1.0;
  int hint_layers = 2;
  HintMetric hint_metric = HintMetric::cosine;
  int epochs = 200;
  double learning_rate = 1e-3;
  int batch_size = 2;
  std::uint64_t seed = 0;
  bool teacher_enabled = true;
  Pairing pairing = Pairing::si_sl;
  UNetConfig net;  // shared by teacher and student apart from the head
  void validate() const;
};

// cosine: sum over the first k layers of (1 - cos) on flattened tensors, in [0, 2k].
// l2: sum over the first k layers of the mean squared difference.
double hint_loss(const FeatureStack& student, const FeatureStack& teacher, int k, HintMetric metric);

struct HintGrad {
  double value = 0.0;
  std::vector<std::vector<double>> d_student;  // k entries
  std::vector<std::vector<double>> d_teacher;
};
HintGrad hint_loss_grad(const FeatureStack& student, const FeatureStack& teacher, int k, HintMetric metric);

// Mean squared difference over voxels.
double recon_loss(const Volume& real, const Volume& recon);
LossGrad recon_loss_grad(const Volume& real, const Volume& recon);  // gradient w.r.t. recon

// Mean voxelwise cross-entropy of softmax(logits) against integer labels.
double seg_ce_loss(const LabelMap& labels, const Logits& logits);
LossGrad seg_ce_loss_grad(const LabelMap& labels, const Logits& logits);  // gradient w.r.t. logits

struct KdBreakdown {
  double total = 0.0;
  double seg = 0.0;
  double recon = 0.0;
  double hint = 0.0;          // unweighted
  double weighted_recon = 0.0;
  double weighted_hint = 0.0;
};

struct KdInputs {
  const LabelMap* labels = nullptr;
  const Logits* logits = nullptr;
  const Volume* real = nullptr;   // may be null when lambda_recon == 0
  const Volume* recon = nullptr;
  const FeatureStack* student_features = nullptr;  // may be null when lambda_hint == 0
  const FeatureStack* teacher_features = nullptr;
};

// seg + lambda_recon * recon + lambda_hint * hint.
KdBreakdown kd_loss(const KdInputs& in, const DistillConfig& cfg);

struct KdGrad {
  KdBreakdown breakdown;
  std::vector<double> d_logits;
  std::vector<double> d_recon;
  std::vector<std::vector<double>> d_student_features;
  std::vector<std::vector<double>> d_teacher_features;
};
KdGrad kd_loss_grad(const KdInputs& in, const DistillConfig& cfg);

struct TeacherOutput {
  Volume reconstruction;
  FeatureStack features;
};
struct StudentOutput {
  Logits logits;
  FeatureStack features;
};

TeacherOutput teacher_forward(const Volume& real, const UNet& teacher);
StudentOutput student_forward(const Volume& synth, const UNet& student);

struct DistillEpochLoss {
  double total = 0.0;
  double seg = 0.0;
  double recon = 0.0;
  double hint = 0.0;
};

struct DistillResult {
  std::vector<DistillEpochLoss> history;
  // Number of student inputs taken from real volumes; zero under synthetic pairing.
  std::size_t student_real_inputs = 0;
};

using DistillEpochCallback = std::function<void(int epoch, const DistillEpochLoss&)>;

// Trains teacher (reconstruction of y^i) and student (segmentation of the pair registered
// to y^i) jointly on the distillation objective, one Adam step each per batch. Hint
// gradients reach both networks. With teacher_enabled false the teacher is untouched and
// only the segmentation term is optimized.
DistillResult train_distillation(const std::vector<SyntheticPair>& pairs, const std::vector<Volume>& reals,
                                 UNet& teacher, UNet& student, const DistillConfig& cfg,
                                 const DistillEpochCallback& on_epoch = {});

// Argmax over the student's class logits; lowest class id wins ties.
LabelMap infer_student(const Volume& img, const UNet& student);

}  // namespace distilseg
