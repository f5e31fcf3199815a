#pragma once

#include <span>
#include <string>
#include <vector>

#include "distilseg/volume.hpp"

namespace distilseg {

enum class SimKind { local_cc, mutual_information };
enum class SmoothKind { diffusion, bending };

std::string to_string(SimKind k);
std::string to_string(SmoothKind k);
SimKind sim_kind_from_string(const std::string& s);
SmoothKind smooth_kind_from_string(const std::string& s);

struct RegLossConfig {
  SimKind sim_kind = SimKind::local_cc;
  SmoothKind smooth_kind = SmoothKind::diffusion;
  double alpha = 1.0;
  double beta = 0.01;
  int cc_window = 9;
  int mi_bins = 32;
  double mi_sigma = 0.02;  // Parzen bandwidth, normalized-intensity units
  double tau = 0.1;
  double epsilon = 1e-5;

  void validate() const;
};

// Non-zero, finite feature vector used by the contrastive term.
class Embedding {
 public:
  explicit Embedding(std::vector<double> v);
  std::span<const double> vector() const noexcept { return v_; }
  std::size_t dim() const noexcept { return v_.size(); }

 private:
  std::vector<double> v_;
};

// Loss value plus gradient with respect to one input, laid out like that input.
struct LossGrad {
  double value = 0.0;
  std::vector<double> grad;
};

// Negative mean over voxels of the squared local correlation inside an n^3 window.
// Windows are truncated at the volume border; value in [-1, 0].
double local_cc_loss(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg);
LossGrad local_cc_loss_grad(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg);

// Negative mutual information from a Gaussian Parzen joint histogram. Intensities must lie in [0, 1].
double mi_loss(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg);
LossGrad mi_loss_grad(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg);

// Mean over voxels of sum ||forward difference||^2; the difference past the last slice is zero.
double diffusion_reg(const DisplacementField& field);
LossGrad diffusion_reg_grad(const DisplacementField& field);

// Mean over voxels of squared second differences (cross terms weighted 2). Stencils that
// leave the grid contribute nothing, so affine fields score exactly zero.
double bending_energy_reg(const DisplacementField& field);
LossGrad bending_energy_reg_grad(const DisplacementField& field);

struct ContrastiveGrad {
  double value = 0.0;
  std::vector<double> d_anchor;
  std::vector<double> d_positive;
  std::vector<std::vector<double>> d_negatives;
};

// InfoNCE over cosine similarities at temperature tau; the positive sits in the denominator.
double contrastive_loss(const Embedding& anchor, const Embedding& positive, const std::vector<Embedding>& negatives,
                        const RegLossConfig& cfg);
ContrastiveGrad contrastive_loss_grad(const Embedding& anchor, const Embedding& positive,
                                      const std::vector<Embedding>& negatives, const RegLossConfig& cfg);

struct RegLossBreakdown {
  double total = 0.0;
  double sim = 0.0;
  double smooth = 0.0;
  double contrast = 0.0;
};

// L_sim + alpha * L_smooth + beta * L_contrast with the configured kinds.
RegLossBreakdown combined_reg_loss(const Volume& fixed, const Volume& warped, const DisplacementField& field,
                                   const Embedding& anchor, const Embedding& positive,
                                   const std::vector<Embedding>& negatives, const RegLossConfig& cfg);

double similarity_loss(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg);
LossGrad similarity_loss_grad(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg);
double smoothness_loss(const DisplacementField& field, const RegLossConfig& cfg);
LossGrad smoothness_loss_grad(const DisplacementField& field, const RegLossConfig& cfg);

namespace detail {

// Sum over the truncated (2r+1)^3 window around every voxel.
std::vector<double> box_sum(std::span<const double> src, const Shape3& shape, int radius);

}  // namespace detail

}  // namespace distilseg
