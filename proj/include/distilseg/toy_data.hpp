#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "distilseg/volume.hpp"

namespace distilseg {

struct ToySpec {
  Shape3 shape{32, 32, 32};
  int num_volumes = 10;   // unlabeled training members
  int num_test = 5;       // held-out members with ground truth
  int num_classes = 4;    // background plus nested structures, at most 6
  double deform_magnitude = 3.0;  // max voxel displacement of a member's field
  double smoothness = 4.0;        // Gaussian blur sigma (voxels) of the random field
  double intensity_noise = 0.03;  // additive Gaussian noise std
  double bias_amplitude = 0.15;   // multiplicative smooth bias field, 0 disables
  double contrast_jitter = 0.08;  // per-member, per-class intensity offset std
  std::uint64_t seed = 0;
  void validate() const;
};

struct ToyMember {
  Volume image;
  LabelMap labels;
  DisplacementField field;  // atlas -> member
};

struct ToyDataset {
  AtlasPair atlas;
  std::vector<ToyMember> population;  // num_volumes training members, then num_test test members

  std::vector<Volume> train_images() const;
  std::vector<Volume> test_images() const;
  std::vector<LabelMap> train_labels() const;
  std::vector<LabelMap> test_labels() const;
  int num_train = 0;
};

// Canonical atlas with nested ellipsoid and box structures; members are the atlas warped by
// blurred-noise fields with per-member contrast shifts, a smooth bias field and noise.
ToyDataset generate_toy_dataset(const ToySpec& spec);

// Gaussian-blurred white noise rescaled so its largest component magnitude equals `magnitude`.
DisplacementField random_smooth_field(const Shape3& shape, double magnitude, double sigma, std::uint64_t seed);

// Writes every volume in the raw container plus manifest.json listing atlas, train and test files.
std::filesystem::path write_toy_dataset(const ToyDataset& ds, const ToySpec& spec, const std::filesystem::path& dir);

struct ToyManifest {
  std::filesystem::path atlas_image, atlas_labels;
  std::vector<std::filesystem::path> train_images, train_labels, test_images, test_labels;
  int num_classes = 0;
};
ToyManifest read_manifest(const std::filesystem::path& manifest);

}  // namespace distilseg
