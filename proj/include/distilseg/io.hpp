#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "distilseg/volume.hpp"

namespace distilseg::io {

// Raw container layout (all little-endian):
//
//   offset  size      field
//   0       8         magic "DSGVOL01"
//   8       4  u32    dtype      1=f64 2=f32 3=i32 4=u8 5=i16
//   12      4  u32    kind       0=volume 1=labels 2=displacement 3=feature tensor
//   16      4  u32    ndim       3 or 4
//   20      4  u32    num_classes (labels only, else 0)
//   24      8*ndim    u64 dims, C order (slowest first)
//   ...     24        f64 spacing[3] in (D, H, W) order, millimetres
//   ...               payload, C order, no padding
enum class DType : std::uint32_t { f64 = 1, f32 = 2, i32 = 3, u8 = 4, i16 = 5 };
enum class Kind : std::uint32_t { volume = 0, labels = 1, displacement = 2, features = 3 };

struct RawArray {
  DType dtype = DType::f64;
  Kind kind = Kind::volume;
  std::vector<std::uint64_t> dims;
  Spacing spacing;
  std::uint32_t num_classes = 0;
  std::vector<double> values;  // payload widened to double
};

RawArray read_raw(const std::filesystem::path& path);
void write_raw(const std::filesystem::path& path, const RawArray& arr);

// Format chosen by extension: .nii / .nii.gz are NIfTI-1, anything else the raw container.
Volume load_volume(const std::filesystem::path& path);
LabelMap load_labels(const std::filesystem::path& path, int num_classes = 0);
DisplacementField load_field(const std::filesystem::path& path);

void save_volume(const std::filesystem::path& path, const Volume& v);
void save_labels(const std::filesystem::path& path, const LabelMap& l);
void save_field(const std::filesystem::path& path, const DisplacementField& f);
// (C, D, H, W) float tensor, e.g. a feature map dump.
void save_features(const std::filesystem::path& path, std::span<const float> data, std::int64_t channels,
                   const Shape3& shape);

bool is_nifti(const std::filesystem::path& path);

}  // namespace distilseg::io
