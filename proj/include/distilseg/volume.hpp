#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace distilseg {

// Grid extent in (D, H, W) order. W is the fastest-varying axis in memory.
struct Shape3 {
  std::int64_t d = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t voxels() const noexcept { return d * h * w; }
  std::int64_t operator[](int axis) const noexcept { return axis == 0 ? d : (axis == 1 ? h : w); }
  bool positive() const noexcept { return d > 0 && h > 0 && w > 0; }
  bool divisible_by(std::int64_t f) const noexcept { return d % f == 0 && h % f == 0 && w % f == 0; }
  friend bool operator==(const Shape3&, const Shape3&) = default;

  std::string str() const;
};

// Physical voxel size in millimetres, same axis order as Shape3.
struct Spacing {
  double d = 1.0;
  double h = 1.0;
  double w = 1.0;

  double operator[](int axis) const noexcept { return axis == 0 ? d : (axis == 1 ? h : w); }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

inline std::int64_t linear_index(const Shape3& s, std::int64_t z, std::int64_t y, std::int64_t x) noexcept {
  return (z * s.h + y) * s.w + x;
}

// Scalar 3D image. Immutable after construction; all values finite.
class Volume {
 public:
  Volume() = default;
  Volume(Shape3 shape, std::vector<double> data, Spacing spacing = {},
         std::optional<std::pair<double, double>> intensity_range = std::nullopt);

  static Volume zeros(Shape3 shape, Spacing spacing = {});

  const Shape3& shape() const noexcept { return shape_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  const std::optional<std::pair<double, double>>& intensity_range() const noexcept { return range_; }
  std::span<const double> data() const noexcept { return data_; }
  std::int64_t voxels() const noexcept { return shape_.voxels(); }

  double at(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
    return data_[static_cast<std::size_t>(linear_index(shape_, z, y, x))];
  }

  // Min-max rescale to [0, 1]. A constant volume maps to all zeros.
  Volume normalized() const;

 private:
  Shape3 shape_;
  Spacing spacing_;
  std::optional<std::pair<double, double>> range_;
  std::vector<double> data_;
};

// Integer class map with classes 0..num_classes-1, 0 being background.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(Shape3 shape, std::vector<std::int32_t> data, int num_classes, Spacing spacing = {});

  const Shape3& shape() const noexcept { return shape_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  int num_classes() const noexcept { return num_classes_; }
  std::span<const std::int32_t> data() const noexcept { return data_; }
  std::int64_t voxels() const noexcept { return shape_.voxels(); }

  std::int32_t at(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
    return data_[static_cast<std::size_t>(linear_index(shape_, z, y, x))];
  }

  // Sorted distinct class ids that occur in the map.
  std::vector<std::int32_t> present_classes() const;

 private:
  Shape3 shape_;
  Spacing spacing_;
  int num_classes_ = 0;
  std::vector<std::int32_t> data_;
};

// Dense displacement u in voxel units, stored component-major as (3, D, H, W).
// Component 0 displaces along D, 1 along H, 2 along W. The deformation is Id + u.
class DisplacementField {
 public:
  DisplacementField() = default;
  DisplacementField(Shape3 shape, std::vector<double> data);

  static DisplacementField zeros(Shape3 shape);

  const Shape3& shape() const noexcept { return shape_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<const double> component(int c) const noexcept {
    const auto n = static_cast<std::size_t>(shape_.voxels());
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(c) * n, n);
  }
  double max_abs() const noexcept;

 private:
  Shape3 shape_;
  std::vector<double> data_;
};

struct AtlasPair {
  Volume image;
  LabelMap labels;

  AtlasPair() = default;
  AtlasPair(Volume img, LabelMap lab);
};

struct SyntheticPair {
  Volume image;
  LabelMap labels;
  std::size_t source_id = 0;

  SyntheticPair() = default;
  SyntheticPair(Volume img, LabelMap lab, std::size_t source);
};

void require_same_shape(const Shape3& a, const Shape3& b, const char* what);

}  // namespace distilseg
