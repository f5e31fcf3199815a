#include "distilseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "distilseg/error.hpp"

namespace distilseg {

std::string Shape3::str() const {
  std::ostringstream os;
  os << d << "x" << h << "x" << w;
  return os.str();
}

void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
  if (!(a == b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

namespace {

void check_shape(const Shape3& shape, std::size_t n, std::size_t per_voxel, const char* what) {
  if (!shape.positive()) {
    throw DimensionError(std::string(what) + ": shape must be positive on every axis, got " + shape.str());
  }
  if (n != static_cast<std::size_t>(shape.voxels()) * per_voxel) {
    throw DimensionError(std::string(what) + ": data length " + std::to_string(n) +
                         " does not match shape " + shape.str());
  }
}

void check_spacing(const Spacing& s) {
  if (!(s.d > 0 && s.h > 0 && s.w > 0) || !std::isfinite(s.d) || !std::isfinite(s.h) || !std::isfinite(s.w)) {
    throw ValidationError("spacing must be finite and positive");
  }
}

}  // namespace

Volume::Volume(Shape3 shape, std::vector<double> data, Spacing spacing,
               std::optional<std::pair<double, double>> intensity_range)
    : shape_(shape), spacing_(spacing), range_(intensity_range), data_(std::move(data)) {
  check_shape(shape_, data_.size(), 1, "Volume");
  check_spacing(spacing_);
  for (double v : data_) {
    if (!std::isfinite(v)) throw ValidationError("Volume: non-finite voxel value");
  }
}

Volume Volume::zeros(Shape3 shape, Spacing spacing) {
  return Volume(shape, std::vector<double>(static_cast<std::size_t>(std::max<std::int64_t>(shape.voxels(), 0)), 0.0),
                spacing);
}

Volume Volume::normalized() const {
  const auto [lo, hi] = std::minmax_element(data_.begin(), data_.end());
  std::vector<double> out(data_.size(), 0.0);
  const double span = *hi - *lo;
  if (span > 0) {
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = (data_[i] - *lo) / span;
  }
  return Volume(shape_, std::move(out), spacing_, std::make_pair(0.0, 1.0));
}

LabelMap::LabelMap(Shape3 shape, std::vector<std::int32_t> data, int num_classes, Spacing spacing)
    : shape_(shape), spacing_(spacing), num_classes_(num_classes), data_(std::move(data)) {
  check_shape(shape_, data_.size(), 1, "LabelMap");
  check_spacing(spacing_);
  if (num_classes_ < 2) throw ValidationError("LabelMap: num_classes must be >= 2");
  for (auto v : data_) {
    if (v < 0 || v >= num_classes_) {
      throw ValidationError("LabelMap: label " + std::to_string(v) + " outside [0, " +
                            std::to_string(num_classes_ - 1) + "]");
    }
  }
}

std::vector<std::int32_t> LabelMap::present_classes() const {
  std::vector<char> seen(static_cast<std::size_t>(num_classes_), 0);
  for (auto v : data_) seen[static_cast<std::size_t>(v)] = 1;
  std::vector<std::int32_t> out;
  for (int c = 0; c < num_classes_; ++c) {
    if (seen[static_cast<std::size_t>(c)]) out.push_back(c);
  }
  return out;
}

DisplacementField::DisplacementField(Shape3 shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  check_shape(shape_, data_.size(), 3, "DisplacementField");
  for (double v : data_) {
    if (!std::isfinite(v)) throw ValidationError("DisplacementField: non-finite component");
  }
}

DisplacementField DisplacementField::zeros(Shape3 shape) {
  return DisplacementField(shape, std::vector<double>(static_cast<std::size_t>(3 * shape.voxels()), 0.0));
}

double DisplacementField::max_abs() const noexcept {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

AtlasPair::AtlasPair(Volume img, LabelMap lab) : image(std::move(img)), labels(std::move(lab)) {
  require_same_shape(image.shape(), labels.shape(), "AtlasPair");
}

SyntheticPair::SyntheticPair(Volume img, LabelMap lab, std::size_t source)
    : image(std::move(img)), labels(std::move(lab)), source_id(source) {
  require_same_shape(image.shape(), labels.shape(), "SyntheticPair");
}

}  // namespace distilseg
