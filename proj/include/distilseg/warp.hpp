#pragma once

#include <span>

#include "distilseg/volume.hpp"

namespace distilseg {

enum class Interp { trilinear, nearest };

// How integer labels are resampled. `nearest` keeps class ids directly;
// `one_hot_linear` interpolates per-class indicators trilinearly and takes the argmax.
enum class LabelInterp { nearest, one_hot_linear };

// Spatial transformer: out(p) = v(p + u(p)), sample points clamped to the border voxel.
Volume warp_volume(const Volume& v, const DisplacementField& field, Interp mode = Interp::trilinear);

LabelMap warp_labels(const LabelMap& labels, const DisplacementField& field,
                     LabelInterp mode = LabelInterp::nearest);

// Gradient of sum_p grad_out(p) * warp_volume(v, field)(p) with respect to the field,
// trilinear mode. Returned in the field's (3, D, H, W) layout.
std::vector<double> warp_field_gradient(const Volume& v, const DisplacementField& field,
                                        std::span<const double> grad_out);

namespace detail {

// Raw-buffer kernels shared with the training code.
void warp_trilinear(std::span<const double> src, const Shape3& shape, std::span<const double> field,
                    std::span<double> out);
void warp_trilinear_field_grad(std::span<const double> src, const Shape3& shape, std::span<const double> field,
                               std::span<const double> grad_out, std::span<double> grad_field);

}  // namespace detail

}  // namespace distilseg
