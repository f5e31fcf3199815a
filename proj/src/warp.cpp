#include "distilseg/warp.hpp"

#include <algorithm>
#include <cmath>

#include "distilseg/error.hpp"

namespace distilseg {

namespace {

// One axis of a clamped linear interpolation stencil.
struct AxisStencil {
  std::int64_t i0 = 0;
  std::int64_t i1 = 0;
  double t = 0.0;       // weight of i1
  bool active = false;  // false when clamped: no derivative along this axis
};

inline AxisStencil make_stencil(double q, std::int64_t n) {
  AxisStencil s;
  if (n == 1) return s;
  if (q <= 0.0) {
    s.i0 = 0;
    s.i1 = 1;
    s.t = 0.0;
    s.active = q == 0.0;
    return s;
  }
  const double hi = static_cast<double>(n - 1);
  if (q >= hi) {
    s.i0 = n - 2;
    s.i1 = n - 1;
    s.t = 1.0;
    s.active = q == hi;
    return s;
  }
  s.i0 = std::min(static_cast<std::int64_t>(std::floor(q)), n - 2);
  s.i1 = s.i0 + 1;
  s.t = q - static_cast<double>(s.i0);
  s.active = true;
  return s;
}

inline std::int64_t nearest_index(double q, std::int64_t n) {
  const double c = std::clamp(q, 0.0, static_cast<double>(n - 1));
  return std::min(static_cast<std::int64_t>(std::floor(c + 0.5)), n - 1);
}

void check_field(const DisplacementField& field, const Shape3& shape, const char* what) {
  require_same_shape(field.shape(), shape, what);
}

}  // namespace

namespace detail {

void warp_trilinear(std::span<const double> src, const Shape3& shape, std::span<const double> field,
                    std::span<double> out) {
  const std::int64_t n = shape.voxels();
  const double* u0 = field.data();
  const double* u1 = u0 + n;
  const double* u2 = u1 + n;
  for (std::int64_t z = 0, p = 0; z < shape.d; ++z) {
    for (std::int64_t y = 0; y < shape.h; ++y) {
      for (std::int64_t x = 0; x < shape.w; ++x, ++p) {
        const AxisStencil sz = make_stencil(static_cast<double>(z) + u0[p], shape.d);
        const AxisStencil sy = make_stencil(static_cast<double>(y) + u1[p], shape.h);
        const AxisStencil sx = make_stencil(static_cast<double>(x) + u2[p], shape.w);
        auto at = [&](std::int64_t a, std::int64_t b, std::int64_t c) {
          return src[static_cast<std::size_t>(linear_index(shape, a, b, c))];
        };
        const double c00 = at(sz.i0, sy.i0, sx.i0) * (1 - sx.t) + at(sz.i0, sy.i0, sx.i1) * sx.t;
        const double c01 = at(sz.i0, sy.i1, sx.i0) * (1 - sx.t) + at(sz.i0, sy.i1, sx.i1) * sx.t;
        const double c10 = at(sz.i1, sy.i0, sx.i0) * (1 - sx.t) + at(sz.i1, sy.i0, sx.i1) * sx.t;
        const double c11 = at(sz.i1, sy.i1, sx.i0) * (1 - sx.t) + at(sz.i1, sy.i1, sx.i1) * sx.t;
        const double c0 = c00 * (1 - sy.t) + c01 * sy.t;
        const double c1 = c10 * (1 - sy.t) + c11 * sy.t;
        out[static_cast<std::size_t>(p)] = c0 * (1 - sz.t) + c1 * sz.t;
      }
    }
  }
}

void warp_trilinear_field_grad(std::span<const double> src, const Shape3& shape, std::span<const double> field,
                               std::span<const double> grad_out, std::span<double> grad_field) {
  const std::int64_t n = shape.voxels();
  const double* u0 = field.data();
  const double* u1 = u0 + n;
  const double* u2 = u1 + n;
  double* g0 = grad_field.data();
  double* g1 = g0 + n;
  double* g2 = g1 + n;
  for (std::int64_t z = 0, p = 0; z < shape.d; ++z) {
    for (std::int64_t y = 0; y < shape.h; ++y) {
      for (std::int64_t x = 0; x < shape.w; ++x, ++p) {
        const double go = grad_out[static_cast<std::size_t>(p)];
        if (go == 0.0) {
          g0[p] = g1[p] = g2[p] = 0.0;
          continue;
        }
        const AxisStencil sz = make_stencil(static_cast<double>(z) + u0[p], shape.d);
        const AxisStencil sy = make_stencil(static_cast<double>(y) + u1[p], shape.h);
        const AxisStencil sx = make_stencil(static_cast<double>(x) + u2[p], shape.w);
        auto at = [&](std::int64_t a, std::int64_t b, std::int64_t c) {
          return src[static_cast<std::size_t>(linear_index(shape, a, b, c))];
        };
        const double v000 = at(sz.i0, sy.i0, sx.i0), v001 = at(sz.i0, sy.i0, sx.i1);
        const double v010 = at(sz.i0, sy.i1, sx.i0), v011 = at(sz.i0, sy.i1, sx.i1);
        const double v100 = at(sz.i1, sy.i0, sx.i0), v101 = at(sz.i1, sy.i0, sx.i1);
        const double v110 = at(sz.i1, sy.i1, sx.i0), v111 = at(sz.i1, sy.i1, sx.i1);

        const double c00 = v000 * (1 - sx.t) + v001 * sx.t;
        const double c01 = v010 * (1 - sx.t) + v011 * sx.t;
        const double c10 = v100 * (1 - sx.t) + v101 * sx.t;
        const double c11 = v110 * (1 - sx.t) + v111 * sx.t;
        const double c0 = c00 * (1 - sy.t) + c01 * sy.t;
        const double c1 = c10 * (1 - sy.t) + c11 * sy.t;

        const double dz = sz.active ? (c1 - c0) : 0.0;
        const double dy = sy.active ? ((c01 - c00) * (1 - sz.t) + (c11 - c10) * sz.t) : 0.0;
        double dx = 0.0;
        if (sx.active) {
          const double e0 = (v001 - v000) * (1 - sy.t) + (v011 - v010) * sy.t;
          const double e1 = (v101 - v100) * (1 - sy.t) + (v111 - v110) * sy.t;
          dx = e0 * (1 - sz.t) + e1 * sz.t;
        }
        g0[p] = go * dz;
        g1[p] = go * dy;
        g2[p] = go * dx;
      }
    }
  }
}

}  // namespace detail

Volume warp_volume(const Volume& v, const DisplacementField& field, Interp mode) {
  check_field(field, v.shape(), "warp_volume");
  const Shape3& s = v.shape();
  std::vector<double> out(static_cast<std::size_t>(s.voxels()));
  if (mode == Interp::trilinear) {
    detail::warp_trilinear(v.data(), s, field.data(), out);
  } else {
    const auto u0 = field.component(0), u1 = field.component(1), u2 = field.component(2);
    for (std::int64_t z = 0, p = 0; z < s.d; ++z)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x, ++p) {
          const auto zi = nearest_index(static_cast<double>(z) + u0[p], s.d);
          const auto yi = nearest_index(static_cast<double>(y) + u1[p], s.h);
          const auto xi = nearest_index(static_cast<double>(x) + u2[p], s.w);
          out[static_cast<std::size_t>(p)] = v.at(zi, yi, xi);
        }
  }
  return Volume(s, std::move(out), v.spacing());
}

LabelMap warp_labels(const LabelMap& labels, const DisplacementField& field, LabelInterp mode) {
  check_field(field, labels.shape(), "warp_labels");
  const Shape3& s = labels.shape();
  const auto u0 = field.component(0), u1 = field.component(1), u2 = field.component(2);
  std::vector<std::int32_t> out(static_cast<std::size_t>(s.voxels()));
  if (mode == LabelInterp::nearest) {
    for (std::int64_t z = 0, p = 0; z < s.d; ++z)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x, ++p) {
          const auto zi = nearest_index(static_cast<double>(z) + u0[p], s.d);
          const auto yi = nearest_index(static_cast<double>(y) + u1[p], s.h);
          const auto xi = nearest_index(static_cast<double>(x) + u2[p], s.w);
          out[static_cast<std::size_t>(p)] = labels.at(zi, yi, xi);
        }
    return LabelMap(s, std::move(out), labels.num_classes(), labels.spacing());
  }

  // Each corner votes for its class with its trilinear weight; ties go to the lowest id.
  const int c_count = labels.num_classes();
  std::vector<double> votes(static_cast<std::size_t>(c_count));
  for (std::int64_t z = 0, p = 0; z < s.d; ++z)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x, ++p) {
        const AxisStencil sz = make_stencil(static_cast<double>(z) + u0[p], s.d);
        const AxisStencil sy = make_stencil(static_cast<double>(y) + u1[p], s.h);
        const AxisStencil sx = make_stencil(static_cast<double>(x) + u2[p], s.w);
        std::fill(votes.begin(), votes.end(), 0.0);
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const double wgt = (a ? sz.t : 1 - sz.t) * (b ? sy.t : 1 - sy.t) * (c ? sx.t : 1 - sx.t);
              const auto lab = labels.at(a ? sz.i1 : sz.i0, b ? sy.i1 : sy.i0, c ? sx.i1 : sx.i0);
              votes[static_cast<std::size_t>(lab)] += wgt;
            }
        out[static_cast<std::size_t>(p)] =
            static_cast<std::int32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
      }
  return LabelMap(s, std::move(out), c_count, labels.spacing());
}

std::vector<double> warp_field_gradient(const Volume& v, const DisplacementField& field,
                                        std::span<const double> grad_out) {
  check_field(field, v.shape(), "warp_field_gradient");
  if (grad_out.size() != static_cast<std::size_t>(v.voxels())) {
    throw DimensionError("warp_field_gradient: upstream gradient length mismatch");
  }
  std::vector<double> g(field.data().size());
  detail::warp_trilinear_field_grad(v.data(), v.shape(), field.data(), grad_out, g);
  return g;
}

}  // namespace distilseg
