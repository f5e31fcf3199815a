#include "distilseg/ncc.hpp"

#include <algorithm>
#include <cmath>

#include "distilseg/error.hpp"

namespace distilseg {

double ncc_score(const Volume& a, const Volume& b) {
  require_same_shape(a.shape(), b.shape(), "ncc_score");
  const auto x = a.data();
  const auto y = b.data();
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 && syy == 0) throw DegenerateInputError("ncc_score: both volumes are constant");
  if (sxx == 0 || syy == 0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace distilseg
