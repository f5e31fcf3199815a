#pragma once

// Brute-force reference implementations. Each one evaluates the textbook definition
// directly with explicit loops and shares no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "distilseg/distill.hpp"
#include "distilseg/volume.hpp"

namespace oracle {

using distilseg::DisplacementField;
using distilseg::LabelMap;
using distilseg::Shape3;
using distilseg::Spacing;
using distilseg::Volume;

inline double clampd(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

// ---- random instances ---------------------------------------------------------------

inline Volume random_volume(std::mt19937_64& rng, Shape3 s, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(static_cast<std::size_t>(s.voxels()));
  for (auto& v : d) v = u(rng);
  return Volume(s, std::move(d));
}

inline DisplacementField random_field(std::mt19937_64& rng, Shape3 s, double mag) {
  std::uniform_real_distribution<double> u(-mag, mag);
  std::vector<double> d(static_cast<std::size_t>(3 * s.voxels()));
  for (auto& v : d) v = u(rng);
  return DisplacementField(s, std::move(d));
}

inline LabelMap random_labels(std::mt19937_64& rng, Shape3 s, int classes) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<std::int32_t> d(static_cast<std::size_t>(s.voxels()));
  for (auto& v : d) v = u(rng);
  return LabelMap(s, std::move(d), classes);
}

// Random blob-like mask: voxels within a random radius of a random centre, with noise.
inline LabelMap random_blob_labels(std::mt19937_64& rng, Shape3 s, int classes) {
  std::vector<std::int32_t> d(static_cast<std::size_t>(s.voxels()), 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c = 1; c < classes; ++c) {
    const double cz = u(rng) * s.d, cy = u(rng) * s.h, cx = u(rng) * s.w;
    const double r = 2.0 + u(rng) * 0.3 * static_cast<double>(std::min({s.d, s.h, s.w}));
    for (std::int64_t z = 0; z < s.d; ++z)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
          const double dz = z - cz, dy = y - cy, dx = x - cx;
          if (dz * dz + dy * dy + dx * dx < r * r && u(rng) > 0.1) {
            d[static_cast<std::size_t>((z * s.h + y) * s.w + x)] = c;
          }
        }
  }
  return LabelMap(s, std::move(d), classes);
}

// ---- warping -------------------------------------------------------------------------

inline double sample_trilinear(const Volume& v, double qz, double qy, double qx) {
  const Shape3& s = v.shape();
  const double q[3] = {clampd(qz, 0, s.d - 1.0), clampd(qy, 0, s.h - 1.0), clampd(qx, 0, s.w - 1.0)};
  const std::int64_t n[3] = {s.d, s.h, s.w};
  double total = 0;
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1;
    std::int64_t idx[3];
    for (int a = 0; a < 3; ++a) {
      const auto lo = static_cast<std::int64_t>(std::floor(q[a]));
      const double frac = q[a] - static_cast<double>(lo);
      const int bit = (corner >> a) & 1;
      idx[a] = std::min(lo + bit, n[a] - 1);
      w *= bit ? frac : 1 - frac;
    }
    if (w != 0) total += w * v.at(idx[0], idx[1], idx[2]);
  }
  return total;
}

inline std::vector<double> warp_trilinear(const Volume& v, const DisplacementField& f) {
  const Shape3& s = v.shape();
  const auto n = s.voxels();
  std::vector<double> out;
  for (std::int64_t z = 0; z < s.d; ++z)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) {
        const auto p = static_cast<std::size_t>((z * s.h + y) * s.w + x);
        out.push_back(sample_trilinear(v, z + f.data()[p], y + f.data()[static_cast<std::size_t>(n) + p],
                                       x + f.data()[static_cast<std::size_t>(2 * n) + p]));
      }
  return out;
}

inline std::vector<std::int32_t> warp_nearest_labels(const LabelMap& l, const DisplacementField& f) {
  const Shape3& s = l.shape();
  const auto n = static_cast<std::size_t>(s.voxels());
  std::vector<std::int32_t> out;
  for (std::int64_t z = 0; z < s.d; ++z)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) {
        const auto p = static_cast<std::size_t>((z * s.h + y) * s.w + x);
        auto pick = [](double q, std::int64_t len) {
          return static_cast<std::int64_t>(std::lround(clampd(q, 0, len - 1.0)));
        };
        out.push_back(l.at(pick(z + f.data()[p], s.d), pick(y + f.data()[n + p], s.h),
                           pick(x + f.data()[2 * n + p], s.w)));
      }
  return out;
}

// ---- similarity ------------------------------------------------------------------------

inline double ncc(const Volume& a, const Volume& b) {
  const auto n = static_cast<double>(a.voxels());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    ma += a.data()[i];
    mb += b.data()[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    cov += (a.data()[i] - ma) * (b.data()[i] - mb);
    va += (a.data()[i] - ma) * (a.data()[i] - ma);
    vb += (b.data()[i] - mb) * (b.data()[i] - mb);
  }
  return (cov / n) / (std::sqrt(va / n) * std::sqrt(vb / n));
}

// Squared correlation over one explicit window, two-pass centred sums.
inline double window_cc(const Volume& I, const Volume& J, std::int64_t z, std::int64_t y, std::int64_t x, int r,
                        double eps) {
  const Shape3& s = I.shape();
  std::vector<double> a, b;
  for (auto zz = std::max<std::int64_t>(0, z - r); zz <= std::min(s.d - 1, z + r); ++zz)
    for (auto yy = std::max<std::int64_t>(0, y - r); yy <= std::min(s.h - 1, y + r); ++yy)
      for (auto xx = std::max<std::int64_t>(0, x - r); xx <= std::min(s.w - 1, x + r); ++xx) {
        a.push_back(I.at(zz, yy, xx));
        b.push_back(J.at(zz, yy, xx));
      }
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(a.size());
  double cross = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cross += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cross * cross / (va * vb + eps);
}

inline double local_cc_loss(const Volume& I, const Volume& J, int window, double eps) {
  const Shape3& s = I.shape();
  double total = 0;
  for (std::int64_t z = 0; z < s.d; ++z)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) total += window_cc(I, J, z, y, x, window / 2, eps);
  return -total / static_cast<double>(s.voxels());
}

// Mutual information of hard-binned intensities: bin = round(v * (bins - 1)).
inline double mi_hard(const Volume& a, const Volume& b, int bins) {
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> pa, pb;
  const auto n = static_cast<double>(a.voxels());
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const int ia = static_cast<int>(std::lround(a.data()[i] * (bins - 1)));
    const int ib = static_cast<int>(std::lround(b.data()[i] * (bins - 1)));
    joint[{ia, ib}] += 1 / n;
    pa[ia] += 1 / n;
    pb[ib] += 1 / n;
  }
  double mi = 0;
  for (const auto& [k, p] : joint) mi += p * std::log(p / (pa[k.first] * pb[k.second]));
  return mi;
}

// ---- smoothness --------------------------------------------------------------------------

inline double field_at(const DisplacementField& f, int c, std::int64_t z, std::int64_t y, std::int64_t x) {
  const Shape3& s = f.shape();
  return f.data()[static_cast<std::size_t>(c * s.voxels() + (z * s.h + y) * s.w + x)];
}

inline double diffusion(const DisplacementField& f) {
  const Shape3& s = f.shape();
  double total = 0;
  for (int c = 0; c < 3; ++c)
    for (std::int64_t z = 0; z < s.d; ++z)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
          const double u = field_at(f, c, z, y, x);
          const double dz = z + 1 < s.d ? field_at(f, c, z + 1, y, x) - u : 0.0;
          const double dy = y + 1 < s.h ? field_at(f, c, z, y + 1, x) - u : 0.0;
          const double dx = x + 1 < s.w ? field_at(f, c, z, y, x + 1) - u : 0.0;
          total += dz * dz + dy * dy + dx * dx;
        }
  return total / static_cast<double>(s.voxels());
}

// Second differences as repeated forward differences; terms whose stencil leaves the grid are dropped.
inline double bending(const DisplacementField& f) {
  const Shape3& s = f.shape();
  double total = 0;
  for (int c = 0; c < 3; ++c)
    for (std::int64_t z = 0; z < s.d; ++z)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
          auto u = [&](std::int64_t a, std::int64_t b, std::int64_t e) { return field_at(f, c, z + a, y + b, x + e); };
          if (z + 2 < s.d) total += std::pow(u(2, 0, 0) - 2 * u(1, 0, 0) + u(0, 0, 0), 2);
          if (y + 2 < s.h) total += std::pow(u(0, 2, 0) - 2 * u(0, 1, 0) + u(0, 0, 0), 2);
          if (x + 2 < s.w) total += std::pow(u(0, 0, 2) - 2 * u(0, 0, 1) + u(0, 0, 0), 2);
          if (z + 1 < s.d && y + 1 < s.h) total += 2 * std::pow(u(1, 1, 0) - u(1, 0, 0) - u(0, 1, 0) + u(0, 0, 0), 2);
          if (z + 1 < s.d && x + 1 < s.w) total += 2 * std::pow(u(1, 0, 1) - u(1, 0, 0) - u(0, 0, 1) + u(0, 0, 0), 2);
          if (y + 1 < s.h && x + 1 < s.w) total += 2 * std::pow(u(0, 1, 1) - u(0, 1, 0) - u(0, 0, 1) + u(0, 0, 0), 2);
        }
  return total / static_cast<double>(s.voxels());
}

// ---- contrastive ----------------------------------------------------------------------------

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

inline double info_nce(const std::vector<double>& anchor, const std::vector<double>& pos,
                       const std::vector<std::vector<double>>& negs, double tau) {
  const double num = std::exp(cosine(anchor, pos) / tau);
  double den = num;
  for (const auto& n : negs) den += std::exp(cosine(anchor, n) / tau);
  return -std::log(num / den);
}

// ---- segmentation losses -----------------------------------------------------------------

inline double cross_entropy(const LabelMap& labels, const distilseg::Logits& logits) {
  const auto n = static_cast<std::size_t>(labels.voxels());
  const int C = logits.num_classes;
  double total = 0;
  for (std::size_t p = 0; p < n; ++p) {
    double z = 0;
    for (int c = 0; c < C; ++c) z += std::exp(logits.values[static_cast<std::size_t>(c) * n + p]);
    for (int c = 0; c < C; ++c) {
      const double onehot = labels.data()[p] == c ? 1.0 : 0.0;
      const double prob = std::exp(logits.values[static_cast<std::size_t>(c) * n + p]) / z;
      total -= onehot * std::log(prob);
    }
  }
  return total / static_cast<double>(n);
}

inline double hint(const distilseg::FeatureStack& s, const distilseg::FeatureStack& t, int k, bool cosine_metric) {
  double total = 0;
  for (int i = 0; i < k; ++i) {
    const auto& a = s.layers[static_cast<std::size_t>(i)].values;
    const auto& b = t.layers[static_cast<std::size_t>(i)].values;
    if (cosine_metric) {
      total += 1 - cosine(a, b);
    } else {
      double m = 0;
      for (std::size_t j = 0; j < a.size(); ++j) m += (a[j] - b[j]) * (a[j] - b[j]);
      total += m / static_cast<double>(a.size());
    }
  }
  return total;
}

// ---- metrics -------------------------------------------------------------------------------

inline double dice(const LabelMap& p, const LabelMap& t, int label) {
  double inter = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < p.data().size(); ++i) {
    const bool a = p.data()[i] == label, b = t.data()[i] == label;
    inter += a && b;
    np += a;
    nt += b;
  }
  return np + nt == 0 ? 1.0 : 2 * inter / (np + nt);
}

struct Point {
  std::int64_t z, y, x;
};

inline std::vector<Point> boundary(const LabelMap& m, int label) {
  const Shape3& s = m.shape();
  std::vector<Point> out;
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (std::int64_t z = 0; z < s.d; ++z)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) {
        if (m.at(z, y, x) != label) continue;
        bool edge = false;
        for (const auto& o : off) {
          const auto a = z + o[0], b = y + o[1], c = x + o[2];
          if (a < 0 || b < 0 || c < 0 || a >= s.d || b >= s.h || c >= s.w || m.at(a, b, c) != label) edge = true;
        }
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

// Pooled bidirectional 95th percentile by exhaustive pairwise distances.
inline double hd95(const LabelMap& p, const LabelMap& t, int label, const Spacing& sp) {
  const auto bp = boundary(p, label), bt = boundary(t, label);
  auto directed = [&](const std::vector<Point>& from, const std::vector<Point>& to, std::vector<double>& out) {
    for (const auto& a : from) {
      double best = 1e300;
      for (const auto& b : to) {
        const double dz = (a.z - b.z) * sp.d, dy = (a.y - b.y) * sp.h, dx = (a.x - b.x) * sp.w;
        best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
      }
      out.push_back(best);
    }
  };
  std::vector<double> all;
  directed(bp, bt, all);
  directed(bt, bp, all);
  std::sort(all.begin(), all.end());
  const double pos = 0.95 * static_cast<double>(all.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  return lo + 1 < all.size() ? all[lo] * (1 - frac) + all[lo + 1] * frac : all[lo];
}

// ---- finite differences -------------------------------------------------------------------

// Relative error between an analytic derivative and a central difference.
inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline double central_diff(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

// Checks `points` random coordinates of an analytic gradient against central differences.
// Returns the largest relative error seen.
inline double max_grad_error(const std::vector<double>& x, const std::function<double(const std::vector<double>&)>& f,
                             const std::vector<double>& grad, int points, std::mt19937_64& rng, double h = 1e-6) {
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  double worst = 0;
  for (int k = 0; k < points; ++k) {
    const std::size_t i = pick(rng);
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    worst = std::max(worst, rel_err(grad[i], (f(xp) - f(xm)) / (2 * h)));
  }
  return worst;
}

}  // namespace oracle
