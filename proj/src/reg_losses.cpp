#include "distilseg/reg_losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "distilseg/error.hpp"

namespace distilseg {

namespace {

// Keeps log() finite for empty histogram cells.
constexpr double kMiLogFloor = 1e-10;

void check_pair(const Volume& a, const Volume& b, const char* what) {
  require_same_shape(a.shape(), b.shape(), what);
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

std::string to_string(SimKind k) { return k == SimKind::local_cc ? "local_cc" : "mutual_information"; }
std::string to_string(SmoothKind k) { return k == SmoothKind::diffusion ? "diffusion" : "bending"; }

SimKind sim_kind_from_string(const std::string& s) {
  if (s == "local_cc" || s == "cc") return SimKind::local_cc;
  if (s == "mutual_information" || s == "mi") return SimKind::mutual_information;
  throw ConfigError("unknown similarity kind '" + s + "'");
}

SmoothKind smooth_kind_from_string(const std::string& s) {
  if (s == "diffusion") return SmoothKind::diffusion;
  if (s == "bending" || s == "bending_energy") return SmoothKind::bending;
  throw ConfigError("unknown smoothness kind '" + s + "'");
}

void RegLossConfig::validate() const {
  if (cc_window < 3 || cc_window % 2 == 0) throw ConfigError("cc_window must be odd and >= 3");
  if (mi_bins < 2) throw ConfigError("mi_bins must be >= 2");
  if (!(mi_sigma > 0)) throw ConfigError("mi_sigma must be > 0");
  if (!(tau > 0)) throw ConfigError("tau must be > 0");
  if (!(epsilon > 0)) throw ConfigError("epsilon must be > 0");
  if (!(alpha >= 0) || !(beta >= 0)) throw ConfigError("alpha and beta must be >= 0");
}

Embedding::Embedding(std::vector<double> v) : v_(std::move(v)) {
  double n2 = 0;
  for (double x : v_) {
    if (!std::isfinite(x)) throw ValidationError("Embedding: non-finite component");
    n2 += x * x;
  }
  if (v_.empty() || n2 == 0) throw DegenerateInputError("Embedding: zero-norm vector");
}

// ---- local cross-correlation ---------------------------------------------

namespace detail {

std::vector<double> box_sum(std::span<const double> src, const Shape3& shape, int radius) {
  std::vector<double> a(src.begin(), src.end());
  std::vector<double> line, prefix;
  const std::array<std::int64_t, 3> dims = {shape.d, shape.h, shape.w};
  const std::array<std::int64_t, 3> strides = {shape.h * shape.w, shape.w, 1};
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = dims[static_cast<std::size_t>(axis)];
    const std::int64_t stride = strides[static_cast<std::size_t>(axis)];
    line.resize(static_cast<std::size_t>(n));
    prefix.assign(static_cast<std::size_t>(n + 1), 0.0);
    const std::int64_t total = shape.voxels();
    for (std::int64_t start = 0; start < total; ++start) {
      // Visit each line once, from its first element.
      if ((start / stride) % n != 0) continue;
      for (std::int64_t i = 0; i < n; ++i) prefix[static_cast<std::size_t>(i + 1)] =
          prefix[static_cast<std::size_t>(i)] + a[static_cast<std::size_t>(start + i * stride)];
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t lo = std::max<std::int64_t>(0, i - radius);
        const std::int64_t hi = std::min<std::int64_t>(n - 1, i + radius);
        line[static_cast<std::size_t>(i)] =
            prefix[static_cast<std::size_t>(hi + 1)] - prefix[static_cast<std::size_t>(lo)];
      }
      for (std::int64_t i = 0; i < n; ++i) a[static_cast<std::size_t>(start + i * stride)] = line[static_cast<std::size_t>(i)];
    }
  }
  return a;
}

}  // namespace detail

namespace {

struct CcState {
  std::vector<double> cc, mean_i, mean_j, cross, var_i, denom;
};

CcState compute_cc(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  cfg.validate();
  check_pair(fixed, warped, "local_cc_loss");
  const Shape3& s = fixed.shape();
  if (cfg.cc_window > s.d || cfg.cc_window > s.h || cfg.cc_window > s.w) {
    throw DimensionError("local_cc_loss: window " + std::to_string(cfg.cc_window) + " larger than volume " + s.str());
  }
  const int r = cfg.cc_window / 2;
  const auto I = fixed.data();
  const auto J = warped.data();
  const std::size_t n = I.size();
  std::vector<double> ii(n), jj(n), ij(n), ones(n, 1.0);
  for (std::size_t k = 0; k < n; ++k) {
    ii[k] = I[k] * I[k];
    jj[k] = J[k] * J[k];
    ij[k] = I[k] * J[k];
  }
  const auto si = detail::box_sum(I, s, r);
  const auto sj = detail::box_sum(J, s, r);
  const auto sii = detail::box_sum(ii, s, r);
  const auto sjj = detail::box_sum(jj, s, r);
  const auto sij = detail::box_sum(ij, s, r);
  const auto cnt = detail::box_sum(ones, s, r);

  CcState st;
  st.cc.resize(n);
  st.mean_i.resize(n);
  st.mean_j.resize(n);
  st.cross.resize(n);
  st.var_i.resize(n);
  st.denom.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double mi = si[k] / cnt[k];
    const double mj = sj[k] / cnt[k];
    const double cross = sij[k] - mi * sj[k];
    const double vi = std::max(0.0, sii[k] - mi * si[k]);
    const double vj = std::max(0.0, sjj[k] - mj * sj[k]);
    const double den = vi * vj + cfg.epsilon;
    st.mean_i[k] = mi;
    st.mean_j[k] = mj;
    st.cross[k] = cross;
    st.var_i[k] = vi;
    st.denom[k] = den;
    st.cc[k] = cross * cross / den;
  }
  return st;
}

}  // namespace

double local_cc_loss(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  const auto st = compute_cc(fixed, warped, cfg);
  return -std::accumulate(st.cc.begin(), st.cc.end(), 0.0) / static_cast<double>(st.cc.size());
}

LossGrad local_cc_loss_grad(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  const auto st = compute_cc(fixed, warped, cfg);
  const std::size_t n = st.cc.size();
  const Shape3& s = fixed.shape();
  const int r = cfg.cc_window / 2;
  std::vector<double> a(n), ai(n), b(n), bj(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double A = 2.0 * st.cross[k] / st.denom[k];
    const double B = -2.0 * st.cross[k] * st.cross[k] * st.var_i[k] / (st.denom[k] * st.denom[k]);
    a[k] = A;
    ai[k] = A * st.mean_i[k];
    b[k] = B;
    bj[k] = B * st.mean_j[k];
  }
  const auto sa = detail::box_sum(a, s, r);
  const auto sai = detail::box_sum(ai, s, r);
  const auto sb = detail::box_sum(b, s, r);
  const auto sbj = detail::box_sum(bj, s, r);
  const auto I = fixed.data();
  const auto J = warped.data();
  LossGrad out;
  out.grad.resize(n);
  const double scale = -1.0 / static_cast<double>(n);
  double total = 0;
  for (std::size_t k = 0; k < n; ++k) {
    out.grad[k] = scale * (I[k] * sa[k] - sai[k] + J[k] * sb[k] - sbj[k]);
    total += st.cc[k];
  }
  out.value = -total / static_cast<double>(n);
  return out;
}

// ---- mutual information --------------------------------------------------

namespace {

// Per-voxel normalized Gaussian bin memberships, row-major (voxel, bin).
std::vector<double> parzen_weights(std::span<const double> v, int bins, double sigma) {
  const double step = 1.0 / (bins - 1);
  std::vector<double> w(v.size() * static_cast<std::size_t>(bins));
  std::vector<double> e(static_cast<std::size_t>(bins));
  for (std::size_t k = 0; k < v.size(); ++k) {
    double emax = -std::numeric_limits<double>::infinity();
    for (int b = 0; b < bins; ++b) {
      const double d = (v[k] - b * step) / sigma;
      e[static_cast<std::size_t>(b)] = -0.5 * d * d;
      emax = std::max(emax, e[static_cast<std::size_t>(b)]);
    }
    double z = 0;
    for (int b = 0; b < bins; ++b) {
      e[static_cast<std::size_t>(b)] = std::exp(e[static_cast<std::size_t>(b)] - emax);
      z += e[static_cast<std::size_t>(b)];
    }
    for (int b = 0; b < bins; ++b) w[k * static_cast<std::size_t>(bins) + static_cast<std::size_t>(b)] = e[static_cast<std::size_t>(b)] / z;
  }
  return w;
}

void check_unit_range(const Volume& v, const char* what) {
  for (double x : v.data()) {
    if (x < -1e-9 || x > 1.0 + 1e-9) {
      throw ValidationError(std::string(what) + ": intensities must be normalized to [0, 1]");
    }
  }
}

struct MiState {
  std::vector<double> wf, ww, joint, pf, pw;
  double mi = 0;
};

MiState compute_mi(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  cfg.validate();
  check_pair(fixed, warped, "mi_loss");
  check_unit_range(fixed, "mi_loss");
  check_unit_range(warped, "mi_loss");
  const int B = cfg.mi_bins;
  const auto nb = static_cast<std::size_t>(B);
  MiState st;
  st.wf = parzen_weights(fixed.data(), B, cfg.mi_sigma);
  st.ww = parzen_weights(warped.data(), B, cfg.mi_sigma);
  const std::size_t n = fixed.data().size();
  st.joint.assign(nb * nb, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double* a = &st.wf[k * nb];
    const double* b = &st.ww[k * nb];
    for (std::size_t i = 0; i < nb; ++i) {
      if (a[i] == 0.0) continue;
      double* row = &st.joint[i * nb];
      for (std::size_t j = 0; j < nb; ++j) row[j] += a[i] * b[j];
    }
  }
  for (auto& p : st.joint) p /= static_cast<double>(n);
  st.pf.assign(nb, 0.0);
  st.pw.assign(nb, 0.0);
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      st.pf[i] += st.joint[i * nb + j];
      st.pw[j] += st.joint[i * nb + j];
    }
  double mi = 0;
  for (double p : st.joint) mi += p * std::log(p + kMiLogFloor);
  for (double p : st.pf) mi -= p * std::log(p + kMiLogFloor);
  for (double p : st.pw) mi -= p * std::log(p + kMiLogFloor);
  st.mi = mi;
  return st;
}

}  // namespace

double mi_loss(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  return -compute_mi(fixed, warped, cfg).mi;
}

LossGrad mi_loss_grad(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  const auto st = compute_mi(fixed, warped, cfg);
  const int B = cfg.mi_bins;
  const auto nb = static_cast<std::size_t>(B);
  auto dent = [](double p) { return std::log(p + kMiLogFloor) + p / (p + kMiLogFloor); };
  std::vector<double> G(nb * nb);
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = 0; j < nb; ++j) G[i * nb + j] = dent(st.joint[i * nb + j]) - dent(st.pf[i]) - dent(st.pw[j]);

  const auto W = warped.data();
  const std::size_t n = W.size();
  const double step = 1.0 / (B - 1);
  const double inv_s2 = 1.0 / (cfg.mi_sigma * cfg.mi_sigma);
  LossGrad out;
  out.value = -st.mi;
  out.grad.resize(n);
  std::vector<double> h(nb), g(nb);
  for (std::size_t k = 0; k < n; ++k) {
    const double* a = &st.wf[k * nb];
    const double* b = &st.ww[k * nb];
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t i = 0; i < nb; ++i) {
      if (a[i] == 0.0) continue;
      const double* row = &G[i * nb];
      for (std::size_t j = 0; j < nb; ++j) h[j] += a[i] * row[j];
    }
    double gbar = 0;
    for (std::size_t j = 0; j < nb; ++j) {
      g[j] = -(W[k] - static_cast<double>(j) * step) * inv_s2;
      gbar += b[j] * g[j];
    }
    double d = 0;
    for (std::size_t j = 0; j < nb; ++j) d += h[j] * b[j] * (g[j] - gbar);
    out.grad[k] = -d / static_cast<double>(n);
  }
  return out;
}

// ---- smoothness regularizers ----------------------------------------------

namespace {

std::array<std::int64_t, 3> strides_of(const Shape3& s) { return {s.h * s.w, s.w, 1}; }

std::array<std::int64_t, 3> coords_of(const Shape3& s, std::int64_t p) {
  return {p / (s.h * s.w), (p / s.w) % s.h, p % s.w};
}

template <class Visit>
void for_each_forward_diff(const Shape3& s, Visit&& visit) {
  const auto st = strides_of(s);
  const std::int64_t n = s.voxels();
  for (std::int64_t p = 0; p < n; ++p) {
    const auto c = coords_of(s, p);
    for (int a = 0; a < 3; ++a) {
      if (c[static_cast<std::size_t>(a)] + 1 < s[a]) visit(p, p + st[static_cast<std::size_t>(a)]);
    }
  }
}

}  // namespace

double diffusion_reg(const DisplacementField& field) {
  const Shape3& s = field.shape();
  double total = 0;
  for (int comp = 0; comp < 3; ++comp) {
    const auto u = field.component(comp);
    for_each_forward_diff(s, [&](std::int64_t p, std::int64_t q) {
      const double d = u[static_cast<std::size_t>(q)] - u[static_cast<std::size_t>(p)];
      total += d * d;
    });
  }
  return total / static_cast<double>(s.voxels());
}

LossGrad diffusion_reg_grad(const DisplacementField& field) {
  const Shape3& s = field.shape();
  const auto n = static_cast<std::size_t>(s.voxels());
  LossGrad out;
  out.grad.assign(3 * n, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0;
  for (int comp = 0; comp < 3; ++comp) {
    const auto u = field.component(comp);
    double* g = out.grad.data() + static_cast<std::size_t>(comp) * n;
    for_each_forward_diff(s, [&](std::int64_t p, std::int64_t q) {
      const double d = u[static_cast<std::size_t>(q)] - u[static_cast<std::size_t>(p)];
      total += d * d;
      g[q] += 2 * d * inv_n;
      g[p] -= 2 * d * inv_n;
    });
  }
  out.value = total * inv_n;
  return out;
}

namespace {

// Calls visit(weight, {indices}, {coefficients}) for every in-grid second-difference stencil.
template <class Visit>
void for_each_second_diff(const Shape3& s, Visit&& visit) {
  if (s.d < 3 || s.h < 3 || s.w < 3) {
    throw DimensionError("bending_energy_reg: every axis needs length >= 3, got " + s.str());
  }
  const auto st = strides_of(s);
  const std::int64_t n = s.voxels();
  for (std::int64_t p = 0; p < n; ++p) {
    const auto c = coords_of(s, p);
    for (int a = 0; a < 3; ++a) {
      const auto sa = st[static_cast<std::size_t>(a)];
      if (c[static_cast<std::size_t>(a)] + 2 < s[a]) {
        visit(1.0, std::array<std::int64_t, 4>{p + 2 * sa, p + sa, p, p}, std::array<double, 4>{1, -2, 1, 0});
      }
    }
    for (int a = 0; a < 3; ++a)
      for (int b = a + 1; b < 3; ++b) {
        if (c[static_cast<std::size_t>(a)] + 1 < s[a] && c[static_cast<std::size_t>(b)] + 1 < s[b]) {
          const auto sa = st[static_cast<std::size_t>(a)], sb = st[static_cast<std::size_t>(b)];
          visit(2.0, std::array<std::int64_t, 4>{p + sa + sb, p + sa, p + sb, p}, std::array<double, 4>{1, -1, -1, 1});
        }
      }
  }
}

}  // namespace

double bending_energy_reg(const DisplacementField& field) {
  const Shape3& s = field.shape();
  double total = 0;
  for (int comp = 0; comp < 3; ++comp) {
    const auto u = field.component(comp);
    for_each_second_diff(s, [&](double w, const std::array<std::int64_t, 4>& idx, const std::array<double, 4>& k) {
      double v = 0;
      for (int t = 0; t < 4; ++t) v += k[static_cast<std::size_t>(t)] * u[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)])];
      total += w * v * v;
    });
  }
  return total / static_cast<double>(s.voxels());
}

LossGrad bending_energy_reg_grad(const DisplacementField& field) {
  const Shape3& s = field.shape();
  const auto n = static_cast<std::size_t>(s.voxels());
  LossGrad out;
  out.grad.assign(3 * n, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0;
  for (int comp = 0; comp < 3; ++comp) {
    const auto u = field.component(comp);
    double* g = out.grad.data() + static_cast<std::size_t>(comp) * n;
    for_each_second_diff(s, [&](double w, const std::array<std::int64_t, 4>& idx, const std::array<double, 4>& k) {
      double v = 0;
      for (int t = 0; t < 4; ++t) v += k[static_cast<std::size_t>(t)] * u[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)])];
      total += w * v * v;
      for (int t = 0; t < 4; ++t) g[idx[static_cast<std::size_t>(t)]] += 2 * w * v * k[static_cast<std::size_t>(t)] * inv_n;
    });
  }
  out.value = total * inv_n;
  return out;
}

// ---- contrastive -------------------------------------------------------------

namespace {

double cosine(std::span<const double> u, std::span<const double> v) {
  return dot(u, v) / std::sqrt(dot(u, u) * dot(v, v));
}

// Adds scale * d cos(u, v) / du into out.
void add_cosine_grad(std::span<const double> u, std::span<const double> v, double scale, std::vector<double>& out) {
  const double nu2 = dot(u, u), nv = std::sqrt(dot(v, v));
  const double nu = std::sqrt(nu2);
  const double c = dot(u, v) / (nu * nv);
  for (std::size_t i = 0; i < u.size(); ++i) out[i] += scale * (v[i] / (nu * nv) - c * u[i] / nu2);
}

void check_embeddings(const Embedding& a, const Embedding& p, const std::vector<Embedding>& negs) {
  if (negs.empty()) throw ValidationError("contrastive_loss: at least one negative is required");
  if (p.dim() != a.dim()) throw DimensionError("contrastive_loss: embedding dimensions differ");
  for (const auto& n : negs) {
    if (n.dim() != a.dim()) throw DimensionError("contrastive_loss: embedding dimensions differ");
  }
}

}  // namespace

double contrastive_loss(const Embedding& anchor, const Embedding& positive, const std::vector<Embedding>& negatives,
                        const RegLossConfig& cfg) {
  return contrastive_loss_grad(anchor, positive, negatives, cfg).value;
}

ContrastiveGrad contrastive_loss_grad(const Embedding& anchor, const Embedding& positive,
                                      const std::vector<Embedding>& negatives, const RegLossConfig& cfg) {
  cfg.validate();
  check_embeddings(anchor, positive, negatives);
  const std::size_t k = negatives.size();
  std::vector<double> logits(k + 1);
  logits[0] = cosine(anchor.vector(), positive.vector()) / cfg.tau;
  for (std::size_t i = 0; i < k; ++i) logits[i + 1] = cosine(anchor.vector(), negatives[i].vector()) / cfg.tau;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double l : logits) z += std::exp(l - m);
  const double lse = m + std::log(z);

  ContrastiveGrad out;
  out.value = lse - logits[0];
  const std::size_t dim = anchor.dim();
  out.d_anchor.assign(dim, 0.0);
  out.d_positive.assign(dim, 0.0);
  out.d_negatives.assign(k, std::vector<double>(dim, 0.0));
  // dL/dlogit_i = softmax_i - [i == 0]
  const double g0 = (std::exp(logits[0] - lse) - 1.0) / cfg.tau;
  add_cosine_grad(anchor.vector(), positive.vector(), g0, out.d_anchor);
  add_cosine_grad(positive.vector(), anchor.vector(), g0, out.d_positive);
  for (std::size_t i = 0; i < k; ++i) {
    const double gi = std::exp(logits[i + 1] - lse) / cfg.tau;
    add_cosine_grad(anchor.vector(), negatives[i].vector(), gi, out.d_anchor);
    add_cosine_grad(negatives[i].vector(), anchor.vector(), gi, out.d_negatives[i]);
  }
  return out;
}

// ---- composition ----------------------------------------------------------------

double similarity_loss(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  return cfg.sim_kind == SimKind::local_cc ? local_cc_loss(fixed, warped, cfg) : mi_loss(fixed, warped, cfg);
}

LossGrad similarity_loss_grad(const Volume& fixed, const Volume& warped, const RegLossConfig& cfg) {
  return cfg.sim_kind == SimKind::local_cc ? local_cc_loss_grad(fixed, warped, cfg) : mi_loss_grad(fixed, warped, cfg);
}

double smoothness_loss(const DisplacementField& field, const RegLossConfig& cfg) {
  return cfg.smooth_kind == SmoothKind::diffusion ? diffusion_reg(field) : bending_energy_reg(field);
}

LossGrad smoothness_loss_grad(const DisplacementField& field, const RegLossConfig& cfg) {
  return cfg.smooth_kind == SmoothKind::diffusion ? diffusion_reg_grad(field) : bending_energy_reg_grad(field);
}

RegLossBreakdown combined_reg_loss(const Volume& fixed, const Volume& warped, const DisplacementField& field,
                                   const Embedding& anchor, const Embedding& positive,
                                   const std::vector<Embedding>& negatives, const RegLossConfig& cfg) {
  cfg.validate();
  require_same_shape(field.shape(), fixed.shape(), "combined_reg_loss");
  RegLossBreakdown out;
  out.sim = similarity_loss(fixed, warped, cfg);
  out.smooth = smoothness_loss(field, cfg);
  out.contrast = contrastive_loss(anchor, positive, negatives, cfg);
  out.total = out.sim + cfg.alpha * out.smooth + cfg.beta * out.contrast;
  return out;
}

}  // namespace distilseg
