#include "distilseg/nn/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "distilseg/error.hpp"

namespace distilseg::nn {

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<MatF>;
using CMapF = Eigen::Map<const MatF>;

struct ConvGeom {
  std::int64_t ci, d, h, w;     // input
  std::int64_t co, od, oh, ow;  // output
  int k, stride, pad;
  std::int64_t in_vox() const { return d * h * w; }
  std::int64_t out_vox() const { return od * oh * ow; }
  std::int64_t rows() const { return ci * k * k * k; }
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.dims.size() != 4) throw DimensionError("conv3d: input must be (C, D, H, W), got " + dims_str(x.dims));
  if (w.dims.size() != 5 || w.dims[1] != x.dims[0] || w.dims[2] != w.dims[3] || w.dims[3] != w.dims[4]) {
    throw DimensionError("conv3d: weight " + dims_str(w.dims) + " incompatible with input " + dims_str(x.dims));
  }
  ConvGeom g{x.dims[0], x.dims[1], x.dims[2], x.dims[3], w.dims[0], 0, 0, 0, static_cast<int>(w.dims[2]), stride, pad};
  g.od = (g.d + 2 * pad - g.k) / stride + 1;
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.od <= 0 || g.oh <= 0 || g.ow <= 0) throw DimensionError("conv3d: input too small for kernel");
  return g;
}

// Column buffers reach tens of megabytes at full resolution; reusing one avoids a fresh
// mapping (and page faults) for every convolution.
FloatBuffer& scratch(std::size_t n) {
  thread_local FloatBuffer buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

void im2col(const float* x, const ConvGeom& g, float* col) {
  const std::int64_t ov = g.out_vox();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (int kd = 0; kd < g.k; ++kd)
      for (int kh = 0; kh < g.k; ++kh)
        for (int kw = 0; kw < g.k; ++kw) {
          float* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * ov;
          for (std::int64_t z = 0; z < g.od; ++z) {
            const std::int64_t iz = z * g.stride - g.pad + kd;
            for (std::int64_t y = 0; y < g.oh; ++y) {
              float* dst = row + (z * g.oh + y) * g.ow;
              const std::int64_t iy = y * g.stride - g.pad + kh;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                std::fill(dst, dst + g.ow, 0.f);
                continue;
              }
              const float* src = x + ((c * g.d + iz) * g.h + iy) * g.w;
              if (g.stride == 1) {
                for (std::int64_t xo = 0; xo < g.ow; ++xo) {
                  const std::int64_t ix = xo - g.pad + kw;
                  dst[xo] = (ix >= 0 && ix < g.w) ? src[ix] : 0.f;
                }
              } else {
                for (std::int64_t xo = 0; xo < g.ow; ++xo) {
                  const std::int64_t ix = xo * g.stride - g.pad + kw;
                  dst[xo] = (ix >= 0 && ix < g.w) ? src[ix] : 0.f;
                }
              }
            }
          }
        }
}

void col2im_add(const float* col, const ConvGeom& g, float* dx) {
  const std::int64_t ov = g.out_vox();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (int kd = 0; kd < g.k; ++kd)
      for (int kh = 0; kh < g.k; ++kh)
        for (int kw = 0; kw < g.k; ++kw) {
          const float* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * ov;
          for (std::int64_t z = 0; z < g.od; ++z) {
            const std::int64_t iz = z * g.stride - g.pad + kd;
            if (iz < 0 || iz >= g.d) continue;
            for (std::int64_t y = 0; y < g.oh; ++y) {
              const std::int64_t iy = y * g.stride - g.pad + kh;
              if (iy < 0 || iy >= g.h) continue;
              const float* src = row + (z * g.oh + y) * g.ow;
              float* dst = dx + ((c * g.d + iz) * g.h + iy) * g.w;
              for (std::int64_t xo = 0; xo < g.ow; ++xo) {
                const std::int64_t ix = xo * g.stride - g.pad + kw;
                if (ix >= 0 && ix < g.w) dst[ix] += src[xo];
              }
            }
          }
        }
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dims != b.dims) throw DimensionError(std::string(what) + ": " + dims_str(a.dims) + " vs " + dims_str(b.dims));
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

Var Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.dims != n.value.dims || n.grad.data.size() != n.value.data.size()) n.grad = Tensor(n.value.dims);
  return n.grad;
}

bool Graph::any_requires(std::initializer_list<Var> vs) const {
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return v.valid() && requires_grad(v); });
}

Var Graph::constant(Tensor t) { return push(std::move(t), false, {}); }

Var Graph::parameter(Parameter& p) {
  Var v = push(p.value, true, {});
  node(v).param = &p;
  return v;
}

Var Graph::conv3d(Var x, Var w, Var b, int stride, int pad) {
  const ConvGeom g = conv_geom(value(x), value(w), stride, pad);
  Tensor out({g.co, g.od, g.oh, g.ow});
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  CMapF W(wv.data.data(), g.co, g.rows());
  MapF Y(out.data.data(), g.co, g.out_vox());
  if (is_pointwise(g)) {
    Y.noalias() = W * CMapF(xv.data.data(), g.ci, g.in_vox());
  } else {
    auto& col = scratch(static_cast<std::size_t>(g.rows() * g.out_vox()));
    im2col(xv.data.data(), g, col.data());
    Y.noalias() = W * CMapF(col.data(), g.rows(), g.out_vox());
  }
  if (b.valid()) {
    const auto& bv = value(b).data;
    for (std::int64_t c = 0; c < g.co; ++c) Y.row(c).array() += bv[static_cast<std::size_t>(c)];
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x, w, b}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    CMapF dY(dy.data.data(), g.co, g.out_vox());
    const Tensor& xv2 = G.value(x);
    const float* colp = xv2.data.data();
    float* col = nullptr;
    if (!is_pointwise(g)) {
      col = scratch(static_cast<std::size_t>(g.rows() * g.out_vox())).data();
      im2col(xv2.data.data(), g, col);
      colp = col;
    }
    if (G.requires_grad(w)) {
      MapF dW(G.grad_buffer(w).data.data(), g.co, g.rows());
      dW.noalias() += dY * CMapF(colp, g.rows(), g.out_vox()).transpose();
    }
    if (b.valid() && G.requires_grad(b)) {
      auto& db = G.grad_buffer(b).data;
      for (std::int64_t c = 0; c < g.co; ++c) db[static_cast<std::size_t>(c)] += dY.row(c).sum();
    }
    if (G.requires_grad(x)) {
      CMapF Wm(G.value(w).data.data(), g.co, g.rows());
      Tensor& dx = G.grad_buffer(x);
      if (is_pointwise(g)) {
        MapF(dx.data.data(), g.ci, g.in_vox()).noalias() += Wm.transpose() * dY;
      } else {
        // Reuse the column buffer for the column-space gradient.
        MapF dcol(col, g.rows(), g.out_vox());
        dcol.noalias() = Wm.transpose() * dY;
        col2im_add(col, g, dx.data.data());
      }
    }
  });
}

Var Graph::conv_transpose2(Var x, Var w, Var b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  if (xv.dims.size() != 4 || wv.dims.size() != 5 || wv.dims[0] != xv.dims[0] || wv.dims[2] != 2) {
    throw DimensionError("conv_transpose2: weight " + dims_str(wv.dims) + " incompatible with input " +
                         dims_str(xv.dims));
  }
  const std::int64_t ci = xv.dims[0], d = xv.dims[1], h = xv.dims[2], wd = xv.dims[3];
  const std::int64_t co = wv.dims[1];
  const std::int64_t nv = d * h * wd;
  Tensor out({co, 2 * d, 2 * h, 2 * wd});
  MatF z = CMapF(wv.data.data(), ci, co * 8).transpose() * CMapF(xv.data.data(), ci, nv);
  const std::int64_t OH = 2 * h, OW = 2 * wd;
  auto scatter_index = [=](std::int64_t c, int k, std::int64_t vz, std::int64_t vy, std::int64_t vx) {
    const int a = k >> 2, bb = (k >> 1) & 1, cc = k & 1;
    return ((c * 2 * d + 2 * vz + a) * OH + 2 * vy + bb) * OW + 2 * vx + cc;
  };
  for (std::int64_t c = 0; c < co; ++c) {
    const float bias = b.valid() ? value(b).data[static_cast<std::size_t>(c)] : 0.f;
    for (int k = 0; k < 8; ++k) {
      const float* zr = z.data() + (c * 8 + k) * nv;
      for (std::int64_t vz = 0, p = 0; vz < d; ++vz)
        for (std::int64_t vy = 0; vy < h; ++vy)
          for (std::int64_t vx = 0; vx < wd; ++vx, ++p)
            out.data[static_cast<std::size_t>(scatter_index(c, k, vz, vy, vx))] = zr[p] + bias;
    }
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x, w, b}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    MatF dz(co * 8, nv);
    for (std::int64_t c = 0; c < co; ++c)
      for (int k = 0; k < 8; ++k) {
        float* zr = dz.data() + (c * 8 + k) * nv;
        for (std::int64_t vz = 0, p = 0; vz < d; ++vz)
          for (std::int64_t vy = 0; vy < h; ++vy)
            for (std::int64_t vx = 0; vx < wd; ++vx, ++p)
              zr[p] = dy.data[static_cast<std::size_t>(scatter_index(c, k, vz, vy, vx))];
      }
    if (b.valid() && G.requires_grad(b)) {
      auto& db = G.grad_buffer(b).data;
      for (std::int64_t c = 0; c < co; ++c) db[static_cast<std::size_t>(c)] += dz.middleRows(c * 8, 8).sum();
    }
    if (G.requires_grad(w)) {
      MapF dW(G.grad_buffer(w).data.data(), ci, co * 8);
      dW.noalias() += CMapF(G.value(x).data.data(), ci, nv) * dz.transpose();
    }
    if (G.requires_grad(x)) {
      MapF dX(G.grad_buffer(x).data.data(), ci, nv);
      dX.noalias() += CMapF(G.value(w).data.data(), ci, co * 8) * dz;
    }
  });
}

Var Graph::upsample_nearest2(Var x) {
  const Tensor& xv = value(x);
  if (xv.dims.size() != 4) throw DimensionError("upsample_nearest2: input must be (C, D, H, W)");
  const std::int64_t c = xv.dims[0], d = xv.dims[1], h = xv.dims[2], w = xv.dims[3];
  Tensor out({c, 2 * d, 2 * h, 2 * w});
  std::size_t p = 0;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < 2 * d; ++z)
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx, ++p)
          out.data[p] = xv.data[static_cast<std::size_t>(((ch * d + z / 2) * h + y / 2) * w + xx / 2)];
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    Tensor& dx = G.grad_buffer(x);
    std::size_t q = 0;
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t z = 0; z < 2 * d; ++z)
        for (std::int64_t y = 0; y < 2 * h; ++y)
          for (std::int64_t xx = 0; xx < 2 * w; ++xx, ++q)
            dx.data[static_cast<std::size_t>(((ch * d + z / 2) * h + y / 2) * w + xx / 2)] += dy.data[q];
  });
}

Var Graph::add(Var a, Var b) {
  check_same(value(a), value(b), "add");
  Tensor out = value(a);
  add_into(out, value(b));
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({a, b}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    if (G.requires_grad(a)) add_into(G.grad_buffer(a), dy);
    if (G.requires_grad(b)) add_into(G.grad_buffer(b), dy);
  });
}

Var Graph::concat(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.dims.size() != bv.dims.size() || !std::equal(av.dims.begin() + 1, av.dims.end(), bv.dims.begin() + 1)) {
    throw DimensionError("concat: " + dims_str(av.dims) + " vs " + dims_str(bv.dims));
  }
  Dims od = av.dims;
  od[0] += bv.dims[0];
  Tensor out(od);
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.data.size()));
  const auto na = av.data.size();
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({a, b}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    if (G.requires_grad(a)) {
      auto& da = G.grad_buffer(a).data;
      for (std::size_t i = 0; i < na; ++i) da[i] += dy.data[i];
    }
    if (G.requires_grad(b)) {
      auto& db = G.grad_buffer(b).data;
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy.data[na + i];
    }
  });
}

Var Graph::prelu(Var x, Var alpha) {
  const Tensor& xv = value(x);
  const float a = value(alpha).data.at(0);
  Tensor out(xv.dims);
  for (std::size_t i = 0; i < xv.data.size(); ++i) out.data[i] = xv.data[i] > 0 ? xv.data[i] : a * xv.data[i];
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x, alpha}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    const Tensor& xv2 = G.value(x);
    const float a2 = G.value(alpha).data[0];
    if (G.requires_grad(x)) {
      auto& dx = G.grad_buffer(x).data;
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv2.data[i] > 0 ? dy.data[i] : a2 * dy.data[i];
    }
    if (G.requires_grad(alpha)) {
      double s = 0;
      for (std::size_t i = 0; i < xv2.data.size(); ++i) {
        if (xv2.data[i] <= 0) s += static_cast<double>(dy.data[i]) * xv2.data[i];
      }
      G.grad_buffer(alpha).data[0] += static_cast<float>(s);
    }
  });
}

Var Graph::leaky_relu(Var x, float slope) {
  const Tensor& xv = value(x);
  Tensor out(xv.dims);
  for (std::size_t i = 0; i < xv.data.size(); ++i) out.data[i] = xv.data[i] > 0 ? xv.data[i] : slope * xv.data[i];
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    const Tensor& xv2 = G.value(x);
    auto& dx = G.grad_buffer(x).data;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv2.data[i] > 0 ? dy.data[i] : slope * dy.data[i];
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, float eps) {
  const Tensor& xv = value(x);
  const std::int64_t c = xv.dims.at(0);
  const std::int64_t per = xv.size() / c;
  const auto n = static_cast<double>(xv.size());
  double mean = 0;
  for (float v : xv.data) mean += v;
  mean /= n;
  double var = 0;
  for (float v : xv.data) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Tensor xhat(xv.dims);
  Tensor out(xv.dims);
  const auto& gm = value(gamma).data;
  const auto& bt = value(beta).data;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = ch * per; i < (ch + 1) * per; ++i) {
      const auto k = static_cast<std::size_t>(i);
      xhat.data[k] = static_cast<float>((xv.data[k] - mean) * inv);
      out.data[k] = gm[static_cast<std::size_t>(ch)] * xhat.data[k] + bt[static_cast<std::size_t>(ch)];
    }
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x, gamma, beta}), [=, xhat = std::move(xhat)](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    const auto& gm2 = G.value(gamma).data;
    if (G.requires_grad(gamma) || G.requires_grad(beta)) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double sg = 0, sb = 0;
        for (std::int64_t i = ch * per; i < (ch + 1) * per; ++i) {
          const auto k = static_cast<std::size_t>(i);
          sg += static_cast<double>(dy.data[k]) * xhat.data[k];
          sb += dy.data[k];
        }
        if (G.requires_grad(gamma)) G.grad_buffer(gamma).data[static_cast<std::size_t>(ch)] += static_cast<float>(sg);
        if (G.requires_grad(beta)) G.grad_buffer(beta).data[static_cast<std::size_t>(ch)] += static_cast<float>(sb);
      }
    }
    if (G.requires_grad(x)) {
      double m1 = 0, m2 = 0;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = ch * per; i < (ch + 1) * per; ++i) {
          const auto k = static_cast<std::size_t>(i);
          const double dxh = static_cast<double>(dy.data[k]) * gm2[static_cast<std::size_t>(ch)];
          m1 += dxh;
          m2 += dxh * xhat.data[k];
        }
      m1 /= n;
      m2 /= n;
      auto& dx = G.grad_buffer(x).data;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = ch * per; i < (ch + 1) * per; ++i) {
          const auto k = static_cast<std::size_t>(i);
          const double dxh = static_cast<double>(dy.data[k]) * gm2[static_cast<std::size_t>(ch)];
          dx[k] += static_cast<float>(inv * (dxh - m1 - xhat.data[k] * m2));
        }
    }
  });
}

Var Graph::global_avg_pool(Var x) {
  const Tensor& xv = value(x);
  const std::int64_t c = xv.dims.at(0);
  const std::int64_t per = xv.size() / c;
  Tensor out({c});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::int64_t i = ch * per; i < (ch + 1) * per; ++i) s += xv.data[static_cast<std::size_t>(i)];
    out.data[static_cast<std::size_t>(ch)] = static_cast<float>(s / static_cast<double>(per));
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    auto& dx = G.grad_buffer(x).data;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float g = dy.data[static_cast<std::size_t>(ch)] / static_cast<float>(per);
      for (std::int64_t i = ch * per; i < (ch + 1) * per; ++i) dx[static_cast<std::size_t>(i)] += g;
    }
  });
}

Var Graph::linear(Var x, Var w, Var b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  if (xv.dims.size() != 1 || wv.dims.size() != 2 || wv.dims[1] != xv.dims[0]) {
    throw DimensionError("linear: weight " + dims_str(wv.dims) + " incompatible with input " + dims_str(xv.dims));
  }
  const std::int64_t o = wv.dims[0], f = wv.dims[1];
  Tensor out({o});
  Eigen::Map<Eigen::VectorXf>(out.data.data(), o).noalias() =
      CMapF(wv.data.data(), o, f) * Eigen::Map<const Eigen::VectorXf>(xv.data.data(), f);
  if (b.valid()) {
    for (std::int64_t i = 0; i < o; ++i) out.data[static_cast<std::size_t>(i)] += value(b).data[static_cast<std::size_t>(i)];
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), any_requires({x, w, b}), [=](Graph& G) {
    const Tensor& dy = G.node(self).grad;
    Eigen::Map<const Eigen::VectorXf> dY(dy.data.data(), o);
    if (G.requires_grad(w)) {
      MapF(G.grad_buffer(w).data.data(), o, f).noalias() +=
          dY * Eigen::Map<const Eigen::VectorXf>(G.value(x).data.data(), f).transpose();
    }
    if (b.valid() && G.requires_grad(b)) {
      auto& db = G.grad_buffer(b).data;
      for (std::int64_t i = 0; i < o; ++i) db[static_cast<std::size_t>(i)] += dy.data[static_cast<std::size_t>(i)];
    }
    if (G.requires_grad(x)) {
      Eigen::Map<Eigen::VectorXf>(G.grad_buffer(x).data.data(), f).noalias() +=
          CMapF(G.value(w).data.data(), o, f).transpose() * dY;
    }
  });
}

Var Graph::external_loss(const std::vector<Var>& inputs, double value_in, std::vector<std::vector<double>> grads) {
  if (grads.size() != inputs.size()) throw DimensionError("external_loss: one gradient per input is required");
  bool req = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (grads[i].size() != value(inputs[i]).data.size()) {
      throw DimensionError("external_loss: gradient length mismatch for input " + std::to_string(i));
    }
    req = req || requires_grad(inputs[i]);
  }
  Tensor out({1}, static_cast<float>(value_in));
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  Var v = push(std::move(out), req, [=, grads = std::move(grads)](Graph& G) {
    const double up = G.node(self).grad.data[0];
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!G.requires_grad(inputs[i])) continue;
      auto& dx = G.grad_buffer(inputs[i]).data;
      for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += static_cast<float>(up * grads[i][k]);
    }
  });
  node(v).has_scalar = true;
  node(v).scalar = value_in;
  return v;
}

Var Graph::weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.size() != weights.size()) throw DimensionError("weighted_sum: weight count mismatch");
  double total = 0;
  bool req = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    total += weights[i] * scalar(scalars[i]);
    req = req || requires_grad(scalars[i]);
  }
  Tensor out({1}, static_cast<float>(total));
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  Var v = push(std::move(out), req, [=](Graph& G) {
    const float up = G.node(self).grad.data[0];
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (G.requires_grad(scalars[i])) G.grad_buffer(scalars[i]).data[0] += static_cast<float>(weights[i] * up);
    }
  });
  node(v).has_scalar = true;
  node(v).scalar = total;
  return v;
}

double Graph::scalar(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.has_scalar ? n.scalar : n.value.data.at(0);
}

void Graph::backward(Var root) {
  if (!requires_grad(root)) return;
  Tensor& g = grad_buffer(root);
  std::fill(g.data.begin(), g.data.end(), 1.f);
  for (auto i = static_cast<std::int64_t>(root.id); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.data.empty()) continue;
    if (n.param) {
      add_into(n.param->grad, n.grad);
    } else if (n.back) {
      n.back(*this);
    }
  }
}

}  // namespace distilseg::nn
