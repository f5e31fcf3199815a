#include "distilseg/nn/layers.hpp"

#include <cmath>

namespace distilseg::nn {

namespace {

ConvLayer add_layer(ParamStore& ps, const std::string& name, Dims wdims, std::int64_t out, std::int64_t fan_in,
                    int kernel, std::mt19937_64& rng) {
  ConvLayer l;
  l.kernel = kernel;
  l.weight = ps.add(name + ".weight", std::move(wdims));
  l.bias = ps.add(name + ".bias", {out});
  const float bound = 1.f / std::sqrt(static_cast<float>(fan_in));
  ps.init_uniform(l.weight, bound, rng);
  ps.init_uniform(l.bias, bound, rng);
  return l;
}

}  // namespace

ConvLayer add_conv(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch, int kernel,
                   std::mt19937_64& rng) {
  return add_layer(ps, name, {out_ch, in_ch, kernel, kernel, kernel}, out_ch, in_ch * kernel * kernel * kernel,
                   kernel, rng);
}

ConvLayer add_conv_transpose2(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
                              std::mt19937_64& rng) {
  return add_layer(ps, name, {in_ch, out_ch, 2, 2, 2}, out_ch, out_ch * 8, 2, rng);
}

ConvLayer add_linear(ParamStore& ps, const std::string& name, std::int64_t in_f, std::int64_t out_f,
                     std::mt19937_64& rng) {
  return add_layer(ps, name, {out_f, in_f}, out_f, in_f, 1, rng);
}

Var apply_conv(Graph& g, ParamStore& ps, const ConvLayer& l, Var x, int stride) {
  const int pad = l.kernel % 2 == 1 ? l.kernel / 2 : 0;
  return g.conv3d(x, g.parameter(ps[l.weight]), g.parameter(ps[l.bias]), stride, pad);
}

Var apply_conv_transpose2(Graph& g, ParamStore& ps, const ConvLayer& l, Var x) {
  return g.conv_transpose2(x, g.parameter(ps[l.weight]), g.parameter(ps[l.bias]));
}

Var apply_linear(Graph& g, ParamStore& ps, const ConvLayer& l, Var x) {
  return g.linear(x, g.parameter(ps[l.weight]), g.parameter(ps[l.bias]));
}

Adam::Adam(ParamStore& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.data.size(), 0.0);
    v_.emplace_back(p.value.data.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t i = 0;
  for (auto& p : *params_) {
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.value.data.size(); ++k) {
      const double g = p.grad.data[k];
      m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g;
      v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g * g;
      const double step = cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      p.value.data[k] = static_cast<float>(p.value.data[k] - step);
    }
    p.grad.zero();
    ++i;
  }
}

}  // namespace distilseg::nn
