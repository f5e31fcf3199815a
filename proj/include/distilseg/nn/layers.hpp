#pragma once

#include <random>
#include <string>

#include "distilseg/nn/graph.hpp"

namespace distilseg::nn {

// Indices of a layer's weight and bias inside a ParamStore.
struct ConvLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int kernel = 3;
};

// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
ConvLayer add_conv(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch, int kernel,
                   std::mt19937_64& rng);
ConvLayer add_conv_transpose2(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
                              std::mt19937_64& rng);
ConvLayer add_linear(ParamStore& ps, const std::string& name, std::int64_t in_f, std::int64_t out_f,
                     std::mt19937_64& rng);

// Odd kernels pad by k/2, so stride s maps n to n/s for even n; even kernels do not pad.
Var apply_conv(Graph& g, ParamStore& ps, const ConvLayer& l, Var x, int stride = 1);
Var apply_conv_transpose2(Graph& g, ParamStore& ps, const ConvLayer& l, Var x);
Var apply_linear(Graph& g, ParamStore& ps, const ConvLayer& l, Var x);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParamStore& params, AdamConfig cfg);
  // Applies one update from the accumulated gradients, then clears them.
  void step();
  std::int64_t steps() const noexcept { return t_; }

 private:
  ParamStore* params_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace distilseg::nn
