#pragma once

#include <functional>
#include <vector>

#include "distilseg/nn/tensor.hpp"

namespace distilseg::nn {

struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

// Records a forward computation and replays it in reverse for gradients.
// Gradients of parameter leaves accumulate into Parameter::grad.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t);
  Var parameter(Parameter& p);

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // w: (Co, Ci, k, k, k), b: (Co).
  Var conv3d(Var x, Var w, Var b, int stride, int pad);
  // Kernel 2, stride 2. w: (Ci, Co, 2, 2, 2), b: (Co).
  Var conv_transpose2(Var x, Var w, Var b);
  Var upsample_nearest2(Var x);
  Var add(Var a, Var b);
  Var concat(Var a, Var b);  // along channels
  Var prelu(Var x, Var alpha);
  Var leaky_relu(Var x, float slope);
  // Normalizes over all of (C, D, H, W), then applies a per-channel affine map.
  Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);
  Var global_avg_pool(Var x);  // (C, ...) -> (C)
  Var linear(Var x, Var w, Var b);  // x: (F), w: (O, F), b: (O)

  // Scalar node whose gradients with respect to `inputs` were computed externally.
  Var external_loss(const std::vector<Var>& inputs, double value, std::vector<std::vector<double>> grads);
  // Weighted sum of scalar nodes.
  Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights);
  double scalar(Var v) const;

  void backward(Var root);

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool has_scalar = false;
    double scalar = 0.0;  // double-precision value of loss nodes
    std::function<void(Graph&)> back;
  };

  Var push(Tensor value, bool requires_grad, std::function<void(Graph&)> back);
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  Tensor& grad_buffer(Var v);
  bool any_requires(std::initializer_list<Var> vs) const;

  std::vector<Node> nodes_;
};

}  // namespace distilseg::nn
