#pragma once

#include <random>
#include <vector>

#include "distilseg/nn/layers.hpp"

namespace distilseg {

enum class HeadKind { seg, rec };

struct UNetConfig {
  std::vector<int> stage_widths = {8, 16, 32};  // num_stages + 1 entries, full resolution first
  int num_stages = 2;
  HeadKind head = HeadKind::seg;
  int num_classes = 4;  // seg head only
  void validate() const;
  int feature_depth() const noexcept { return 2 * num_stages + 1; }
};

// Residual U-Net. Each block is (conv3, layer norm, PReLU) twice with an identity or
// 1x1 residual path. Downsampling is a stride-2 conv with kernel 2, upsampling a
// kernel-2 transposed conv followed by skip concatenation.
class UNet {
 public:
  UNet(UNetConfig cfg, std::uint64_t seed);

  struct Vars {
    nn::Var output;               // (C, D, H, W) logits or (1, D, H, W) reconstruction
    std::vector<nn::Var> features;  // index 0 is closest to the head
  };
  Vars forward(nn::Graph& g, nn::Var x);

  const UNetConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }

 private:
  struct ResBlock {
    nn::ConvLayer c1, c2;
    std::size_t g1 = 0, b1 = 0, g2 = 0, b2 = 0, a1 = 0, a2 = 0;
    bool has_proj = false;
    nn::ConvLayer proj;
  };
  ResBlock add_block(const std::string& name, std::int64_t in, std::int64_t out, std::mt19937_64& rng);
  nn::Var block(nn::Graph& g, const ResBlock& b, nn::Var x);

  UNetConfig cfg_;
  nn::ParamStore params_;
  std::vector<ResBlock> enc_, dec_;
  std::vector<nn::ConvLayer> down_, up_;
  nn::ConvLayer head_;
};

}  // namespace distilseg
