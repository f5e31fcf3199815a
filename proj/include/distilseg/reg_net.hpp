#pragma once

#include <functional>
#include <random>
#include <vector>

#include "distilseg/nn/layers.hpp"
#include "distilseg/optim.hpp"
#include "distilseg/reg_losses.hpp"
#include "distilseg/volume.hpp"

namespace distilseg {

struct RegNetConfig {
  std::vector<int> encoder_channels = {16, 32, 32, 32};  // one per downsampling stage
  std::vector<int> decoder_channels = {32, 32, 32, 16};  // one per upsampling stage
  int num_stages = 4;
  int embedding_dim = 64;
  void validate() const;
};

struct RegForwardOutput {
  DisplacementField field;
  Embedding embedding_unlabeled;  // H_u
  Embedding embedding_atlas;      // H_a
};

// Two weight-shared encoders (one parameter set evaluated twice), a decoder over the
// concatenated encodings with skip connections, and a linear projection head on the
// pooled bottleneck for the contrastive term.
class RegNet {
 public:
  RegNet(RegNetConfig cfg, std::uint64_t seed);

  struct Vars {
    nn::Var field;           // (3, D, H, W)
    nn::Var emb_unlabeled;   // (E)
    nn::Var emb_atlas;       // (E)
  };
  Vars forward(nn::Graph& g, nn::Var atlas, nn::Var target);

  const RegNetConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }

  // Names of the parameters used by the encoder; both encoder passes share exactly these.
  std::vector<std::string> encoder_parameter_names() const;

 private:
  std::vector<nn::Var> encode(nn::Graph& g, nn::Var x);

  RegNetConfig cfg_;
  nn::ParamStore params_;
  std::vector<nn::ConvLayer> enc_, dec_;
  nn::ConvLayer refine_, flow_, proj_;
};

nn::Tensor volume_tensor(const Volume& v);

// Deterministic inference; requires equal shapes divisible by 2^num_stages.
RegForwardOutput reg_forward(const Volume& atlas, const Volume& target, const RegNet& net);

struct RegEpochLoss {
  double total = 0.0;
  double sim = 0.0;
  double smooth = 0.0;
  double contrast = 0.0;
};

struct RegTrainResult {
  std::vector<RegEpochLoss> history;  // one entry per epoch
};

using RegEpochCallback = std::function<void(int epoch, const RegEpochLoss&)>;

// Minimizes sim + alpha * smooth + beta * InfoNCE over batches of unlabeled targets.
// Negatives for sample i are the other samples' embeddings in its batch. A trailing
// batch of one sample is merged into the previous batch.
RegTrainResult train_registration(const AtlasPair& atlas, const std::vector<Volume>& unlabeled, RegNet& net,
                                  const RegLossConfig& loss_cfg, const OptimConfig& optim,
                                  const RegEpochCallback& on_epoch = {});

// One synthetic pair per unlabeled volume: the atlas image and labels warped by the
// field predicted for (atlas, unlabeled[i]).
std::vector<SyntheticPair> augment_dataset(const AtlasPair& atlas, const std::vector<Volume>& unlabeled,
                                           const RegNet& net);

}  // namespace distilseg
