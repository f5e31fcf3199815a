#include "distilseg/reg_net.hpp"

#include <algorithm>
#include <numeric>

#include "distilseg/error.hpp"
#include "distilseg/warp.hpp"

namespace distilseg {

namespace {

constexpr float kLeak = 0.2f;

std::vector<double> to_double(const nn::Tensor& t) { return {t.data.begin(), t.data.end()}; }

void check_inputs(const Volume& atlas, const Volume& target, const RegNetConfig& cfg) {
  require_same_shape(atlas.shape(), target.shape(), "reg_forward");
  const std::int64_t f = std::int64_t{1} << cfg.num_stages;
  if (!atlas.shape().divisible_by(f)) {
    throw ConfigError("volume shape " + atlas.shape().str() + " is not divisible by 2^" +
                      std::to_string(cfg.num_stages));
  }
}

}  // namespace

void OptimConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
}

void RegNetConfig::validate() const {
  if (num_stages < 2) throw ConfigError("reg-net num_stages must be >= 2");
  if (static_cast<int>(encoder_channels.size()) != num_stages ||
      static_cast<int>(decoder_channels.size()) != num_stages) {
    throw ConfigError("reg-net channel lists must have num_stages entries");
  }
  for (int c : encoder_channels) {
    if (c < 1) throw ConfigError("reg-net widths must be positive");
  }
  for (int c : decoder_channels) {
    if (c < 1) throw ConfigError("reg-net widths must be positive");
  }
  if (embedding_dim < 1) throw ConfigError("embedding_dim must be positive");
}

nn::Tensor volume_tensor(const Volume& v) {
  const auto& s = v.shape();
  return nn::Tensor({1, s.d, s.h, s.w}, std::vector<float>(v.data().begin(), v.data().end()));
}

RegNet::RegNet(RegNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int S = cfg_.num_stages;
  std::int64_t in = 1;
  for (int i = 0; i < S; ++i) {
    enc_.push_back(nn::add_conv(params_, "enc" + std::to_string(i), in, cfg_.encoder_channels[static_cast<std::size_t>(i)], 3, rng));
    in = cfg_.encoder_channels[static_cast<std::size_t>(i)];
  }
  in = 2 * cfg_.encoder_channels.back();
  for (int j = 0; j < S; ++j) {
    const std::int64_t out = cfg_.decoder_channels[static_cast<std::size_t>(j)];
    dec_.push_back(nn::add_conv(params_, "dec" + std::to_string(j), in, out, 3, rng));
    const std::int64_t skip = (j < S - 1) ? 2 * cfg_.encoder_channels[static_cast<std::size_t>(S - 2 - j)] : 2;
    in = out + skip;
  }
  const std::int64_t last = cfg_.decoder_channels.back();
  refine_ = nn::add_conv(params_, "refine", in, last, 3, rng);
  flow_ = nn::add_conv(params_, "flow", last, 3, 3, rng);
  params_.init_normal(flow_.weight, 1e-5f, rng);
  params_.init_constant(flow_.bias, 0.f);
  proj_ = nn::add_linear(params_, "proj", cfg_.encoder_channels.back(), cfg_.embedding_dim, rng);
}

std::vector<std::string> RegNet::encoder_parameter_names() const {
  std::vector<std::string> out;
  for (const auto& l : enc_) {
    out.push_back(params_[l.weight].name);
    out.push_back(params_[l.bias].name);
  }
  return out;
}

std::vector<nn::Var> RegNet::encode(nn::Graph& g, nn::Var x) {
  std::vector<nn::Var> feats;
  for (const auto& l : enc_) {
    x = g.leaky_relu(nn::apply_conv(g, params_, l, x, 2), kLeak);
    feats.push_back(x);
  }
  return feats;
}

RegNet::Vars RegNet::forward(nn::Graph& g, nn::Var atlas, nn::Var target) {
  const auto ea = encode(g, atlas);
  const auto et = encode(g, target);
  const int S = cfg_.num_stages;
  nn::Var x = g.concat(ea.back(), et.back());
  for (int j = 0; j < S; ++j) {
    x = g.leaky_relu(nn::apply_conv(g, params_, dec_[static_cast<std::size_t>(j)], x), kLeak);
    x = g.upsample_nearest2(x);
    if (j < S - 1) {
      const auto k = static_cast<std::size_t>(S - 2 - j);
      x = g.concat(x, g.concat(ea[k], et[k]));
    } else {
      x = g.concat(x, g.concat(atlas, target));
    }
  }
  x = g.leaky_relu(nn::apply_conv(g, params_, refine_, x), kLeak);
  Vars v;
  v.field = nn::apply_conv(g, params_, flow_, x);
  v.emb_unlabeled = nn::apply_linear(g, params_, proj_, g.global_avg_pool(et.back()));
  v.emb_atlas = nn::apply_linear(g, params_, proj_, g.global_avg_pool(ea.back()));
  return v;
}

RegForwardOutput reg_forward(const Volume& atlas, const Volume& target, const RegNet& net) {
  check_inputs(atlas, target, net.config());
  nn::Graph g;
  // The graph only writes parameter gradients during backward, which never runs here.
  auto& mut = const_cast<RegNet&>(net);
  const auto v = mut.forward(g, g.constant(volume_tensor(atlas)), g.constant(volume_tensor(target)));
  return RegForwardOutput{DisplacementField(atlas.shape(), to_double(g.value(v.field))),
                          Embedding(to_double(g.value(v.emb_unlabeled))), Embedding(to_double(g.value(v.emb_atlas)))};
}

RegTrainResult train_registration(const AtlasPair& atlas, const std::vector<Volume>& unlabeled, RegNet& net,
                                  const RegLossConfig& loss_cfg, const OptimConfig& optim,
                                  const RegEpochCallback& on_epoch) {
  loss_cfg.validate();
  optim.validate();
  if (unlabeled.empty()) throw ValidationError("train_registration: no unlabeled volumes");
  if (unlabeled.size() < 2) {
    throw ValidationError("train_registration: at least 2 unlabeled volumes are needed for contrastive negatives");
  }
  if (static_cast<std::size_t>(optim.batch_size) > unlabeled.size()) {
    throw ValidationError("train_registration: batch size " + std::to_string(optim.batch_size) +
                          " exceeds dataset size " + std::to_string(unlabeled.size()));
  }
  if (loss_cfg.beta > 0 && optim.batch_size < 2) {
    throw ValidationError("train_registration: contrastive term needs batch size >= 2");
  }
  for (const auto& u : unlabeled) check_inputs(atlas.image, u, net.config());

  const Shape3 shape = atlas.image.shape();
  const auto n_vox = static_cast<std::size_t>(shape.voxels());
  const nn::Tensor atlas_t = volume_tensor(atlas.image);
  std::vector<nn::Tensor> targets;
  for (const auto& u : unlabeled) targets.push_back(volume_tensor(u));

  nn::Adam opt(net.params(), nn::AdamConfig{optim.learning_rate});
  net.params().zero_grad();
  std::mt19937_64 rng(optim.seed);
  std::vector<std::size_t> order(unlabeled.size());
  RegTrainResult result;

  for (int epoch = 0; epoch < optim.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(optim.batch_size)) {
      const auto e = std::min(order.size(), s + static_cast<std::size_t>(optim.batch_size));
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s), order.begin() + static_cast<std::ptrdiff_t>(e));
    }
    if (batches.size() > 1 && batches.back().size() == 1) {
      batches[batches.size() - 2].push_back(batches.back()[0]);
      batches.pop_back();
    }

    RegEpochLoss acc;
    for (const auto& batch : batches) {
      nn::Graph g;
      const nn::Var a = g.constant(atlas_t);
      std::vector<RegNet::Vars> outs;
      for (std::size_t i : batch) outs.push_back(net.forward(g, a, g.constant(targets[i])));

      std::vector<Embedding> hu;
      for (const auto& o : outs) hu.emplace_back(to_double(g.value(o.emb_unlabeled)));

      std::vector<nn::Var> terms;
      std::vector<double> weights;
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const Volume& fixed = unlabeled[batch[b]];
        const auto field = to_double(g.value(outs[b].field));
        std::vector<double> warped(n_vox);
        detail::warp_trilinear(atlas.image.data(), shape, field, warped);
        const Volume warped_v(shape, warped, fixed.spacing());
        const DisplacementField field_v(shape, field);

        const LossGrad sim = similarity_loss_grad(fixed, warped_v, loss_cfg);
        std::vector<double> d_field(field.size(), 0.0);
        detail::warp_trilinear_field_grad(atlas.image.data(), shape, field, sim.grad, d_field);
        const LossGrad smooth = smoothness_loss_grad(field_v, loss_cfg);
        for (std::size_t k = 0; k < d_field.size(); ++k) d_field[k] += loss_cfg.alpha * smooth.grad[k];
        const double reg_value = sim.value + loss_cfg.alpha * smooth.value;
        terms.push_back(g.external_loss({outs[b].field}, reg_value, {std::move(d_field)}));
        weights.push_back(inv_b);
        acc.sim += sim.value;
        acc.smooth += smooth.value;

        double contrast = 0.0;
        if (loss_cfg.beta > 0 && batch.size() > 1) {
          std::vector<Embedding> negs;
          std::vector<nn::Var> inputs = {outs[b].emb_unlabeled, outs[b].emb_atlas};
          for (std::size_t j = 0; j < batch.size(); ++j) {
            if (j == b) continue;
            negs.push_back(hu[j]);
            inputs.push_back(outs[j].emb_unlabeled);
          }
          const Embedding ha(to_double(g.value(outs[b].emb_atlas)));
          auto cg = contrastive_loss_grad(hu[b], ha, negs, loss_cfg);
          std::vector<std::vector<double>> grads = {std::move(cg.d_anchor), std::move(cg.d_positive)};
          for (auto& dn : cg.d_negatives) grads.push_back(std::move(dn));
          contrast = cg.value;
          terms.push_back(g.external_loss(inputs, cg.value, std::move(grads)));
          weights.push_back(inv_b * loss_cfg.beta);
        }
        acc.contrast += contrast;
        acc.total += reg_value + loss_cfg.beta * contrast;
      }
      g.backward(g.weighted_sum(terms, weights));
      opt.step();
    }
    const double n = static_cast<double>(unlabeled.size());
    acc.total /= n;
    acc.sim /= n;
    acc.smooth /= n;
    acc.contrast /= n;
    result.history.push_back(acc);
    if (on_epoch) on_epoch(epoch, acc);
  }
  return result;
}

std::vector<SyntheticPair> augment_dataset(const AtlasPair& atlas, const std::vector<Volume>& unlabeled,
                                           const RegNet& net) {
  std::vector<SyntheticPair> out;
  out.reserve(unlabeled.size());
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    const auto fwd = reg_forward(atlas.image, unlabeled[i], net);
    out.emplace_back(warp_volume(atlas.image, fwd.field), warp_labels(atlas.labels, fwd.field), i);
  }
  return out;
}

}  // namespace distilseg
