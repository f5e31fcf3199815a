#include "distilseg/unet.hpp"

#include "distilseg/error.hpp"

namespace distilseg {

void UNetConfig::validate() const {
  if (num_stages < 1) throw ConfigError("unet num_stages must be >= 1");
  if (static_cast<int>(stage_widths.size()) != num_stages + 1) {
    throw ConfigError("unet stage_widths must have num_stages + 1 entries");
  }
  for (int w : stage_widths) {
    if (w < 1) throw ConfigError("unet widths must be positive");
  }
  if (head == HeadKind::seg && num_classes < 2) throw ConfigError("seg head needs at least 2 classes");
}

UNet::ResBlock UNet::add_block(const std::string& name, std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
  ResBlock b;
  b.c1 = nn::add_conv(params_, name + ".conv1", in, out, 3, rng);
  b.g1 = params_.add(name + ".norm1.weight", {out});
  b.b1 = params_.add(name + ".norm1.bias", {out});
  b.a1 = params_.add(name + ".act1", {1});
  b.c2 = nn::add_conv(params_, name + ".conv2", out, out, 3, rng);
  b.g2 = params_.add(name + ".norm2.weight", {out});
  b.b2 = params_.add(name + ".norm2.bias", {out});
  b.a2 = params_.add(name + ".act2", {1});
  params_.init_constant(b.g1, 1.f);
  params_.init_constant(b.g2, 1.f);
  params_.init_constant(b.a1, 0.25f);
  params_.init_constant(b.a2, 0.25f);
  if (in != out) {
    b.has_proj = true;
    b.proj = nn::add_conv(params_, name + ".proj", in, out, 1, rng);
  }
  return b;
}

nn::Var UNet::block(nn::Graph& g, const ResBlock& b, nn::Var x) {
  auto p = [&](std::size_t i) { return g.parameter(params_[i]); };
  nn::Var h = nn::apply_conv(g, params_, b.c1, x);
  h = g.prelu(g.layer_norm(h, p(b.g1), p(b.b1)), p(b.a1));
  h = g.layer_norm(nn::apply_conv(g, params_, b.c2, h), p(b.g2), p(b.b2));
  const nn::Var res = b.has_proj ? nn::apply_conv(g, params_, b.proj, x) : x;
  return g.prelu(g.add(h, res), p(b.a2));
}

UNet::UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const auto& w = cfg_.stage_widths;
  const int S = cfg_.num_stages;
  enc_.push_back(add_block("enc0", 1, w[0], rng));
  for (int s = 1; s <= S; ++s) {
    const auto prev = w[static_cast<std::size_t>(s - 1)];
    down_.push_back(nn::add_conv(params_, "down" + std::to_string(s), prev, prev, 2, rng));
    enc_.push_back(add_block("enc" + std::to_string(s), prev, w[static_cast<std::size_t>(s)], rng));
  }
  for (int s = S - 1; s >= 0; --s) {
    const auto ws = w[static_cast<std::size_t>(s)];
    up_.push_back(nn::add_conv_transpose2(params_, "up" + std::to_string(s), w[static_cast<std::size_t>(s + 1)], ws, rng));
    dec_.push_back(add_block("dec" + std::to_string(s), 2 * ws, ws, rng));
  }
  const int out_ch = cfg_.head == HeadKind::seg ? cfg_.num_classes : 1;
  head_ = nn::add_conv(params_, cfg_.head == HeadKind::seg ? "seg_head" : "rec_head", w[0], out_ch, 1, rng);
}

UNet::Vars UNet::forward(nn::Graph& g, nn::Var x) {
  const int S = cfg_.num_stages;
  std::vector<nn::Var> enc;
  enc.push_back(block(g, enc_[0], x));
  for (int s = 1; s <= S; ++s) {
    const nn::Var d = nn::apply_conv(g, params_, down_[static_cast<std::size_t>(s - 1)], enc.back(), 2);
    enc.push_back(block(g, enc_[static_cast<std::size_t>(s)], d));
  }
  std::vector<nn::Var> dec;  // deepest first
  nn::Var h = enc.back();
  for (int i = 0; i < S; ++i) {
    const int s = S - 1 - i;
    h = nn::apply_conv_transpose2(g, params_, up_[static_cast<std::size_t>(i)], h);
    h = block(g, dec_[static_cast<std::size_t>(i)], g.concat(h, enc[static_cast<std::size_t>(s)]));
    dec.push_back(h);
  }
  Vars v;
  v.output = nn::apply_conv(g, params_, head_, h);
  // Output path order: decoder stages from full resolution down, bottleneck, then encoder stages upward.
  for (auto it = dec.rbegin(); it != dec.rend(); ++it) v.features.push_back(*it);
  v.features.push_back(enc.back());
  for (int s = S - 1; s >= 0; --s) v.features.push_back(enc[static_cast<std::size_t>(s)]);
  return v;
}

}  // namespace distilseg
