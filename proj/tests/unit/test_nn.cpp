#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>

#include "distilseg/checkpoint.hpp"
#include "distilseg/error.hpp"
#include "distilseg/nn/layers.hpp"

using namespace distilseg;
using namespace distilseg::nn;

namespace {

Tensor random_tensor(Dims d, std::mt19937_64& rng, float scale = 1.f) {
  Tensor t(std::move(d));
  std::normal_distribution<float> n(0.f, scale);
  for (auto& v : t.data) v = n(rng);
  return t;
}

// Keeps samples clear of the kink at zero so central differences stay on one side.
Tensor away_from_zero(Tensor t) {
  for (auto& v : t.data) v += v < 0 ? -0.1f : 0.1f;
  return t;
}

// Builds an op on leaf tensors and returns the output var.
using OpBuilder = std::function<Var(Graph&, std::vector<Var>&)>;

// Contracts the op output with fixed random weights and compares the analytic
// gradient of every leaf against central differences.
void check_op_gradients(std::vector<Tensor> leaves, const OpBuilder& build, std::uint64_t seed, double tol = 2e-2) {
  std::mt19937_64 rng(seed);
  std::vector<Parameter> params(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    params[i].value = leaves[i];
    params[i].grad = Tensor(leaves[i].dims);
  }
  std::vector<double> weights;
  auto eval = [&](bool backward) {
    Graph g;
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(g.parameter(p));
    const Var out = build(g, vars);
    const auto& o = g.value(out).data;
    if (weights.empty()) {
      std::normal_distribution<double> n(0.0, 1.0);
      for (std::size_t i = 0; i < o.size(); ++i) weights.push_back(n(rng));
    }
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += weights[i] * o[i];
    if (backward) g.backward(g.external_loss({out}, s, {weights}));
    return s;
  };
  eval(true);
  for (std::size_t li = 0; li < params.size(); ++li) {
    const auto analytic = params[li].grad.data;
    const std::size_t n = params[li].value.data.size();
    const std::size_t probes = std::min<std::size_t>(n, 12);
    for (std::size_t k = 0; k < probes; ++k) {
      const std::size_t idx = (k * 7919) % n;
      const float orig = params[li].value.data[idx];
      const float h = 1e-2f;
      params[li].value.data[idx] = orig + h;
      const double up = eval(false);
      params[li].value.data[idx] = orig - h;
      const double dn = eval(false);
      params[li].value.data[idx] = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double a = analytic[idx];
      CAPTURE(li);
      CAPTURE(idx);
      CAPTURE(a);
      CAPTURE(fd);
      CHECK(std::abs(fd - a) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

}  // namespace

TEST_CASE("conv3d gradients, stride 1 and 2, kernels 1 2 3") {
  std::mt19937_64 rng(1);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{2, 2, 0}, std::tuple{1, 1, 0}}) {
    CAPTURE(k);
    CAPTURE(stride);
    check_op_gradients({random_tensor({2, 4, 4, 6}, rng), random_tensor({3, 2, k, k, k}, rng, 0.3f), random_tensor({3}, rng)},
                       [=](Graph& g, std::vector<Var>& v) { return g.conv3d(v[0], v[1], v[2], stride, pad); }, 2);
  }
}

TEST_CASE("conv3d matches a direct loop convolution") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 5, 4, 6}, rng);
  const Tensor w = random_tensor({3, 2, 3, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  Graph g;
  const auto& y = g.value(g.conv3d(g.constant(x), g.constant(w), g.constant(b), 2, 1));
  REQUIRE(y.dims == Dims{3, 3, 2, 3});
  for (int co = 0; co < 3; ++co)
    for (int z = 0; z < 3; ++z)
      for (int yy = 0; yy < 2; ++yy)
        for (int xx = 0; xx < 3; ++xx) {
          double s = b.data[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < 2; ++ci)
            for (int a = 0; a < 3; ++a)
              for (int c = 0; c < 3; ++c)
                for (int e = 0; e < 3; ++e) {
                  const int iz = 2 * z - 1 + a, iy = 2 * yy - 1 + c, ix = 2 * xx - 1 + e;
                  if (iz < 0 || iz >= 5 || iy < 0 || iy >= 4 || ix < 0 || ix >= 6) continue;
                  s += static_cast<double>(w.data[static_cast<std::size_t>((((co * 2 + ci) * 3 + a) * 3 + c) * 3 + e)]) *
                       x.data[static_cast<std::size_t>(((ci * 5 + iz) * 4 + iy) * 6 + ix)];
                }
          CHECK(y.data[static_cast<std::size_t>(((co * 3 + z) * 2 + yy) * 3 + xx)] == doctest::Approx(s).epsilon(1e-5));
        }
}

TEST_CASE("conv_transpose2 inverts the stride-2 kernel-2 conv layout") {
  std::mt19937_64 rng(4);
  check_op_gradients({random_tensor({3, 2, 2, 3}, rng), random_tensor({3, 2, 2, 2, 2}, rng, 0.5f), random_tensor({2}, rng)},
                     [](Graph& g, std::vector<Var>& v) { return g.conv_transpose2(v[0], v[1], v[2]); }, 5);
  // Adjoint identity: <convT(x), y> == <x, conv_k2s2(y)> with the same weights and no bias.
  const Tensor x = random_tensor({3, 2, 2, 2}, rng);
  const Tensor w = random_tensor({3, 2, 2, 2, 2}, rng);  // (Ci, Co, 2, 2, 2)
  const Tensor y = random_tensor({2, 4, 4, 4}, rng);
  Tensor wt({3, 2, 2, 2, 2});  // conv weight (Co=3, Ci=2, ...) is the same array
  wt.data = w.data;
  Graph g;
  const Tensor up = g.value(g.conv_transpose2(g.constant(x), g.constant(w), Var{}));
  const Tensor dn = g.value(g.conv3d(g.constant(y), g.constant(wt), Var{}, 2, 0));
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < up.data.size(); ++i) lhs += static_cast<double>(up.data[i]) * y.data[i];
  for (std::size_t i = 0; i < dn.data.size(); ++i) rhs += static_cast<double>(dn.data[i]) * x.data[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
}

TEST_CASE("elementwise and structural op gradients") {
  std::mt19937_64 rng(5);
  SUBCASE("upsample") {
    check_op_gradients({random_tensor({2, 2, 2, 4}, rng)}, [](Graph& g, std::vector<Var>& v) { return g.upsample_nearest2(v[0]); }, 6);
  }
  SUBCASE("add") {
    check_op_gradients({random_tensor({2, 2, 2, 2}, rng), random_tensor({2, 2, 2, 2}, rng)},
                       [](Graph& g, std::vector<Var>& v) { return g.add(v[0], v[1]); }, 7);
  }
  SUBCASE("concat") {
    check_op_gradients({random_tensor({1, 2, 2, 2}, rng), random_tensor({3, 2, 2, 2}, rng)},
                       [](Graph& g, std::vector<Var>& v) { return g.concat(v[0], v[1]); }, 8);
  }
  SUBCASE("prelu") {
    check_op_gradients({away_from_zero(random_tensor({2, 3, 3, 3}, rng)), Tensor({1}, 0.25f)},
                       [](Graph& g, std::vector<Var>& v) { return g.prelu(v[0], v[1]); }, 9);
  }
  SUBCASE("leaky_relu") {
    check_op_gradients({away_from_zero(random_tensor({2, 3, 3, 3}, rng))}, [](Graph& g, std::vector<Var>& v) { return g.leaky_relu(v[0], 0.2f); }, 10);
  }
  SUBCASE("layer_norm") {
    check_op_gradients({random_tensor({3, 2, 3, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng)},
                       [](Graph& g, std::vector<Var>& v) { return g.layer_norm(v[0], v[1], v[2]); }, 11);
  }
  SUBCASE("global_avg_pool") {
    check_op_gradients({random_tensor({4, 2, 2, 2}, rng)}, [](Graph& g, std::vector<Var>& v) { return g.global_avg_pool(v[0]); }, 12);
  }
  SUBCASE("linear") {
    check_op_gradients({random_tensor({5}, rng), random_tensor({3, 5}, rng), random_tensor({3}, rng)},
                       [](Graph& g, std::vector<Var>& v) { return g.linear(v[0], v[1], v[2]); }, 13);
  }
}

TEST_CASE("layer norm output has zero mean and unit variance before the affine map") {
  std::mt19937_64 rng(14);
  Graph g;
  const auto& y = g.value(g.layer_norm(g.constant(random_tensor({2, 3, 3, 3}, rng, 3.f)), g.constant(Tensor({2}, 1.f)),
                                       g.constant(Tensor({2}, 0.f))));
  double m = 0, v = 0;
  for (float f : y.data) m += f;
  m /= static_cast<double>(y.data.size());
  for (float f : y.data) v += (f - m) * (f - m);
  v /= static_cast<double>(y.data.size());
  CHECK(m == doctest::Approx(0.0).epsilon(0).scale(1).epsilon(1e-5));
  CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("a parameter used twice accumulates both gradient contributions") {
  Parameter p;
  p.value = Tensor({2}, std::vector<float>{1.f, 2.f});
  p.grad = Tensor({2});
  Graph g;
  const Var a = g.parameter(p);
  const Var b = g.parameter(p);
  const Var s = g.add(a, b);
  g.backward(g.external_loss({s}, 0.0, {{1.0, 1.0}}));
  CHECK(p.grad.data[0] == 2.f);
  CHECK(p.grad.data[1] == 2.f);
}

TEST_CASE("weighted_sum keeps double precision values and scales gradients") {
  Parameter p;
  p.value = Tensor({1}, 0.f);
  p.grad = Tensor({1});
  Graph g;
  const Var x = g.parameter(p);
  const Var l1 = g.external_loss({x}, 0.1234567890123, {{2.0}});
  const Var l2 = g.external_loss({x}, 1.0, {{3.0}});
  const Var t = g.weighted_sum({l1, l2}, {0.5, 0.25});
  CHECK(g.scalar(t) == doctest::Approx(0.5 * 0.1234567890123 + 0.25).epsilon(1e-15));
  g.backward(t);
  CHECK(p.grad.data[0] == doctest::Approx(0.5 * 2 + 0.25 * 3));
}

TEST_CASE("op shape errors throw DimensionError") {
  Graph g;
  const Var a = g.constant(Tensor({1, 2, 2, 2}));
  const Var b = g.constant(Tensor({1, 3, 2, 2}));
  CHECK_THROWS_AS(g.add(a, b), DimensionError);
  CHECK_THROWS_AS(g.concat(a, b), DimensionError);
  CHECK_THROWS_AS(g.conv3d(a, g.constant(Tensor({2, 2, 3, 3, 3})), Var{}, 1, 1), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1.f}), DimensionError);
}

TEST_CASE("Adam moves a quadratic towards its minimum") {
  ParamStore ps;
  const auto i = ps.add("x", {3});
  ps.init_constant(i, 5.f);
  Adam opt(ps, AdamConfig{0.1});
  for (int s = 0; s < 300; ++s) {
    for (std::size_t k = 0; k < 3; ++k) ps[i].grad.data[k] = 2.f * (ps[i].value.data[k] - 1.f);
    opt.step();
  }
  for (float v : ps[i].value.data) CHECK(v == doctest::Approx(1.f).epsilon(1e-2));
  CHECK(opt.steps() == 300);
  CHECK(ps[i].grad.data[0] == 0.f);
}

TEST_CASE("checkpoint container round-trips bit-exactly") {
  std::mt19937_64 rng(20);
  ParamStore ps;
  ps.add("a.weight", {2, 3, 3, 3, 3});
  ps.add("a.bias", {2});
  ps.init_uniform(0, 1.f, rng);
  ps.init_uniform(1, 1.f, rng);
  const auto path = std::filesystem::temp_directory_path() / "distilseg_ckpt_roundtrip.ckpt";
  nlohmann::json meta{{"epoch", 3}, {"history", {1.5, 0.25}}};
  save_checkpoint(path, meta, ps);
  const Checkpoint c = read_checkpoint(path);
  CHECK(c.meta == meta);
  ParamStore other;
  other.add("a.weight", {2, 3, 3, 3, 3});
  other.add("a.bias", {2});
  load_into(c, other);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    REQUIRE(other[i].value.data.size() == ps[i].value.data.size());
    CHECK(std::memcmp(other[i].value.data.data(), ps[i].value.data.data(), ps[i].value.data.size() * sizeof(float)) == 0);
  }
  save_checkpoint(path.string() + "2", c);
  std::ifstream f1(path, std::ios::binary), f2(path.string() + "2", std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  ParamStore wrong;
  wrong.add("a.weight", {2, 3, 3, 3, 3});
  wrong.add("b.bias", {2});
  CHECK_THROWS_AS(load_into(c, wrong), ConfigError);
  CHECK_THROWS_AS(read_checkpoint(path.string() + ".missing"), IoError);
}
