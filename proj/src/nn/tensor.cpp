#include "distilseg/nn/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "distilseg/error.hpp"

namespace distilseg::nn {

std::int64_t numel(const Dims& d) {
  return std::accumulate(d.begin(), d.end(), std::int64_t{1}, std::multiplies<>());
}

std::string dims_str(const Dims& d) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? ", " : "") << d[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(Dims d, float fill) : dims(std::move(d)), data(static_cast<std::size_t>(numel(dims)), fill) {}

Tensor::Tensor(Dims d, const std::vector<float>& values) : dims(std::move(d)), data(values.begin(), values.end()) {
  if (static_cast<std::int64_t>(data.size()) != numel(dims)) {
    throw DimensionError("Tensor: " + std::to_string(data.size()) + " values for dims " + dims_str(dims));
  }
}

void Tensor::zero() { std::fill(data.begin(), data.end(), 0.f); }

std::size_t ParamStore::add(std::string name, Dims dims) {
  Parameter p;
  p.name = std::move(name);
  p.value = Tensor(dims);
  p.grad = Tensor(std::move(dims));
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::int64_t ParamStore::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.zero();
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParamStore::init_uniform(std::size_t i, float bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& v : params_[i].value.data) v = dist(rng);
}

void ParamStore::init_normal(std::size_t i, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.f, stddev);
  for (auto& v : params_[i].value.data) v = dist(rng);
}

void ParamStore::init_constant(std::size_t i, float v) {
  std::fill(params_[i].value.data.begin(), params_[i].value.data.end(), v);
}

}  // namespace distilseg::nn
