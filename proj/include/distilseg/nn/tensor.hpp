#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <random>
#include <string>
#include <vector>

namespace distilseg::nn {

using Dims = std::vector<std::int64_t>;

// Fixed 64-byte alignment so vectorized kernels take the same code path on every
// allocation; with only the default 16-byte guarantee, AVX loop peeling (and so the
// summation order) would depend on heap addresses.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

std::int64_t numel(const Dims& d);
std::string dims_str(const Dims& d);

// Dense float tensor, C order. Activations are (C, D, H, W); no batch axis.
struct Tensor {
  Dims dims;
  FloatBuffer data;

  Tensor() = default;
  explicit Tensor(Dims d, float fill = 0.f);
  Tensor(Dims d, const std::vector<float>& values);

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data.size()); }
  bool empty() const noexcept { return data.empty(); }
  void zero();
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Owns a network's parameters. Indices stay valid for the store's lifetime; copying the
// store deep-copies every tensor.
class ParamStore {
 public:
  std::size_t add(std::string name, Dims dims);
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const noexcept { return params_.size(); }
  std::int64_t scalar_count() const;

  std::vector<Parameter>::iterator begin() { return params_.begin(); }
  std::vector<Parameter>::iterator end() { return params_.end(); }
  std::vector<Parameter>::const_iterator begin() const { return params_.begin(); }
  std::vector<Parameter>::const_iterator end() const { return params_.end(); }

  void zero_grad();
  const Parameter* find(const std::string& name) const;

  void init_uniform(std::size_t i, float bound, std::mt19937_64& rng);
  void init_normal(std::size_t i, float stddev, std::mt19937_64& rng);
  void init_constant(std::size_t i, float v);

 private:
  std::vector<Parameter> params_;
};

}  // namespace distilseg::nn
