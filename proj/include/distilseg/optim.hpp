#pragma once

#include <cstdint>

namespace distilseg {

struct OptimConfig {
  int epochs = 0;
  double learning_rate = 1e-4;
  int batch_size = 2;
  std::uint64_t seed = 0;
  void validate() const;
};

}  // namespace distilseg
