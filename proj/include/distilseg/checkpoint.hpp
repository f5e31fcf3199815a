#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "distilseg/nn/tensor.hpp"

namespace distilseg {

// Container layout (little endian):
//   8 bytes  magic "DSCKPT01"
//   u64      length L of the JSON header
//   L bytes  JSON: {"meta": {...}, "tensors": [{"name", "dims", "offset", "count"}, ...]}
//   payload  float32 tensor data; offsets are in floats from the payload start
// "meta" carries the config echo, epoch counter and loss history.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, nn::Tensor>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta, const nn::ParamStore& params);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies tensors into a store by name; names and dims must match exactly.
void load_into(const Checkpoint& ckpt, nn::ParamStore& params);
Checkpoint to_checkpoint(const nlohmann::json& meta, const nn::ParamStore& params);

// Every checkpoint opened for reading is recorded here, so callers can audit which
// model files a stage touched.
std::vector<std::filesystem::path> opened_checkpoints();
void clear_opened_checkpoints();

}  // namespace distilseg
