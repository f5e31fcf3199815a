#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "distilseg/distill.hpp"
#include "distilseg/optim.hpp"
#include "distilseg/reg_losses.hpp"
#include "distilseg/reg_net.hpp"
#include "distilseg/toy_data.hpp"

namespace distilseg {

enum class AtlasMode {
  manifest,  // the atlas pair listed in the dataset manifest
  fixed,     // explicit image and label paths
  auto_select,  // highest mean NCC among labeled training candidates
};

struct AtlasConfig {
  AtlasMode mode = AtlasMode::manifest;
  std::filesystem::path image;   // fixed mode
  std::filesystem::path labels;  // fixed mode
  std::string reference = "train";  // auto mode: "train" or "test"
};

struct PipelineConfig {
  std::filesystem::path manifest;  // dataset index (see write_toy_dataset for the schema)
  AtlasConfig atlas;
  RegNetConfig reg_net;
  RegLossConfig reg_loss;
  OptimConfig reg_optim{500, 1e-4, 2, 0};
  DistillConfig distill;
  std::vector<int> eval_labels;  // empty: all foreground classes
  std::filesystem::path output_dir = "distilseg_out";
  std::uint64_t seed = 0;
  double unlabeled_fraction = 1.0;  // share of training volumes used as unlabeled targets
  bool dump_features = false;
  bool plots = true;

  // Fills defaults from the configured seed and checks ranges. Does not touch the filesystem.
  void validate() const;
  // Every referenced input path must exist.
  void check_paths() const;
};

PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::filesystem::path& path);

// Output root: DISTILSEG_OUTPUT_ROOT, when set, replaces the parent of relative output dirs.
std::filesystem::path resolve_output_dir(const PipelineConfig& cfg);

nlohmann::json to_json(const ToySpec& s);
ToySpec toy_spec_from_json(const nlohmann::json& j);

}  // namespace distilseg
