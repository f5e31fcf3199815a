#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "distilseg/config.hpp"
#include "distilseg/metrics.hpp"
#include "distilseg/unet.hpp"

namespace distilseg {

using Logger = std::function<void(const std::string&)>;

// Index of the candidate with the highest mean ncc_score against the references; the
// lowest index wins ties.
std::size_t select_atlas(const std::vector<Volume>& candidates, const std::vector<Volume>& references);

// Volumes after min-max normalization to [0, 1].
struct Dataset {
  AtlasPair atlas;
  std::vector<Volume> unlabeled;
  std::vector<Volume> test_images;
  std::vector<LabelMap> test_labels;
  int num_classes = 0;
  std::string atlas_source;
};
Dataset load_dataset(const PipelineConfig& cfg);

// Variants: baseline-abs, m1, m2, m3, full, hint-l2, hint-cosine, hint-layers-<k>.
PipelineConfig apply_variant(const PipelineConfig& cfg, const std::string& variant);
std::vector<std::string> known_variants();

struct PipelineResult {
  EvalReport report;
  std::filesystem::path report_path;
  std::filesystem::path run_dir;
};

// Stage 1 (train registration, augment), stage 2 (distillation) and stage 3 (student
// inference and evaluation). Completed stages are skipped when their marker matches the
// current configuration.
PipelineResult run_pipeline(const PipelineConfig& cfg, const Logger& log = {});

struct AblationResult {
  std::map<std::string, EvalReport> reports;
  std::filesystem::path comparison_path;
};
AblationResult run_ablation(const PipelineConfig& cfg, const std::vector<std::string>& variants,
                            const Logger& log = {});

// Stage building blocks shared with the command-line tool.
struct RegStageOutput {
  std::filesystem::path checkpoint;
  std::vector<SyntheticPair> pairs;
};
RegStageOutput run_registration_stage(const PipelineConfig& cfg, const Dataset& ds, const Logger& log = {});

struct DistillStageOutput {
  std::filesystem::path teacher_checkpoint;
  std::filesystem::path student_checkpoint;
};
DistillStageOutput run_distill_stage(const PipelineConfig& cfg, const Dataset& ds,
                                     const std::vector<SyntheticPair>& pairs, const std::filesystem::path& run_dir,
                                     const Logger& log = {});

// Loads a student from its checkpoint alone and predicts every image. No other model
// file is opened; an audit of opened checkpoints enforces it.
std::vector<LabelMap> infer_from_checkpoint(const std::filesystem::path& student_checkpoint,
                                            const std::vector<Volume>& images);
UNet load_unet(const std::filesystem::path& checkpoint);
RegNet load_reg_net(const std::filesystem::path& checkpoint);

std::vector<std::string> report_header(const PipelineConfig& cfg, const std::string& variant);
std::vector<int> eval_labels_of(const PipelineConfig& cfg, int num_classes);

// Reads and writes synthetic pairs as raw containers plus pairs.json.
void save_pairs(const std::filesystem::path& dir, const std::vector<SyntheticPair>& pairs);
std::vector<SyntheticPair> load_pairs(const std::filesystem::path& dir);

}  // namespace distilseg
