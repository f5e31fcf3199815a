#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "distilseg/volume.hpp"

namespace distilseg {

// 2|P∩T| / (|P|+|T|) for one label; 1.0 when both masks are empty.
double dice_per_label(const LabelMap& pred, const LabelMap& truth, int label);

// 95th percentile (linear interpolation) of the pooled, bidirectional boundary-to-boundary
// distances in mm. Boundary voxels are foreground voxels with a background (or out-of-grid)
// face neighbour. Empty in either map yields nullopt.
std::optional<double> hd95(const LabelMap& pred, const LabelMap& truth, int label, const Spacing& spacing);

struct LabelScore {
  double dsc = 0.0;
  std::optional<double> hd95_mm;
};

struct CaseScores {
  std::map<int, LabelScore> per_label;
};

struct EvalReport {
  std::map<int, LabelScore> per_label;  // mean over cases; hd95 over defined cases only
  double mean_dsc = 0.0;                // mean over cases of the per-case label-mean DSC
  double std_dsc = 0.0;                 // population std of the same
  std::optional<double> mean_hd95;
  std::optional<double> std_hd95;
  std::size_t undefined_hd95 = 0;
  std::vector<CaseScores> cases;
  std::vector<std::string> notes;
};

EvalReport evaluate(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& truths,
                    const std::vector<int>& labels, const Spacing& spacing);

// Tab-separated table: header comment lines, then `label  dsc  hd95_mm` rows and a mean row.
void write_report_tsv(const std::filesystem::path& path, const EvalReport& report,
                      const std::vector<std::string>& header_lines = {});
// Key-value JSON with the same content plus per-case scores.
void write_report_json(const std::filesystem::path& path, const EvalReport& report,
                       const std::map<std::string, std::string>& meta = {});
std::string report_tsv_string(const EvalReport& report, const std::vector<std::string>& header_lines = {});

namespace detail {

// Exact squared Euclidean distance (mm^2) from every voxel to the nearest seed voxel.
std::vector<double> squared_edt(const std::vector<char>& seeds, const Shape3& shape, const Spacing& spacing);
std::vector<char> boundary_mask(const LabelMap& map, int label);
double percentile_linear(std::vector<double> values, double q);

}  // namespace detail

}  // namespace distilseg
