#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace distilseg {

struct Series {
  std::string name;
  std::vector<double> values;
};

// Line chart of per-epoch loss terms, one polyline per series.
void write_loss_svg(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series);

// Bar chart of per-label scores.
void write_bar_svg(const std::filesystem::path& path, const std::string& title, const std::map<int, double>& values,
                   const std::string& y_label);

}  // namespace distilseg
