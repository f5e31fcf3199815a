#include "distilseg/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "distilseg/error.hpp"

namespace distilseg {

namespace {

constexpr double kW = 640, kH = 400, kL = 70, kR = 150, kT = 40, kB = 50;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

void save(const std::filesystem::path& path, const std::string& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << body;
}

std::string header(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n"
     << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
  return os.str();
}

}  // namespace

void write_loss_svg(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series) {
  double lo = INFINITY, hi = -INFINITY;
  std::size_t n = 0;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, s.values.size());
  }
  if (!(lo <= hi)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  auto px = [&](std::size_t i) { return kL + (n > 1 ? pw * static_cast<double>(i) / static_cast<double>(n - 1) : pw / 2); };
  auto py = [&](double v) { return kT + ph * (hi - v) / (hi - lo); };
  std::ostringstream os;
  os << header(title);
  os << "<text x=\"" << kL - 6 << "\" y=\"" << kT + 4 << "\" text-anchor=\"end\">" << num(hi) << "</text>\n";
  os << "<text x=\"" << kL - 6 << "\" y=\"" << kH - kB << "\" text-anchor=\"end\">" << num(lo) << "</text>\n";
  os << "<text x=\"" << kL + pw / 2 << "\" y=\"" << kH - 15 << "\" text-anchor=\"middle\">epoch (" << n << ")</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kColors[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[k].values.size(); ++i) {
      const double v = series[k].values[i];
      if (std::isfinite(v)) os << num(px(i)) << "," << num(py(v)) << " ";
    }
    os << "\"/>\n";
    const double ly = kT + 18.0 * static_cast<double>(k);
    os << "<rect x=\"" << kW - kR + 10 << "\" y=\"" << ly << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << kW - kR + 28 << "\" y=\"" << ly + 10 << "\">" << esc(series[k].name) << "</text>\n";
  }
  os << "</svg>\n";
  save(path, os.str());
}

void write_bar_svg(const std::filesystem::path& path, const std::string& title, const std::map<int, double>& values,
                   const std::string& y_label) {
  double hi = 0;
  for (const auto& [l, v] : values) hi = std::max(hi, v);
  if (hi <= 0) hi = 1;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  const double slot = values.empty() ? pw : pw / static_cast<double>(values.size());
  std::ostringstream os;
  os << header(title);
  os << "<text x=\"18\" y=\"" << kT + ph / 2 << "\" transform=\"rotate(-90 18 " << kT + ph / 2
     << ")\" text-anchor=\"middle\">" << esc(y_label) << "</text>\n";
  os << "<text x=\"" << kL - 6 << "\" y=\"" << kT + 4 << "\" text-anchor=\"end\">" << num(hi) << "</text>\n";
  std::size_t i = 0;
  for (const auto& [l, v] : values) {
    const double h = ph * std::max(0.0, v) / hi;
    const double x = kL + slot * static_cast<double>(i) + slot * 0.15;
    os << "<rect x=\"" << num(x) << "\" y=\"" << num(kT + ph - h) << "\" width=\"" << num(slot * 0.7) << "\" height=\""
       << num(h) << "\" fill=\"" << kColors[i % 6] << "\"/>\n";
    os << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << kH - kB + 16 << "\" text-anchor=\"middle\">label " << l
       << "</text>\n";
    os << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(kT + ph - h - 4) << "\" text-anchor=\"middle\">"
       << num(v) << "</text>\n";
    ++i;
  }
  os << "</svg>\n";
  save(path, os.str());
}

}  // namespace distilseg
