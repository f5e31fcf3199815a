#include "distilseg/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "distilseg/error.hpp"

namespace distilseg {

double dice_per_label(const LabelMap& pred, const LabelMap& truth, int label) {
  require_same_shape(pred.shape(), truth.shape(), "dice_per_label");
  std::int64_t p = 0, t = 0, both = 0;
  const auto a = pred.data();
  const auto b = truth.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_p = a[i] == label, in_t = b[i] == label;
    p += in_p;
    t += in_t;
    both += in_p && in_t;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

namespace detail {

std::vector<char> boundary_mask(const LabelMap& map, int label) {
  const Shape3& s = map.shape();
  std::vector<char> out(static_cast<std::size_t>(s.voxels()), 0);
  auto fg = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= s.d || y >= s.h || x >= s.w) return false;
    return map.at(z, y, x) == label;
  };
  for (std::int64_t z = 0, p = 0; z < s.d; ++z)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x, ++p) {
        if (!fg(z, y, x)) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
            !fg(z, y, x + 1)) {
          out[static_cast<std::size_t>(p)] = 1;
        }
      }
  return out;
}

namespace {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line with voxel pitch h.
void edt_1d(const std::vector<double>& f, double h, std::vector<double>& d, std::vector<int>& v,
            std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == inf) continue;
    const double xq = q * h;
    while (k >= 0) {
      const int r = v[static_cast<std::size_t>(k)];
      const double xr = r * h;
      const double s = ((f[static_cast<std::size_t>(q)] + xq * xq) - (f[static_cast<std::size_t>(r)] + xr * xr)) /
                       (2 * (xq - xr));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    if (k == 0) {
      z[0] = -inf;
    } else {
      const int r = v[static_cast<std::size_t>(k - 1)];
      const double xr = r * h;
      z[static_cast<std::size_t>(k)] =
          ((f[static_cast<std::size_t>(q)] + xq * xq) - (f[static_cast<std::size_t>(r)] + xr * xr)) / (2 * (xq - xr));
    }
    z[static_cast<std::size_t>(k + 1)] = inf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * h;
    while (z[static_cast<std::size_t>(j + 1)] < xq) ++j;
    const int r = v[static_cast<std::size_t>(j)];
    const double dx = xq - r * h;
    d[static_cast<std::size_t>(q)] = dx * dx + f[static_cast<std::size_t>(r)];
  }
}

}  // namespace

std::vector<double> squared_edt(const std::vector<char>& seeds, const Shape3& shape, const Spacing& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) g[i] = seeds[i] ? 0.0 : inf;
  const std::array<std::int64_t, 3> dims = {shape.d, shape.h, shape.w};
  const std::array<std::int64_t, 3> strides = {shape.h * shape.w, shape.w, 1};
  for (int axis = 0; axis < 3; ++axis) {
    const auto n = dims[static_cast<std::size_t>(axis)];
    const auto stride = strides[static_cast<std::size_t>(axis)];
    std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n + 1));
    std::vector<int> v(static_cast<std::size_t>(n));
    for (std::int64_t start = 0; start < shape.voxels(); ++start) {
      if ((start / stride) % n != 0) continue;
      for (std::int64_t i = 0; i < n; ++i) f[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(start + i * stride)];
      edt_1d(f, spacing[axis], d, v, z);
      for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(start + i * stride)] = d[static_cast<std::size_t>(i)];
    }
  }
  return g;
}

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

}  // namespace detail

std::optional<double> hd95(const LabelMap& pred, const LabelMap& truth, int label, const Spacing& spacing) {
  require_same_shape(pred.shape(), truth.shape(), "hd95");
  const auto bp = detail::boundary_mask(pred, label);
  const auto bt = detail::boundary_mask(truth, label);
  const bool any_p = std::find(bp.begin(), bp.end(), 1) != bp.end();
  const bool any_t = std::find(bt.begin(), bt.end(), 1) != bt.end();
  if (!any_p || !any_t) return std::nullopt;
  const auto dt = detail::squared_edt(bt, pred.shape(), spacing);
  const auto dp = detail::squared_edt(bp, pred.shape(), spacing);
  std::vector<double> pooled;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) pooled.push_back(std::sqrt(dt[i]));
  }
  for (std::size_t i = 0; i < bt.size(); ++i) {
    if (bt[i]) pooled.push_back(std::sqrt(dp[i]));
  }
  return detail::percentile_linear(std::move(pooled), 0.95);
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

EvalReport evaluate(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& truths,
                    const std::vector<int>& labels, const Spacing& spacing) {
  if (preds.size() != truths.size()) throw ValidationError("evaluate: prediction/truth count mismatch");
  if (preds.empty()) throw ValidationError("evaluate: no cases");
  if (labels.empty()) throw ValidationError("evaluate: no labels");
  EvalReport rep;
  std::vector<double> case_dsc, case_hd;
  std::map<int, std::vector<double>> dsc_by_label, hd_by_label;
  for (std::size_t c = 0; c < preds.size(); ++c) {
    CaseScores cs;
    std::vector<double> dscs, hds;
    for (int l : labels) {
      LabelScore s;
      s.dsc = dice_per_label(preds[c], truths[c], l);
      s.hd95_mm = hd95(preds[c], truths[c], l, spacing);
      dscs.push_back(s.dsc);
      dsc_by_label[l].push_back(s.dsc);
      if (s.hd95_mm) {
        hds.push_back(*s.hd95_mm);
        hd_by_label[l].push_back(*s.hd95_mm);
      } else {
        ++rep.undefined_hd95;
      }
      cs.per_label[l] = s;
    }
    case_dsc.push_back(mean_std(dscs).first);
    if (!hds.empty()) case_hd.push_back(mean_std(hds).first);
    rep.cases.push_back(std::move(cs));
  }
  for (int l : labels) {
    LabelScore s;
    s.dsc = mean_std(dsc_by_label[l]).first;
    if (!hd_by_label[l].empty()) s.hd95_mm = mean_std(hd_by_label[l]).first;
    rep.per_label[l] = s;
  }
  std::tie(rep.mean_dsc, rep.std_dsc) = mean_std(case_dsc);
  if (!case_hd.empty()) {
    const auto [m, s] = mean_std(case_hd);
    rep.mean_hd95 = m;
    rep.std_hd95 = s;
  }
  if (rep.undefined_hd95 > 0) {
    rep.notes.push_back(std::to_string(rep.undefined_hd95) +
                        " (case, label) HD95 values undefined (empty mask) and excluded from means");
  }
  return rep;
}

std::string report_tsv_string(const EvalReport& report, const std::vector<std::string>& header_lines) {
  std::ostringstream os;
  for (const auto& h : header_lines) os << "# " << h << "\n";
  for (const auto& n : report.notes) os << "# note: " << n << "\n";
  os << "label\tdsc\thd95_mm\n";
  for (const auto& [l, s] : report.per_label) {
    os << l << "\t" << fmt(s.dsc) << "\t" << (s.hd95_mm ? fmt(*s.hd95_mm) : std::string("undefined")) << "\n";
  }
  os << "mean\t" << fmt(report.mean_dsc) << "\t" << (report.mean_hd95 ? fmt(*report.mean_hd95) : "undefined") << "\n";
  os << "std\t" << fmt(report.std_dsc) << "\t" << (report.std_hd95 ? fmt(*report.std_hd95) : "undefined") << "\n";
  return os.str();
}

void write_report_tsv(const std::filesystem::path& path, const EvalReport& report,
                      const std::vector<std::string>& header_lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << report_tsv_string(report, header_lines);
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report,
                       const std::map<std::string, std::string>& meta) {
  using nlohmann::json;
  auto score = [](const LabelScore& s) {
    json j;
    j["dsc"] = s.dsc;
    j["hd95_mm"] = s.hd95_mm ? json(*s.hd95_mm) : json(nullptr);
    return j;
  };
  json j;
  j["meta"] = meta;
  j["mean_dsc"] = report.mean_dsc;
  j["std_dsc"] = report.std_dsc;
  j["mean_hd95_mm"] = report.mean_hd95 ? json(*report.mean_hd95) : json(nullptr);
  j["std_hd95_mm"] = report.std_hd95 ? json(*report.std_hd95) : json(nullptr);
  j["undefined_hd95"] = report.undefined_hd95;
  j["notes"] = report.notes;
  for (const auto& [l, s] : report.per_label) j["per_label"][std::to_string(l)] = score(s);
  for (const auto& c : report.cases) {
    json jc;
    for (const auto& [l, s] : c.per_label) jc[std::to_string(l)] = score(s);
    j["cases"].push_back(jc);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace distilseg
