#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "distilseg/distill.hpp"
#include "distilseg/error.hpp"
#include "distilseg/metrics.hpp"
#include "distilseg/ncc.hpp"
#include "distilseg/pipeline.hpp"
#include "distilseg/reg_losses.hpp"
#include "distilseg/toy_data.hpp"
#include "distilseg/warp.hpp"

namespace py = pybind11;
using namespace distilseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

Shape3 shape_of(const py::buffer_info& b, int lead, const char* what) {
  if (b.ndim != 3 + lead) {
    throw DimensionError(std::string(what) + ": expected a " + std::to_string(3 + lead) + "-d array");
  }
  if (lead && b.shape[0] != 3) throw DimensionError(std::string(what) + ": leading axis must have length 3");
  return {b.shape[lead], b.shape[lead + 1], b.shape[lead + 2]};
}

Volume to_volume(const F64& a, const char* what = "volume") {
  const auto b = a.request();
  const Shape3 s = shape_of(b, 0, what);
  const auto* p = static_cast<const double*>(b.ptr);
  return Volume(s, std::vector<double>(p, p + s.voxels()));
}

LabelMap to_labels(const I32& a, int num_classes) {
  const auto b = a.request();
  const Shape3 s = shape_of(b, 0, "labels");
  const auto* p = static_cast<const std::int32_t*>(b.ptr);
  std::vector<std::int32_t> d(p, p + s.voxels());
  if (num_classes <= 0) {
    num_classes = 2;
    for (auto v : d) num_classes = std::max(num_classes, v + 1);
  }
  return LabelMap(s, std::move(d), num_classes);
}

DisplacementField to_field(const F64& a) {
  const auto b = a.request();
  const Shape3 s = shape_of(b, 1, "field");
  const auto* p = static_cast<const double*>(b.ptr);
  return DisplacementField(s, std::vector<double>(p, p + 3 * s.voxels()));
}

template <class T>
py::array_t<T> to_array(const Shape3& s, std::span<const T> data) {
  py::array_t<T> out({s.d, s.h, s.w});
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

FeatureStack to_stack(const std::vector<F64>& layers) {
  FeatureStack fs;
  for (const auto& a : layers) {
    const auto b = a.request();
    nn::Dims dims(b.shape.begin(), b.shape.end());
    const auto* p = static_cast<const double*>(b.ptr);
    fs.layers.push_back({dims, std::vector<double>(p, p + b.size)});
  }
  return fs;
}

RegLossConfig loss_cfg(int window, int bins, double sigma) {
  RegLossConfig c;
  c.cc_window = window;
  c.mi_bins = bins;
  c.mi_sigma = sigma;
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "One-shot 3D segmentation by registration-based augmentation and feature distillation";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<RuntimeFailure>(m, "RuntimeFailure", base.ptr());

  m.def(
      "warp_volume",
      [](const F64& v, const F64& field) {
        const auto out = warp_volume(to_volume(v), to_field(field));
        return to_array<double>(out.shape(), out.data());
      },
      py::arg("volume"), py::arg("field"), "Trilinear warp: out(p) = v(p + u(p)), field shaped (3, D, H, W).");
  m.def(
      "warp_labels",
      [](const I32& labels, const F64& field, int num_classes) {
        const auto out = warp_labels(to_labels(labels, num_classes), to_field(field));
        return to_array<std::int32_t>(out.shape(), out.data());
      },
      py::arg("labels"), py::arg("field"), py::arg("num_classes") = 0, "Nearest-neighbour label warp.");

  m.def(
      "local_cc_loss",
      [](const F64& fixed, const F64& warped, int window) {
        return local_cc_loss(to_volume(fixed), to_volume(warped), loss_cfg(window, 32, 0.02));
      },
      py::arg("fixed"), py::arg("warped"), py::arg("window") = 9);
  m.def(
      "mi_loss",
      [](const F64& fixed, const F64& warped, int bins, double sigma) {
        return mi_loss(to_volume(fixed), to_volume(warped), loss_cfg(9, bins, sigma));
      },
      py::arg("fixed"), py::arg("warped"), py::arg("bins") = 32, py::arg("sigma") = 0.02);
  m.def("diffusion", [](const F64& f) { return diffusion_reg(to_field(f)); }, py::arg("field"));
  m.def("bending_energy", [](const F64& f) { return bending_energy_reg(to_field(f)); }, py::arg("field"));
  m.def(
      "hint_loss",
      [](const std::vector<F64>& s, const std::vector<F64>& t, int k, const std::string& metric) {
        return hint_loss(to_stack(s), to_stack(t), k, hint_metric_from_string(metric));
      },
      py::arg("student"), py::arg("teacher"), py::arg("k") = 2, py::arg("metric") = "cosine");
  m.def("ncc", [](const F64& a, const F64& b) { return ncc_score(to_volume(a), to_volume(b)); }, py::arg("a"),
        py::arg("b"));

  m.def(
      "dice",
      [](const I32& p, const I32& t, int label) {
        const int C = label + 1;
        auto P = to_labels(p, 0), T = to_labels(t, 0);
        const int n = std::max({P.num_classes(), T.num_classes(), C});
        return dice_per_label(to_labels(p, n), to_labels(t, n), label);
      },
      py::arg("pred"), py::arg("truth"), py::arg("label"));
  m.def(
      "hd95",
      [](const I32& p, const I32& t, int label, std::array<double, 3> spacing) {
        auto P = to_labels(p, 0), T = to_labels(t, 0);
        const int n = std::max({P.num_classes(), T.num_classes(), label + 1});
        return hd95(to_labels(p, n), to_labels(t, n), label, Spacing{spacing[0], spacing[1], spacing[2]});
      },
      py::arg("pred"), py::arg("truth"), py::arg("label"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      "95th percentile boundary distance in mm, or None when either structure is empty.");

  m.def(
      "make_toy",
      [](const std::filesystem::path& out, std::uint64_t seed, int num_volumes, int num_test, int size,
         double deform) {
        ToySpec s;
        s.seed = seed;
        s.num_volumes = num_volumes;
        s.num_test = num_test;
        s.shape = {size, size, size};
        if (deform >= 0) s.deform_magnitude = deform;
        return write_toy_dataset(generate_toy_dataset(s), s, out);
      },
      py::arg("out"), py::arg("seed") = 0, py::arg("num_volumes") = 10, py::arg("num_test") = 5,
      py::arg("size") = 32, py::arg("deform") = -1.0, "Writes the synthetic dataset and returns the manifest path.");

  m.def(
      "run",
      [](const std::filesystem::path& config) {
        const auto res = run_pipeline(load_config(config));
        py::dict d;
        d["report_path"] = res.report_path;
        d["mean_dsc"] = res.report.mean_dsc;
        d["std_dsc"] = res.report.std_dsc;
        d["mean_hd95"] = res.report.mean_hd95;
        return d;
      },
      py::arg("config"), "Runs all stages and returns summary metrics.");
  m.def(
      "infer",
      [](const std::filesystem::path& student, const std::vector<F64>& images) {
        std::vector<Volume> vols;
        for (const auto& a : images) vols.push_back(to_volume(a).normalized());
        std::vector<py::array_t<std::int32_t>> out;
        for (const auto& l : infer_from_checkpoint(student, vols)) out.push_back(to_array<std::int32_t>(l.shape(), l.data()));
        return out;
      },
      py::arg("student"), py::arg("images"), "Predicts labels using the student checkpoint alone.");
}
