#include "distilseg/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "distilseg/error.hpp"
#include "distilseg/io.hpp"
#include "distilseg/warp.hpp"

namespace distilseg {

namespace fs = std::filesystem;

void ToySpec::validate() const {
  if (!shape.positive() || shape.d < 8 || shape.h < 8 || shape.w < 8) throw ConfigError("toy shape must be >= 8 per axis");
  if (num_volumes < 0 || num_test < 0) throw ConfigError("toy member counts must be >= 0");
  if (num_classes < 2 || num_classes > 6) throw ConfigError("toy num_classes must be in [2, 6]");
  const double limit = 0.1 * static_cast<double>(std::min({shape.d, shape.h, shape.w}));
  if (!(deform_magnitude >= 0) || deform_magnitude > limit) {
    throw ConfigError("deform_magnitude must be in [0, " + std::to_string(limit) + "] to keep structures in bounds");
  }
  if (!(smoothness > 0)) throw ConfigError("smoothness must be positive");
  if (!(intensity_noise >= 0) || !(bias_amplitude >= 0) || bias_amplitude >= 1 || !(contrast_jitter >= 0)) {
    throw ConfigError("noise, bias and jitter must be >= 0 (bias < 1)");
  }
}

namespace {

// Class intensities of the clean atlas.
constexpr double kIntensity[6] = {0.0, 0.35, 0.7, 1.0, 0.55, 0.85};

void blur_axis(std::vector<double>& v, const Shape3& s, int axis, const std::vector<double>& kernel) {
  const int r = static_cast<int>(kernel.size() / 2);
  const std::int64_t n = s[axis];
  const std::int64_t stride = axis == 0 ? s.h * s.w : (axis == 1 ? s.w : 1);
  std::vector<double> line(static_cast<std::size_t>(n));
  for (std::int64_t start = 0; start < s.voxels(); ++start) {
    if ((start / stride) % n != 0) continue;
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0;
      for (int k = -r; k <= r; ++k) {
        const std::int64_t j = std::clamp<std::int64_t>(i + k, 0, n - 1);
        acc += kernel[static_cast<std::size_t>(k + r)] * v[static_cast<std::size_t>(start + j * stride)];
      }
      line[static_cast<std::size_t>(i)] = acc;
    }
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(start + i * stride)] = line[static_cast<std::size_t>(i)];
  }
}

void gaussian_blur(std::vector<double>& v, const Shape3& s, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= sum;
  for (int axis = 0; axis < 3; ++axis) blur_axis(v, s, axis, k);
}

LabelMap atlas_labels(const Shape3& s, int C) {
  std::vector<std::int32_t> lab(static_cast<std::size_t>(s.voxels()), 0);
  const double cd = (s.d - 1) / 2.0, ch = (s.h - 1) / 2.0, cw = (s.w - 1) / 2.0;
  auto ell = [&](double z, double y, double x, double oz, double oy, double ox, double rz, double ry, double rx) {
    const double a = (z - cd - oz * s.d) / (rz * s.d), b = (y - ch - oy * s.h) / (ry * s.h),
                 c = (x - cw - ox * s.w) / (rx * s.w);
    return a * a + b * b + c * c <= 1.0;
  };
  auto box = [&](double z, double y, double x, double oz, double oy, double ox, double hz, double hy, double hx) {
    return std::abs(z - cd - oz * s.d) <= hz * s.d && std::abs(y - ch - oy * s.h) <= hy * s.h &&
           std::abs(x - cw - ox * s.w) <= hx * s.w;
  };
  for (std::int64_t z = 0, p = 0; z < s.d; ++z)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x, ++p) {
        const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
        int c = 0;
        if (ell(fz, fy, fx, 0, 0, 0, 0.36, 0.38, 0.34)) c = 1;
        if (C > 2 && ell(fz, fy, fx, -0.06, 0.08, -0.1, 0.16, 0.14, 0.15)) c = 2;
        if (C > 3 && box(fz, fy, fx, 0.08, -0.1, 0.1, 0.1, 0.09, 0.1)) c = 3;
        if (C > 4 && ell(fz, fy, fx, 0.14, 0.14, -0.12, 0.07, 0.08, 0.07)) c = 4;
        if (C > 5 && box(fz, fy, fx, -0.16, -0.12, 0.06, 0.05, 0.06, 0.06)) c = 5;
        lab[static_cast<std::size_t>(p)] = c;
      }
  return LabelMap(s, std::move(lab), C);
}

}  // namespace

DisplacementField random_smooth_field(const Shape3& shape, double magnitude, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto n = static_cast<std::size_t>(shape.voxels());
  std::vector<double> data(3 * n);
  // Noise is drawn on a grid padded by the kernel radius and cropped after blurring, so
  // border voxels see as many samples as interior ones and the field stays stationary.
  const std::int64_t r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  const Shape3 padded{shape.d + 2 * r, shape.h + 2 * r, shape.w + 2 * r};
  for (int c = 0; c < 3; ++c) {
    std::vector<double> comp(static_cast<std::size_t>(padded.voxels()));
    for (auto& v : comp) v = n01(rng);
    gaussian_blur(comp, padded, sigma);
    double* dst = data.data() + static_cast<std::ptrdiff_t>(c * n);
    for (std::int64_t z = 0; z < shape.d; ++z)
      for (std::int64_t y = 0; y < shape.h; ++y)
        for (std::int64_t x = 0; x < shape.w; ++x) {
          dst[linear_index(shape, z, y, x)] = comp[static_cast<std::size_t>(linear_index(padded, z + r, y + r, x + r))];
        }
  }
  double mx = 0;
  for (double v : data) mx = std::max(mx, std::abs(v));
  const double scale = (mx > 0 && magnitude > 0) ? magnitude / mx : 0.0;
  for (auto& v : data) v *= scale;
  return DisplacementField(shape, std::move(data));
}

ToyDataset generate_toy_dataset(const ToySpec& spec) {
  spec.validate();
  const Shape3& s = spec.shape;
  const auto n = static_cast<std::size_t>(s.voxels());
  ToyDataset ds;
  LabelMap lab = atlas_labels(s, spec.num_classes);
  std::vector<double> img(n);
  for (std::size_t p = 0; p < n; ++p) img[p] = kIntensity[lab.data()[p]];
  ds.atlas = AtlasPair(Volume(s, std::move(img)), std::move(lab));
  ds.num_train = spec.num_volumes;

  std::mt19937_64 master(spec.seed);
  const int total = spec.num_volumes + spec.num_test;
  for (int m = 0; m < total; ++m) {
    const std::uint64_t field_seed = master();
    const std::uint64_t bias_seed = master();
    std::mt19937_64 rng(master());
    std::normal_distribution<double> n01(0.0, 1.0);

    ToyMember mem;
    mem.field = random_smooth_field(s, spec.deform_magnitude, spec.smoothness, field_seed);
    mem.labels = warp_labels(ds.atlas.labels, mem.field);

    // Re-render from the warped labels with member-specific class contrast, then blur the
    // edges slightly through the trilinear warp of the clean atlas.
    std::vector<double> shift(static_cast<std::size_t>(spec.num_classes), 0.0);
    for (int c = 1; c < spec.num_classes; ++c) shift[static_cast<std::size_t>(c)] = spec.contrast_jitter * n01(rng);
    const Volume warped = warp_volume(ds.atlas.image, mem.field);
    DisplacementField bias = random_smooth_field(s, spec.bias_amplitude, 2.0 * spec.smoothness, bias_seed);
    const auto bias0 = bias.component(0);
    std::vector<double> out(n);
    for (std::size_t p = 0; p < n; ++p) {
      double v = warped.data()[p] + shift[static_cast<std::size_t>(mem.labels.data()[p])];
      v *= 1.0 + bias0[p];
      v += spec.intensity_noise * n01(rng);
      out[p] = std::clamp(v, 0.0, 1.0);
    }
    mem.image = Volume(s, std::move(out));
    ds.population.push_back(std::move(mem));
  }
  return ds;
}

std::vector<Volume> ToyDataset::train_images() const {
  std::vector<Volume> v;
  for (int i = 0; i < num_train; ++i) v.push_back(population[static_cast<std::size_t>(i)].image);
  return v;
}

std::vector<Volume> ToyDataset::test_images() const {
  std::vector<Volume> v;
  for (std::size_t i = static_cast<std::size_t>(num_train); i < population.size(); ++i) v.push_back(population[i].image);
  return v;
}

std::vector<LabelMap> ToyDataset::train_labels() const {
  std::vector<LabelMap> v;
  for (int i = 0; i < num_train; ++i) v.push_back(population[static_cast<std::size_t>(i)].labels);
  return v;
}

std::vector<LabelMap> ToyDataset::test_labels() const {
  std::vector<LabelMap> v;
  for (std::size_t i = static_cast<std::size_t>(num_train); i < population.size(); ++i) v.push_back(population[i].labels);
  return v;
}

fs::path write_toy_dataset(const ToyDataset& ds, const ToySpec& spec, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json j;
  j["format"] = "dsv";
  j["num_classes"] = spec.num_classes;
  j["shape"] = {spec.shape.d, spec.shape.h, spec.shape.w};
  j["seed"] = spec.seed;
  io::save_volume(dir / "atlas_image.dsv", ds.atlas.image);
  io::save_labels(dir / "atlas_labels.dsv", ds.atlas.labels);
  j["atlas"] = {{"image", "atlas_image.dsv"}, {"labels", "atlas_labels.dsv"}};
  j["train"] = nlohmann::json::array();
  j["test"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.population.size(); ++i) {
    const bool train = static_cast<int>(i) < ds.num_train;
    char name[32];
    std::snprintf(name, sizeof name, "%s_%03zu", train ? "train" : "test", train ? i : i - static_cast<std::size_t>(ds.num_train));
    const std::string im = std::string(name) + "_image.dsv", lb = std::string(name) + "_labels.dsv";
    io::save_volume(dir / im, ds.population[i].image);
    io::save_labels(dir / lb, ds.population[i].labels);
    j[train ? "train" : "test"].push_back({{"image", im}, {"labels", lb}});
  }
  const fs::path manifest = dir / "manifest.json";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << j.dump(2) << "\n";
  return manifest;
}

ToyManifest read_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read manifest " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed manifest " + manifest.string() + ": " + e.what());
  }
  const fs::path base = manifest.parent_path();
  ToyManifest m;
  try {
    m.num_classes = j.value("num_classes", 0);
    m.atlas_image = base / j.at("atlas").at("image").get<std::string>();
    m.atlas_labels = base / j.at("atlas").at("labels").get<std::string>();
    for (const auto& e : j.at("train")) {
      m.train_images.push_back(base / e.at("image").get<std::string>());
      if (e.contains("labels")) m.train_labels.push_back(base / e.at("labels").get<std::string>());
    }
    for (const auto& e : j.at("test")) {
      m.test_images.push_back(base / e.at("image").get<std::string>());
      m.test_labels.push_back(base / e.at("labels").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + manifest.string() + " is missing keys: " + e.what());
  }
  return m;
}

}  // namespace distilseg
