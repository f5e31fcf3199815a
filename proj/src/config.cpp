#include "distilseg/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "distilseg/error.hpp"

namespace distilseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void only_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

std::string atlas_mode_name(AtlasMode m) {
  switch (m) {
    case AtlasMode::manifest: return "manifest";
    case AtlasMode::fixed: return "fixed";
    case AtlasMode::auto_select: return "auto";
  }
  return "manifest";
}

}  // namespace

nlohmann::json to_json(const ToySpec& s) {
  return json{{"shape", {s.shape.d, s.shape.h, s.shape.w}},
              {"num_volumes", s.num_volumes},
              {"num_test", s.num_test},
              {"num_classes", s.num_classes},
              {"deform_magnitude", s.deform_magnitude},
              {"smoothness", s.smoothness},
              {"intensity_noise", s.intensity_noise},
              {"bias_amplitude", s.bias_amplitude},
              {"contrast_jitter", s.contrast_jitter},
              {"seed", s.seed}};
}

ToySpec toy_spec_from_json(const nlohmann::json& j) {
  const std::string where = "toy spec";
  only_keys(j, {"shape", "num_volumes", "num_test", "num_classes", "deform_magnitude", "smoothness",
                "intensity_noise", "bias_amplitude", "contrast_jitter", "seed"},
            where);
  ToySpec s;
  if (j.contains("shape")) {
    std::vector<std::int64_t> d;
    read(j, "shape", d, where);
    if (d.size() != 3) throw ConfigError("toy shape must have 3 entries");
    s.shape = Shape3{d[0], d[1], d[2]};
  }
  read(j, "num_volumes", s.num_volumes, where);
  read(j, "num_test", s.num_test, where);
  read(j, "num_classes", s.num_classes, where);
  read(j, "deform_magnitude", s.deform_magnitude, where);
  read(j, "smoothness", s.smoothness, where);
  read(j, "intensity_noise", s.intensity_noise, where);
  read(j, "bias_amplitude", s.bias_amplitude, where);
  read(j, "contrast_jitter", s.contrast_jitter, where);
  read(j, "seed", s.seed, where);
  s.validate();
  return s;
}

void PipelineConfig::validate() const {
  if (manifest.empty()) throw ConfigError("config needs a dataset manifest");
  if (atlas.mode == AtlasMode::fixed && (atlas.image.empty() || atlas.labels.empty())) {
    throw ConfigError("fixed atlas mode needs atlas.image and atlas.labels");
  }
  if (atlas.reference != "train" && atlas.reference != "test") throw ConfigError("atlas.reference must be train or test");
  reg_net.validate();
  reg_loss.validate();
  reg_optim.validate();
  distill.validate();
  for (int l : eval_labels) {
    if (l < 1 || l >= distill.net.num_classes) throw ConfigError("eval label " + std::to_string(l) + " out of range");
  }
  if (!(unlabeled_fraction > 0) || unlabeled_fraction > 1) throw ConfigError("unlabeled_fraction must be in (0, 1]");
}

void PipelineConfig::check_paths() const {
  auto need = [](const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
  };
  need(manifest, "manifest");
  if (atlas.mode == AtlasMode::fixed) {
    need(atlas.image, "atlas image");
    need(atlas.labels, "atlas labels");
  }
}

PipelineConfig config_from_json(const json& j, const fs::path& base_dir) {
  const std::string top = "config";
  only_keys(j, {"manifest", "atlas", "reg_net", "reg_loss", "reg_optim", "distill", "eval_labels", "output_dir", "seed",
                "unlabeled_fraction", "dump_features", "plots"},
            top);
  PipelineConfig c;
  std::string s;
  read(j, "manifest", s, top);
  c.manifest = resolve(s, base_dir);
  s = c.output_dir.string();
  read(j, "output_dir", s, top);
  c.output_dir = s;
  read(j, "seed", c.seed, top);
  read(j, "eval_labels", c.eval_labels, top);
  read(j, "unlabeled_fraction", c.unlabeled_fraction, top);
  read(j, "dump_features", c.dump_features, top);
  read(j, "plots", c.plots, top);

  if (j.contains("atlas")) {
    const auto& a = j["atlas"];
    only_keys(a, {"mode", "image", "labels", "reference"}, "atlas");
    std::string mode = "manifest";
    read(a, "mode", mode, "atlas");
    if (mode == "manifest") c.atlas.mode = AtlasMode::manifest;
    else if (mode == "fixed") c.atlas.mode = AtlasMode::fixed;
    else if (mode == "auto") c.atlas.mode = AtlasMode::auto_select;
    else throw ConfigError("atlas.mode must be manifest, fixed or auto");
    std::string img, lab;
    read(a, "image", img, "atlas");
    read(a, "labels", lab, "atlas");
    c.atlas.image = resolve(img, base_dir);
    c.atlas.labels = resolve(lab, base_dir);
    read(a, "reference", c.atlas.reference, "atlas");
  }
  if (j.contains("reg_net")) {
    const auto& r = j["reg_net"];
    only_keys(r, {"encoder_channels", "decoder_channels", "num_stages", "embedding_dim"}, "reg_net");
    read(r, "encoder_channels", c.reg_net.encoder_channels, "reg_net");
    read(r, "decoder_channels", c.reg_net.decoder_channels, "reg_net");
    read(r, "num_stages", c.reg_net.num_stages, "reg_net");
    read(r, "embedding_dim", c.reg_net.embedding_dim, "reg_net");
  }
  if (j.contains("reg_loss")) {
    const auto& r = j["reg_loss"];
    only_keys(r, {"similarity", "smoothness", "alpha", "beta", "cc_window", "mi_bins", "mi_sigma", "tau", "epsilon"},
              "reg_loss");
    std::string kind;
    if (r.contains("similarity")) {
      read(r, "similarity", kind, "reg_loss");
      c.reg_loss.sim_kind = sim_kind_from_string(kind);
    }
    if (r.contains("smoothness")) {
      read(r, "smoothness", kind, "reg_loss");
      c.reg_loss.smooth_kind = smooth_kind_from_string(kind);
    }
    read(r, "alpha", c.reg_loss.alpha, "reg_loss");
    read(r, "beta", c.reg_loss.beta, "reg_loss");
    read(r, "cc_window", c.reg_loss.cc_window, "reg_loss");
    read(r, "mi_bins", c.reg_loss.mi_bins, "reg_loss");
    read(r, "mi_sigma", c.reg_loss.mi_sigma, "reg_loss");
    read(r, "tau", c.reg_loss.tau, "reg_loss");
    read(r, "epsilon", c.reg_loss.epsilon, "reg_loss");
  }
  if (j.contains("reg_optim")) {
    const auto& r = j["reg_optim"];
    only_keys(r, {"epochs", "learning_rate", "batch_size"}, "reg_optim");
    read(r, "epochs", c.reg_optim.epochs, "reg_optim");
    read(r, "learning_rate", c.reg_optim.learning_rate, "reg_optim");
    read(r, "batch_size", c.reg_optim.batch_size, "reg_optim");
  }
  if (j.contains("distill")) {
    const auto& d = j["distill"];
    only_keys(d, {"lambda_recon", "lambda_hint", "hint_layers", "hint_metric", "epochs", "learning_rate", "batch_size",
                  "teacher", "pairing", "stage_widths", "num_stages", "num_classes"},
              "distill");
    read(d, "lambda_recon", c.distill.lambda_recon, "distill");
    read(d, "lambda_hint", c.distill.lambda_hint, "distill");
    read(d, "hint_layers", c.distill.hint_layers, "distill");
    std::string v;
    if (d.contains("hint_metric")) {
      read(d, "hint_metric", v, "distill");
      c.distill.hint_metric = hint_metric_from_string(v);
    }
    if (d.contains("pairing")) {
      read(d, "pairing", v, "distill");
      c.distill.pairing = pairing_from_string(v);
    }
    read(d, "epochs", c.distill.epochs, "distill");
    read(d, "learning_rate", c.distill.learning_rate, "distill");
    read(d, "batch_size", c.distill.batch_size, "distill");
    read(d, "teacher", c.distill.teacher_enabled, "distill");
    read(d, "stage_widths", c.distill.net.stage_widths, "distill");
    read(d, "num_stages", c.distill.net.num_stages, "distill");
    read(d, "num_classes", c.distill.net.num_classes, "distill");
  }
  c.reg_optim.seed = c.seed * 1000003ULL + 11;
  c.distill.seed = c.seed * 1000003ULL + 29;
  c.validate();
  return c;
}

json config_to_json(const PipelineConfig& c) {
  json j;
  j["manifest"] = c.manifest.string();
  j["output_dir"] = c.output_dir.string();
  j["seed"] = c.seed;
  j["eval_labels"] = c.eval_labels;
  j["unlabeled_fraction"] = c.unlabeled_fraction;
  j["dump_features"] = c.dump_features;
  j["plots"] = c.plots;
  j["atlas"] = {{"mode", atlas_mode_name(c.atlas.mode)},
                {"image", c.atlas.image.string()},
                {"labels", c.atlas.labels.string()},
                {"reference", c.atlas.reference}};
  j["reg_net"] = {{"encoder_channels", c.reg_net.encoder_channels},
                  {"decoder_channels", c.reg_net.decoder_channels},
                  {"num_stages", c.reg_net.num_stages},
                  {"embedding_dim", c.reg_net.embedding_dim}};
  j["reg_loss"] = {{"similarity", to_string(c.reg_loss.sim_kind)},
                   {"smoothness", to_string(c.reg_loss.smooth_kind)},
                   {"alpha", c.reg_loss.alpha},
                   {"beta", c.reg_loss.beta},
                   {"cc_window", c.reg_loss.cc_window},
                   {"mi_bins", c.reg_loss.mi_bins},
                   {"mi_sigma", c.reg_loss.mi_sigma},
                   {"tau", c.reg_loss.tau},
                   {"epsilon", c.reg_loss.epsilon}};
  j["reg_optim"] = {{"epochs", c.reg_optim.epochs},
                    {"learning_rate", c.reg_optim.learning_rate},
                    {"batch_size", c.reg_optim.batch_size}};
  j["distill"] = {{"lambda_recon", c.distill.lambda_recon},
                  {"lambda_hint", c.distill.lambda_hint},
                  {"hint_layers", c.distill.hint_layers},
                  {"hint_metric", to_string(c.distill.hint_metric)},
                  {"epochs", c.distill.epochs},
                  {"learning_rate", c.distill.learning_rate},
                  {"batch_size", c.distill.batch_size},
                  {"teacher", c.distill.teacher_enabled},
                  {"pairing", to_string(c.distill.pairing)},
                  {"stage_widths", c.distill.net.stage_widths},
                  {"num_stages", c.distill.net.num_stages},
                  {"num_classes", c.distill.net.num_classes}};
  return j;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

fs::path resolve_output_dir(const PipelineConfig& cfg) {
  const char* root = std::getenv("DISTILSEG_OUTPUT_ROOT");
  if (root && *root && cfg.output_dir.is_relative()) return fs::path(root) / cfg.output_dir;
  return cfg.output_dir;
}

}  // namespace distilseg
