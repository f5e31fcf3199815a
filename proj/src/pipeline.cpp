#include "distilseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "distilseg/checkpoint.hpp"
#include "distilseg/error.hpp"
#include "distilseg/io.hpp"
#include "distilseg/ncc.hpp"
#include "distilseg/plot.hpp"

namespace distilseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::string indexed(const char* prefix, std::size_t i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%03zu%s", prefix, i, suffix);
  return buf;
}

std::string g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed " + p.string() + ": " + e.what());
  }
}

bool marker_matches(const fs::path& marker, const json& key) {
  if (!fs::exists(marker)) return false;
  try {
    return read_json(marker).value("key", json()) == key;
  } catch (const IoError&) {
    return false;
  }
}

void write_marker(const fs::path& marker, const json& key) { write_text(marker, json{{"key", key}}.dump(2) + "\n"); }

// Runs a stage body, turning runtime failures into errors that name the stage.
template <typename F>
auto in_stage(const std::string& stage, F&& body) {
  try {
    return body();
  } catch (const ValidationError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

json reg_key(const PipelineConfig& cfg) {
  const json c = config_to_json(cfg);
  return json{{"manifest", c["manifest"]}, {"atlas", c["atlas"]},     {"reg_net", c["reg_net"]},
              {"reg_loss", c["reg_loss"]}, {"reg_optim", c["reg_optim"]}, {"seed", cfg.seed},
              {"unlabeled_fraction", cfg.unlabeled_fraction}};
}

json distill_key(const PipelineConfig& cfg) {
  json k = reg_key(cfg);
  k["distill"] = config_to_json(cfg)["distill"];
  return k;
}

json unet_json(const UNetConfig& u) {
  return json{{"stage_widths", u.stage_widths},
              {"num_stages", u.num_stages},
              {"num_classes", u.num_classes},
              {"head", u.head == HeadKind::seg ? "seg" : "rec"}};
}

UNetConfig unet_from_json(const json& j) {
  UNetConfig u;
  u.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  u.num_stages = j.at("num_stages").get<int>();
  u.num_classes = j.at("num_classes").get<int>();
  u.head = j.at("head").get<std::string>() == "seg" ? HeadKind::seg : HeadKind::rec;
  return u;
}

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t salt) { return seed * 1000003ULL + salt; }

fs::path out_root(const PipelineConfig& cfg) { return resolve_output_dir(cfg); }

}  // namespace

std::size_t select_atlas(const std::vector<Volume>& candidates, const std::vector<Volume>& references) {
  if (candidates.empty() || references.empty()) throw ValidationError("select_atlas: empty candidate or reference list");
  std::size_t best = 0;
  double best_score = -INFINITY;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double s = 0;
    for (const auto& r : references) s += ncc_score(candidates[i], r);
    s /= static_cast<double>(references.size());
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

std::vector<int> eval_labels_of(const PipelineConfig& cfg, int num_classes) {
  if (!cfg.eval_labels.empty()) return cfg.eval_labels;
  std::vector<int> out;
  for (int c = 1; c < num_classes; ++c) out.push_back(c);
  return out;
}

Dataset load_dataset(const PipelineConfig& cfg) {
  cfg.check_paths();
  const ToyManifest m = read_manifest(cfg.manifest);
  const int C = cfg.distill.net.num_classes;
  if (m.num_classes != 0 && m.num_classes != C) {
    throw ConfigError("manifest declares " + std::to_string(m.num_classes) + " classes but the config uses " +
                      std::to_string(C));
  }
  Dataset ds;
  ds.num_classes = C;
  std::vector<Volume> train;
  for (const auto& p : m.train_images) train.push_back(io::load_volume(p).normalized());
  for (const auto& p : m.test_images) ds.test_images.push_back(io::load_volume(p).normalized());
  for (const auto& p : m.test_labels) ds.test_labels.push_back(io::load_labels(p, C));
  if (ds.test_images.empty()) throw ConfigError("dataset has no test volumes");

  std::vector<Volume> unlabeled;
  switch (cfg.atlas.mode) {
    case AtlasMode::manifest:
      ds.atlas = AtlasPair(io::load_volume(m.atlas_image).normalized(), io::load_labels(m.atlas_labels, C));
      ds.atlas_source = m.atlas_image.filename().string();
      unlabeled = train;
      break;
    case AtlasMode::fixed:
      ds.atlas = AtlasPair(io::load_volume(cfg.atlas.image).normalized(), io::load_labels(cfg.atlas.labels, C));
      ds.atlas_source = cfg.atlas.image.filename().string();
      unlabeled = train;
      break;
    case AtlasMode::auto_select: {
      if (m.train_labels.size() != m.train_images.size()) {
        throw ConfigError("auto atlas selection needs labels for every training candidate");
      }
      const auto& refs = cfg.atlas.reference == "test" ? ds.test_images : train;
      const std::size_t idx = select_atlas(train, refs);
      ds.atlas = AtlasPair(train[idx], io::load_labels(m.train_labels[idx], C));
      ds.atlas_source = m.train_images[idx].filename().string();
      for (std::size_t i = 0; i < train.size(); ++i) {
        if (i != idx) unlabeled.push_back(train[i]);
      }
      break;
    }
  }
  const auto keep = static_cast<std::size_t>(std::ceil(cfg.unlabeled_fraction * static_cast<double>(unlabeled.size())));
  unlabeled.resize(std::min(unlabeled.size(), std::max<std::size_t>(keep, 2)));
  ds.unlabeled = std::move(unlabeled);
  for (const auto& v : ds.unlabeled) require_same_shape(v.shape(), ds.atlas.image.shape(), "dataset");
  for (const auto& v : ds.test_images) require_same_shape(v.shape(), ds.atlas.image.shape(), "dataset");
  return ds;
}

std::vector<std::string> known_variants() {
  return {"baseline-abs", "m1", "m2", "m3", "full", "hint-l2", "hint-cosine", "hint-layers-1", "hint-layers-2",
          "hint-layers-3", "hint-layers-4", "hint-layers-5"};
}

PipelineConfig apply_variant(const PipelineConfig& cfg, const std::string& variant) {
  PipelineConfig c = cfg;
  auto& d = c.distill;
  auto no_teacher = [&] {
    d.teacher_enabled = false;
    d.lambda_recon = 0;
    d.lambda_hint = 0;
  };
  if (variant == "full" || variant == "baseline-abs") {
  } else if (variant == "m1") {
    no_teacher();
    d.pairing = Pairing::ri_sl;
  } else if (variant == "m2") {
    no_teacher();
    d.pairing = Pairing::si_sl;
  } else if (variant == "m3") {
    d.pairing = Pairing::ri_sl;
  } else if (variant == "hint-l2") {
    d.hint_metric = HintMetric::l2;
  } else if (variant == "hint-cosine") {
    d.hint_metric = HintMetric::cosine;
  } else if (variant.rfind("hint-layers-", 0) == 0) {
    try {
      std::size_t used = 0;
      d.hint_layers = std::stoi(variant.substr(12), &used);
      if (used != variant.size() - 12) throw std::invalid_argument(variant);
    } catch (const std::logic_error&) {
      throw ConfigError("unknown variant '" + variant + "'");
    }
  } else {
    throw ConfigError("unknown variant '" + variant + "'");
  }
  d.validate();
  return c;
}

void save_pairs(const fs::path& dir, const std::vector<SyntheticPair>& pairs) {
  fs::create_directories(dir);
  json j = json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto im = indexed("pair_", i, "_image.dsv"), lb = indexed("pair_", i, "_labels.dsv");
    io::save_volume(dir / im, pairs[i].image);
    io::save_labels(dir / lb, pairs[i].labels);
    j.push_back({{"image", im}, {"labels", lb}, {"source_id", pairs[i].source_id}});
  }
  write_text(dir / "pairs.json", j.dump(2) + "\n");
}

std::vector<SyntheticPair> load_pairs(const fs::path& dir) {
  const json j = read_json(dir / "pairs.json");
  std::vector<SyntheticPair> out;
  for (const auto& e : j) {
    const Volume img = io::load_volume(dir / e.at("image").get<std::string>());
    const LabelMap lab = io::load_labels(dir / e.at("labels").get<std::string>());
    out.emplace_back(img, lab, e.at("source_id").get<std::size_t>());
  }
  return out;
}

UNet load_unet(const fs::path& checkpoint) {
  const Checkpoint c = read_checkpoint(checkpoint);
  if (!c.meta.contains("unet")) throw ConfigError(checkpoint.string() + " is not a U-Net checkpoint");
  UNet net(unet_from_json(c.meta.at("unet")), 0);
  load_into(c, net.params());
  return net;
}

RegNet load_reg_net(const fs::path& checkpoint) {
  const Checkpoint c = read_checkpoint(checkpoint);
  if (!c.meta.contains("reg_net")) throw ConfigError(checkpoint.string() + " is not a registration checkpoint");
  RegNetConfig rc;
  const auto& r = c.meta.at("reg_net");
  rc.encoder_channels = r.at("encoder_channels").get<std::vector<int>>();
  rc.decoder_channels = r.at("decoder_channels").get<std::vector<int>>();
  rc.num_stages = r.at("num_stages").get<int>();
  rc.embedding_dim = r.at("embedding_dim").get<int>();
  RegNet net(rc, 0);
  load_into(c, net.params());
  return net;
}

std::vector<LabelMap> infer_from_checkpoint(const fs::path& student_checkpoint, const std::vector<Volume>& images) {
  const auto before = opened_checkpoints().size();
  const UNet student = load_unet(student_checkpoint);
  if (student.config().head != HeadKind::seg) throw ConfigError(student_checkpoint.string() + " is not a student");
  std::vector<LabelMap> out;
  for (const auto& img : images) out.push_back(infer_student(img, student));
  const auto opened = opened_checkpoints();
  for (std::size_t i = before; i < opened.size(); ++i) {
    if (fs::weakly_canonical(opened[i]) != fs::weakly_canonical(student_checkpoint)) {
      throw StageError("inference", "opened a model file other than the student checkpoint: " + opened[i].string());
    }
  }
  return out;
}

RegStageOutput run_registration_stage(const PipelineConfig& cfg, const Dataset& ds, const Logger& log) {
  const fs::path dir = out_root(cfg) / "registration";
  const fs::path ckpt = dir / "reg_net.ckpt";
  const fs::path marker = dir / "done.json";
  const json key = reg_key(cfg);
  RegStageOutput out{ckpt, {}};
  if (marker_matches(marker, key) && fs::exists(ckpt) && fs::exists(dir / "synthetic" / "pairs.json")) {
    say(log, "registration: reusing completed stage in " + dir.string());
    out.pairs = load_pairs(dir / "synthetic");
    return out;
  }
  return in_stage("registration", [&] {
    fs::create_directories(dir);
    fs::remove(marker);
    RegNet net(cfg.reg_net, derived_seed(cfg.seed, 3));
    std::ofstream hist(dir / "history.tsv", std::ios::trunc);
    hist << "epoch\ttotal\tsim\tsmooth\tcontrast\n";
    const auto res = train_registration(ds.atlas, ds.unlabeled, net, cfg.reg_loss, cfg.reg_optim,
                                        [&](int e, const RegEpochLoss& l) {
                                          hist << e + 1 << "\t" << g9(l.total) << "\t" << g9(l.sim) << "\t"
                                               << g9(l.smooth) << "\t" << g9(l.contrast) << "\n"
                                               << std::flush;
                                          if ((e + 1) % 10 == 0 || e == 0) {
                                            say(log, "registration epoch " + std::to_string(e + 1) + " loss " + g9(l.total));
                                          }
                                        });
    json hj = json::array();
    std::vector<Series> series{{"total", {}}, {"sim", {}}, {"smooth", {}}, {"contrast", {}}};
    for (const auto& l : res.history) {
      hj.push_back({{"total", l.total}, {"sim", l.sim}, {"smooth", l.smooth}, {"contrast", l.contrast}});
      series[0].values.push_back(l.total);
      series[1].values.push_back(l.sim);
      series[2].values.push_back(l.smooth);
      series[3].values.push_back(l.contrast);
    }
    json meta{{"kind", "reg_net"},
              {"config", config_to_json(cfg)},
              {"reg_net", config_to_json(cfg)["reg_net"]},
              {"epoch", res.history.size()},
              {"history", hj}};
    save_checkpoint(ckpt, meta, net.params());
    if (cfg.plots) write_loss_svg(dir / "loss_curve.svg", "registration loss", series);
    out.pairs = augment_dataset(ds.atlas, ds.unlabeled, net);
    save_pairs(dir / "synthetic", out.pairs);
    write_marker(marker, key);
    return out;
  });
}

DistillStageOutput run_distill_stage(const PipelineConfig& cfg, const Dataset& ds,
                                     const std::vector<SyntheticPair>& pairs, const fs::path& run_dir,
                                     const Logger& log) {
  const fs::path dir = run_dir / "distill";
  const fs::path marker = dir / "done.json";
  DistillStageOutput out{dir / "teacher.ckpt", dir / "student.ckpt"};
  const json key = distill_key(cfg);
  if (marker_matches(marker, key) && fs::exists(out.student_checkpoint)) {
    say(log, "distillation: reusing completed stage in " + dir.string());
    return out;
  }
  return in_stage("distillation", [&] {
    fs::create_directories(dir);
    fs::remove(marker);
    UNetConfig tc = cfg.distill.net, sc = cfg.distill.net;
    tc.head = HeadKind::rec;
    sc.head = HeadKind::seg;
    UNet teacher(tc, derived_seed(cfg.seed, 5));
    UNet student(sc, derived_seed(cfg.seed, 7));
    std::ofstream hist(dir / "history.tsv", std::ios::trunc);
    hist << "epoch\ttotal\tseg\trecon\thint\n";
    const auto res = train_distillation(pairs, ds.unlabeled, teacher, student, cfg.distill,
                                        [&](int e, const DistillEpochLoss& l) {
                                          hist << e + 1 << "\t" << g9(l.total) << "\t" << g9(l.seg) << "\t"
                                               << g9(l.recon) << "\t" << g9(l.hint) << "\n"
                                               << std::flush;
                                          if ((e + 1) % 10 == 0 || e == 0) {
                                            say(log, "distillation epoch " + std::to_string(e + 1) + " loss " + g9(l.total));
                                          }
                                        });
    json hj = json::array();
    std::vector<Series> series{{"total", {}}, {"seg", {}}, {"recon", {}}, {"hint", {}}};
    for (const auto& l : res.history) {
      hj.push_back({{"total", l.total}, {"seg", l.seg}, {"recon", l.recon}, {"hint", l.hint}});
      series[0].values.push_back(l.total);
      series[1].values.push_back(l.seg);
      series[2].values.push_back(l.recon);
      series[3].values.push_back(l.hint);
    }
    const json common{{"config", config_to_json(cfg)}, {"epoch", res.history.size()}, {"history", hj},
                      {"student_real_inputs", res.student_real_inputs}};
    json tm = common, sm = common;
    tm["kind"] = "teacher";
    tm["unet"] = unet_json(tc);
    sm["kind"] = "student";
    sm["unet"] = unet_json(sc);
    if (cfg.distill.teacher_enabled) save_checkpoint(out.teacher_checkpoint, tm, teacher.params());
    save_checkpoint(out.student_checkpoint, sm, student.params());
    if (cfg.plots) write_loss_svg(dir / "loss_curve.svg", "distillation loss", series);
    write_marker(marker, key);
    return out;
  });
}

std::vector<std::string> report_header(const PipelineConfig& cfg, const std::string& variant) {
  return {"distilseg evaluation report",
          "variant: " + variant,
          "seed: " + std::to_string(cfg.seed),
          "fp-mode: float32 network tensors, float64 losses and metrics, single thread, -ffp-contract=off"};
}

namespace {

EvalReport finish_report(const PipelineConfig& cfg, const Dataset& ds, const std::vector<LabelMap>& preds,
                         const fs::path& dir, const std::string& variant, fs::path* report_path) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < preds.size(); ++i) io::save_labels(dir / indexed("pred_", i, ".dsv"), preds[i]);
  const EvalReport rep = evaluate(preds, ds.test_labels, eval_labels_of(cfg, ds.num_classes),
                                  ds.test_labels.front().spacing());
  const auto header = report_header(cfg, variant);
  write_report_tsv(dir / "report.tsv", rep, header);
  std::map<std::string, std::string> meta{{"variant", variant}, {"seed", std::to_string(cfg.seed)}, {"fp_mode", header[3]}};
  write_report_json(dir / "report.json", rep, meta);
  if (cfg.plots) {
    std::map<int, double> dsc;
    for (const auto& [l, s] : rep.per_label) dsc[l] = s.dsc;
    write_bar_svg(dir / "dsc_per_label.svg", "DSC per label (" + variant + ")", dsc, "DSC");
  }
  if (report_path) *report_path = dir / "report.tsv";
  return rep;
}

PipelineResult run_variant(const PipelineConfig& cfg, const Dataset& ds, const RegStageOutput& reg,
                           const fs::path& run_dir, const std::string& variant, const Logger& log) {
  PipelineResult r;
  r.run_dir = run_dir;
  if (variant == "baseline-abs") {
    r.report = in_stage("inference", [&] {
      // Atlas propagation: warp the atlas labels onto each test image with the trained registration.
      const RegNet net = load_reg_net(reg.checkpoint);
      std::vector<LabelMap> preds;
      for (const auto& p : augment_dataset(ds.atlas, ds.test_images, net)) preds.push_back(p.labels);
      return finish_report(cfg, ds, preds, run_dir / "inference", variant, &r.report_path);
    });
    return r;
  }
  const auto dist = run_distill_stage(cfg, ds, reg.pairs, run_dir, log);
  r.report = in_stage("inference", [&] {
    say(log, "inference: " + variant);
    const auto preds = infer_from_checkpoint(dist.student_checkpoint, ds.test_images);
    if (cfg.dump_features) {
      const UNet student = load_unet(dist.student_checkpoint);
      for (std::size_t i = 0; i < ds.test_images.size(); ++i) {
        const auto out = student_forward(ds.test_images[i], student);
        for (std::size_t l = 0; l < out.features.size(); ++l) {
          const auto& f = out.features.layers[l];
          const std::vector<float> data(f.values.begin(), f.values.end());
          io::save_features(run_dir / "inference" / "features" / (indexed("case_", i, "") + indexed("_layer_", l + 1, ".dsv")),
                            data, f.dims[0], Shape3{f.dims[1], f.dims[2], f.dims[3]});
        }
      }
    }
    return finish_report(cfg, ds, preds, run_dir / "inference", variant, &r.report_path);
  });
  return r;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const Logger& log) {
  cfg.validate();
  const Dataset ds = in_stage("ingestion", [&] { return load_dataset(cfg); });
  say(log, "atlas: " + ds.atlas_source + ", " + std::to_string(ds.unlabeled.size()) + " unlabeled, " +
               std::to_string(ds.test_images.size()) + " test");
  const fs::path root = out_root(cfg);
  fs::create_directories(root);
  write_text(root / "config.json", config_to_json(cfg).dump(2) + "\n");
  const auto reg = run_registration_stage(cfg, ds, log);
  return run_variant(cfg, ds, reg, root / "run", "run", log);
}

AblationResult run_ablation(const PipelineConfig& cfg, const std::vector<std::string>& variants, const Logger& log) {
  cfg.validate();
  std::vector<PipelineConfig> cfgs;
  for (const auto& v : variants) cfgs.push_back(apply_variant(cfg, v));
  const Dataset ds = in_stage("ingestion", [&] { return load_dataset(cfg); });
  const fs::path root = out_root(cfg);
  const auto reg = run_registration_stage(cfg, ds, log);
  AblationResult res;
  std::ostringstream table;
  for (const auto& h : report_header(cfg, "ablation")) table << "# " << h << "\n";
  table << "variant\tmean_dsc\tstd_dsc\tmean_hd95_mm\tstd_hd95_mm\n";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    say(log, "variant " + variants[i]);
    const auto r = run_variant(cfgs[i], ds, reg, root / "ablation" / variants[i], variants[i], log);
    res.reports[variants[i]] = r.report;
    char line[256];
    std::snprintf(line, sizeof line, "%s\t%.6f\t%.6f\t%s\t%s\n", variants[i].c_str(), r.report.mean_dsc, r.report.std_dsc,
                  r.report.mean_hd95 ? std::to_string(*r.report.mean_hd95).c_str() : "undefined",
                  r.report.std_hd95 ? std::to_string(*r.report.std_hd95).c_str() : "undefined");
    table << line;
  }
  res.comparison_path = root / "ablation" / "comparison.tsv";
  write_text(res.comparison_path, table.str());
  return res;
}

}  // namespace distilseg
