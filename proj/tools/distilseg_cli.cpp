// distilseg command-line tool.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "distilseg/checkpoint.hpp"
#include "distilseg/error.hpp"
#include "distilseg/io.hpp"
#include "distilseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace distilseg;

namespace {

enum Exit { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

void log_line(const std::string& s) { std::cerr << "[distilseg] " << s << std::endl; }

std::vector<Volume> load_images(const std::vector<std::string>& paths) {
  std::vector<Volume> v;
  for (const auto& p : paths) v.push_back(io::load_volume(p).normalized());
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot 3D segmentation: registration-based augmentation and teacher-student distillation"};
  app.require_subcommand(1);

  // make-toy
  auto* toy = app.add_subcommand("make-toy", "Generate the synthetic toy dataset");
  std::string toy_out, toy_spec_path;
  ToySpec spec;
  toy->add_option("--out", toy_out, "Output directory")->required();
  toy->add_option("--spec", toy_spec_path, "JSON file with ToySpec fields");
  toy->add_option("--seed", spec.seed, "Generator seed");
  toy->add_option("--num-volumes", spec.num_volumes, "Unlabeled training members");
  toy->add_option("--num-test", spec.num_test, "Held-out members");

  // select-atlas
  auto* sel = app.add_subcommand("select-atlas", "Pick the candidate with the highest mean NCC to the references");
  std::vector<std::string> cands, refs;
  sel->add_option("--candidates", cands, "Candidate volumes")->required();
  sel->add_option("--references", refs, "Reference volumes")->required();

  // Config-driven subcommands.
  std::string config_path;
  auto* train_reg = app.add_subcommand("train-reg", "Stage 1: train the registration network and augment");
  auto* augment = app.add_subcommand("augment", "Regenerate synthetic pairs from a registration checkpoint");
  auto* train_distill = app.add_subcommand("train-distill", "Stage 2: train teacher and student");
  auto* run = app.add_subcommand("run", "Run all three stages and evaluate");
  auto* ablate = app.add_subcommand("ablate", "Run ablation variants side by side");
  for (auto* sc : {train_reg, augment, train_distill, run, ablate}) {
    sc->add_option("--config", config_path, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
  }
  std::string reg_ckpt;
  augment->add_option("--checkpoint", reg_ckpt, "Registration checkpoint (default: the stage output)");
  bool dump = false;
  run->add_flag("--dump-features", dump, "Write student feature maps of every test case");
  std::vector<std::string> variants = {"baseline-abs", "m2", "full", "hint-l2"};
  ablate->add_option("--variants", variants, "Variants to run")->delimiter(',');

  // infer
  auto* infer = app.add_subcommand("infer", "Predict labels with a student checkpoint only");
  std::string student, infer_out;
  std::vector<std::string> images;
  infer->add_option("--student", student, "Student checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--images", images, "Input volumes")->required();
  infer->add_option("--out", infer_out, "Output directory")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Score predicted label maps against ground truth");
  std::vector<std::string> preds, truths;
  std::vector<int> labels;
  std::string report_out;
  eval->add_option("--pred", preds, "Predicted label maps")->required();
  eval->add_option("--truth", truths, "Ground-truth label maps")->required();
  eval->add_option("--labels", labels, "Labels to score (default: all foreground)")->delimiter(',');
  eval->add_option("--out", report_out, "Report path (.tsv; a .json is written alongside)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*toy) {
      if (!toy_spec_path.empty()) {
        std::ifstream in(toy_spec_path);
        if (!in) throw ConfigError("cannot read " + toy_spec_path);
        const auto seed = spec.seed;
        spec = toy_spec_from_json(nlohmann::json::parse(in));
        if (toy->count("--seed")) spec.seed = seed;
      }
      const auto ds = generate_toy_dataset(spec);
      std::cout << write_toy_dataset(ds, spec, toy_out).string() << "\n";
    } else if (*sel) {
      std::cout << select_atlas(load_images(cands), load_images(refs)) << "\n";
    } else if (*train_reg) {
      const auto cfg = load_config(config_path);
      const auto ds = load_dataset(cfg);
      const auto out = run_registration_stage(cfg, ds, log_line);
      std::cout << out.checkpoint.string() << "\n";
    } else if (*augment) {
      const auto cfg = load_config(config_path);
      const auto ds = load_dataset(cfg);
      const fs::path dir = resolve_output_dir(cfg) / "registration";
      const fs::path ck = reg_ckpt.empty() ? dir / "reg_net.ckpt" : fs::path(reg_ckpt);
      const auto pairs = augment_dataset(ds.atlas, ds.unlabeled, load_reg_net(ck));
      save_pairs(dir / "synthetic", pairs);
      std::cout << (dir / "synthetic").string() << "\n";
    } else if (*train_distill) {
      const auto cfg = load_config(config_path);
      const auto ds = load_dataset(cfg);
      const fs::path syn = resolve_output_dir(cfg) / "registration" / "synthetic";
      if (!fs::exists(syn / "pairs.json")) throw ConfigError("no synthetic pairs; run train-reg first");
      const auto out = run_distill_stage(cfg, ds, load_pairs(syn), resolve_output_dir(cfg) / "run", log_line);
      std::cout << out.student_checkpoint.string() << "\n";
    } else if (*run) {
      auto cfg = load_config(config_path);
      if (dump) cfg.dump_features = true;
      const auto res = run_pipeline(cfg, log_line);
      std::cout << res.report_path.string() << "\n";
      std::printf("mean DSC %.6f\n", res.report.mean_dsc);
    } else if (*ablate) {
      const auto cfg = load_config(config_path);
      const auto res = run_ablation(cfg, variants, log_line);
      std::cout << res.comparison_path.string() << "\n";
      for (const auto& [name, rep] : res.reports) std::printf("%-14s mean DSC %.6f\n", name.c_str(), rep.mean_dsc);
    } else if (*infer) {
      const auto vols = load_images(images);
      const auto out = infer_from_checkpoint(student, vols);
      fs::create_directories(infer_out);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const fs::path src(images[i]);
        std::string stem = src.filename().string();
        for (const char* ext : {".nii.gz", ".nii", ".dsv"}) {
          const std::string e(ext);
          if (stem.size() > e.size() && stem.compare(stem.size() - e.size(), e.size(), e) == 0) {
            stem.resize(stem.size() - e.size());
            break;
          }
        }
        const fs::path dst = fs::path(infer_out) / (stem + "_pred" + (io::is_nifti(src) ? ".nii.gz" : ".dsv"));
        io::save_labels(dst, out[i]);
        std::cout << dst.string() << "\n";
      }
    } else if (*eval) {
      if (preds.size() != truths.size()) throw ValidationError("--pred and --truth need the same number of files");
      std::vector<LabelMap> p, t;
      int C = 0;
      for (const auto& f : truths) {
        t.push_back(io::load_labels(f));
        C = std::max(C, t.back().num_classes());
      }
      for (const auto& f : preds) {
        p.push_back(io::load_labels(f));
        C = std::max(C, p.back().num_classes());
      }
      if (labels.empty()) {
        for (int c = 1; c < C; ++c) labels.push_back(c);
      }
      const auto rep = evaluate(p, t, labels, t.front().spacing());
      write_report_tsv(report_out, rep, {"distilseg evaluation report"});
      fs::path js(report_out);
      js.replace_extension(".json");
      write_report_json(js, rep);
      std::cout << report_tsv_string(rep);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const StageError& e) {
    std::cerr << "error in stage " << e.stage() << ": " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
