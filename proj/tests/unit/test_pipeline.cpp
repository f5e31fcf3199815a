#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "../oracles.hpp"
#include "distilseg/checkpoint.hpp"
#include "distilseg/error.hpp"
#include "distilseg/io.hpp"
#include "distilseg/ncc.hpp"
#include "distilseg/pipeline.hpp"

using namespace distilseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// A small dataset and a config that trains in a few seconds.
PipelineConfig tiny_config(const fs::path& root) {
  static const fs::path manifest = [] {
    ToySpec s;
    s.shape = {16, 16, 16};
    s.num_volumes = 3;
    s.num_test = 2;
    s.deform_magnitude = 1.5;
    s.smoothness = 3;
    s.seed = 4;
    return write_toy_dataset(generate_toy_dataset(s), s, fresh_dir("distilseg_test_pipeline_data"));
  }();
  nlohmann::json j = {
      {"manifest", manifest.string()},
      {"output_dir", (root / "out").string()},
      {"seed", 1},
      {"plots", false},
      {"reg_net", {{"encoder_channels", {4, 8}}, {"decoder_channels", {8, 4}}, {"num_stages", 2}, {"embedding_dim", 8}}},
      {"reg_loss", {{"cc_window", 5}}},
      {"reg_optim", {{"epochs", 2}, {"learning_rate", 1e-3}, {"batch_size", 2}}},
      {"distill", {{"epochs", 2}, {"stage_widths", {4, 6}}, {"num_stages", 1}}},
  };
  return config_from_json(j);
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(DISTILSEG_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("atlas selection matches the exhaustive mean-ncc oracle") {
  std::mt19937_64 rng(71);
  const Shape3 s{6, 6, 6};
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Volume> cands, refs;
    for (int i = 0; i < 5; ++i) cands.push_back(oracle::random_volume(rng, s));
    for (int i = 0; i < 5; ++i) refs.push_back(oracle::random_volume(rng, s));
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < cands.size(); ++c) {
      double m = 0;
      for (const auto& r : refs) m += oracle::ncc(cands[c], r);
      m /= static_cast<double>(refs.size());
      if (m > best_score) {
        best_score = m;
        best = c;
      }
    }
    CHECK(select_atlas(cands, refs) == best);
  }
}

TEST_CASE("atlas selection edge cases") {
  std::mt19937_64 rng(72);
  const Shape3 s{6, 6, 6};
  const Volume target = oracle::random_volume(rng, s);
  std::vector<Volume> cands;
  for (int i = 0; i < 3; ++i) cands.push_back(oracle::random_volume(rng, s));
  cands.push_back(target);
  CHECK(select_atlas(cands, {target}) == 3);
  CHECK(select_atlas({cands[1]}, {target}) == 0);
  CHECK(select_atlas({target, target}, {cands[0]}) == 0);
  CHECK_THROWS_AS(select_atlas({}, {target}), ValidationError);
  CHECK_THROWS_AS(select_atlas(cands, {}), ValidationError);
  CHECK_THROWS_AS(select_atlas({Volume::zeros({6, 6, 5})}, {target}), DimensionError);
}

TEST_CASE("config parsing") {
  const auto root = fresh_dir("distilseg_test_cfg");
  const auto cfg = tiny_config(root);
  CHECK(cfg.reg_optim.seed == 1 * 1000003ULL + 11);
  CHECK(cfg.distill.seed == 1 * 1000003ULL + 29);
  CHECK(cfg.distill.net.stage_widths == std::vector<int>{4, 6});

  const auto round = config_from_json(config_to_json(cfg));
  CHECK(config_to_json(round) == config_to_json(cfg));

  auto j = config_to_json(cfg);
  j["unknown_key"] = 1;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = config_to_json(cfg);
  j["distill"]["lambda_hnt"] = 1;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = config_to_json(cfg);
  j["distill"]["hint_metric"] = "manhattan";
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = config_to_json(cfg);
  j["distill"]["hint_layers"] = 9;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = config_to_json(cfg);
  j["unlabeled_fraction"] = 0;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  j = config_to_json(cfg);
  j.erase("manifest");
  CHECK_THROWS_AS(config_from_json(j), ConfigError);

  {
    std::ofstream(root / "rel.json") << R"({"manifest": "data/manifest.json"})";
  }
  CHECK(load_config(root / "rel.json").manifest == root / "data" / "manifest.json");
  CHECK_THROWS_AS(load_config(root / "missing.json"), ConfigError);
}

TEST_CASE("output root override") {
  PipelineConfig c;
  c.output_dir = "runs/a";
  ::unsetenv("DISTILSEG_OUTPUT_ROOT");
  CHECK(resolve_output_dir(c) == fs::path("runs/a"));
  ::setenv("DISTILSEG_OUTPUT_ROOT", "/tmp/elsewhere", 1);
  CHECK(resolve_output_dir(c) == fs::path("/tmp/elsewhere/runs/a"));
  c.output_dir = "/abs/out";
  CHECK(resolve_output_dir(c) == fs::path("/abs/out"));
  ::unsetenv("DISTILSEG_OUTPUT_ROOT");
}

TEST_CASE("ablation variants") {
  const auto root = fresh_dir("distilseg_test_variants");
  const auto cfg = tiny_config(root);
  auto by_hand = cfg;
  by_hand.distill.teacher_enabled = false;
  by_hand.distill.lambda_recon = 0;
  by_hand.distill.lambda_hint = 0;
  by_hand.distill.pairing = Pairing::si_sl;
  CHECK(config_to_json(apply_variant(cfg, "m2")) == config_to_json(by_hand));
  CHECK(config_to_json(apply_variant(cfg, "full")) == config_to_json(cfg));
  CHECK(apply_variant(cfg, "m1").distill.pairing == Pairing::ri_sl);
  CHECK_FALSE(apply_variant(cfg, "m1").distill.teacher_enabled);
  CHECK(apply_variant(cfg, "m3").distill.teacher_enabled);
  CHECK(apply_variant(cfg, "m3").distill.pairing == Pairing::ri_sl);
  CHECK(apply_variant(cfg, "hint-l2").distill.hint_metric == HintMetric::l2);
  CHECK(apply_variant(cfg, "hint-layers-1").distill.hint_layers == 1);
  CHECK_THROWS_AS(apply_variant(cfg, "hint-layers-x"), ConfigError);
  CHECK_THROWS_AS(apply_variant(cfg, "hint-layers-9"), ConfigError);
  CHECK_THROWS_AS(apply_variant(cfg, "m4"), ConfigError);
  auto deep = cfg;
  deep.distill.net = UNetConfig{};
  for (const auto& v : known_variants()) CHECK_NOTHROW(apply_variant(deep, v));
}

TEST_CASE("evaluation labels default to all foreground classes") {
  PipelineConfig c;
  CHECK(eval_labels_of(c, 4) == std::vector<int>{1, 2, 3});
  c.eval_labels = {2};
  CHECK(eval_labels_of(c, 4) == std::vector<int>{2});
}

TEST_CASE("end-to-end run on a small dataset") {
  const auto root = fresh_dir("distilseg_test_e2e");
  const auto cfg = tiny_config(root);
  std::vector<std::string> lines;
  const auto res = run_pipeline(cfg, [&](const std::string& s) { lines.push_back(s); });
  REQUIRE(fs::exists(res.report_path));
  const auto report = slurp(res.report_path);
  const auto header = report_header(cfg, "run");
  REQUIRE(header.size() >= 4);
  CHECK(header[0] == "distilseg evaluation report");
  CHECK(header[1] == "variant: run");
  CHECK(header[2] == "seed: 1");
  CHECK(header[3].rfind("fp-mode: ", 0) == 0);
  for (const auto& h : header) CHECK(report.find("# " + h) != std::string::npos);
  CHECK(res.report.per_label.size() == 3);

  SUBCASE("a second run in a fresh directory is byte-identical") {
    const auto other = fresh_dir("distilseg_test_e2e_b");
    const auto res2 = run_pipeline(tiny_config(other));
    CHECK(slurp(res2.report_path) == report);
    CHECK(slurp(res2.report_path.parent_path() / "report.json") == slurp(res.report_path.parent_path() / "report.json"));
  }
  SUBCASE("rerunning reuses completed stages") {
    std::vector<std::string> again;
    const auto res2 = run_pipeline(cfg, [&](const std::string& s) { again.push_back(s); });
    CHECK(slurp(res2.report_path) == report);
    int reused = 0;
    for (const auto& l : again) reused += l.find("reusing") != std::string::npos;
    CHECK(reused == 2);
  }
  SUBCASE("a changed config invalidates the stages") {
    auto c2 = cfg;
    c2.distill.epochs = 3;
    std::vector<std::string> again;
    run_pipeline(c2, [&](const std::string& s) { again.push_back(s); });
    int reused = 0;
    for (const auto& l : again) reused += l.find("reusing") != std::string::npos;
    CHECK(reused == 1);
  }
  SUBCASE("inference needs only the student checkpoint") {
    const auto ds = load_dataset(cfg);
    const auto student = res.run_dir / "distill" / "student.ckpt";
    const auto before = infer_from_checkpoint(student, ds.test_images);
    const auto lone = fresh_dir("distilseg_test_lone");
    fs::copy_file(student, lone / "student.ckpt");
    fs::remove_all(resolve_output_dir(cfg));
    const auto n = opened_checkpoints().size();
    const auto after = infer_from_checkpoint(lone / "student.ckpt", ds.test_images);
    REQUIRE(opened_checkpoints().size() == n + 1);
    REQUIRE(after.size() == before.size());
    for (std::size_t i = 0; i < after.size(); ++i) {
      CHECK(std::equal(after[i].data().begin(), after[i].data().end(), before[i].data().begin()));
    }
  }
}

TEST_CASE("command-line exit codes") {
  const auto root = fresh_dir("distilseg_test_cli");
  CHECK(run_cli("") == 1);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("make-toy") == 1);
  CHECK(run_cli("--help") == 0);

  {
    std::ofstream(root / "bad.json") << R"({"manifest": "x.json", "bogus": 1})";
  }
  CHECK(run_cli("run --config " + (root / "bad.json").string()) == 2);
  {
    std::ofstream(root / "nodata.json") << R"({"manifest": "does_not_exist.json"})";
  }
  CHECK(run_cli("run --config " + (root / "nodata.json").string()) == 2);

  {
    std::ofstream(root / "spec.json") << R"({"shape": [16, 16, 16], "num_volumes": 2, "num_test": 1, "deform_magnitude": 1.0})";
  }
  CHECK(run_cli("make-toy --out " + (root / "toy").string() + " --spec " + (root / "spec.json").string()) == 0);
  CHECK(fs::exists(root / "toy" / "manifest.json"));

  const auto m = read_manifest(root / "toy" / "manifest.json");
  const auto t = m.test_labels[0].string();
  CHECK(run_cli("evaluate --pred " + t + " --truth " + t + " --out " + (root / "r.tsv").string()) == 0);
  CHECK(slurp(root / "r.tsv").find("mean\t") != std::string::npos);
  CHECK(run_cli("evaluate --pred " + t + " --truth " + t + " " + t + " --out " + (root / "r.tsv").string()) == 2);
  CHECK(run_cli("evaluate --pred " + (root / "missing.dsv").string() + " --truth " + t + " --out " +
                (root / "r.tsv").string()) == 3);
}
