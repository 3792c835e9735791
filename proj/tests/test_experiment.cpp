#include <doctest.h>

#include <cstdlib>
#include <string>

#include "tabcl/experiment.hpp"
#include "test_util.hpp"

using namespace tabcl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c;
  c.seed = 7;
  SyntheticConfig s;
  s.n = 160;
  s.d = 6;
  s.m = 3;
  s.imbalance_exponent = 1.0;
  c.data.synthetic = s;
  c.pretrain.epochs = 3;
  c.pretrain.batch_size = 32;
  c.pretrain.L = 4;
  c.pretrain.task.k = 2;
  c.encoder.d_out = 0;
  c.encoder.mlp_hidden = {8};
  for (auto& spec : c.classifiers) spec.epochs = 10;
  c.output_dir = out.string();
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + TABCL_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

void write_config(const ExperimentConfig& c, const fs::path& path) {
  testing::write_text(path, nlohmann::json(c).dump(2));
}

}  // namespace

TEST_CASE("config JSON round trip and seed plan") {
  testing::TempDir dir("cfg");
  auto c = small_config(dir.path());
  c.stacking = {StackingMode::Fuse, 0.25};
  c.data.class_order = {"c0", "c1", "c2"};
  const nlohmann::json j = c;
  const auto back = j.get<ExperimentConfig>();
  CHECK(nlohmann::json(back) == j);

  const auto r = resolve_seeds(c);
  const auto plan = seed_plan(7);
  CHECK(r.encoder.seed == plan.encoder);
  CHECK(r.pretrain.seed == plan.pretrain);
  CHECK(r.data.synthetic->seed == plan.data);
  CHECK(plan.encoder != plan.pretrain);
  CHECK(seed_plan(8).encoder != plan.encoder);

  // output location does not change the hash
  auto moved = j;
  moved["output_dir"] = "elsewhere";
  CHECK(config_hash(moved) == config_hash(j));
  moved["seed"] = 8;
  CHECK(config_hash(moved) != config_hash(j));

  auto both = j;
  both["data"]["csv"] = "x.csv";
  CHECK_THROWS(both.get<ExperimentConfig>());
}

TEST_CASE("prepared data is standardized on the train split only") {
  testing::TempDir dir("prep");
  const auto data = prepare_data(small_config(dir.path()));
  CHECK(data.train.size() + data.test.size() == 160);
  REQUIRE(data.train.standardization);
  for (std::size_t j = 0; j < data.train.dim(); ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < data.train.size(); ++i) mean += data.train.features(i, j);
    CHECK(std::abs(mean / data.train.size()) < 1e-12);
  }
}

TEST_CASE("end-to-end run is deterministic and writes its artifacts") {
  testing::TempDir a("runa"), b("runb");
  const auto ra = run_experiment(small_config(a.path()));
  const auto rb = run_experiment(small_config(b.path()));
  CHECK(ra.config_hash == rb.config_hash);
  CHECK(ra.evaluation.ssp.reports == rb.evaluation.ssp.reports);
  CHECK(ra.evaluation.origin.reports == rb.evaluation.origin.reports);
  CHECK(ra.evaluation.oap == rb.evaluation.oap);
  CHECK(ra.evaluation.ssp.reports.size() == 4);
  for (const char* f : {"manifest.json", "encoder.json", "pretrain_history.csv", "embeddings_train.csv",
                        "embeddings_test.csv", "reports_origin.json", "reports_ssp.json", "reports_ssp.csv",
                        "summary.json", "projection_origin.csv", "projection_ssp.csv",
                        "models/ssp_knn.json"}) {
    INFO(f);
    CHECK(fs::exists(a.path() / f));
  }
  CHECK(testing::read_text(a / "reports_ssp.json") == testing::read_text(b / "reports_ssp.json"));
  CHECK(testing::read_text(a / "encoder.json") == testing::read_text(b / "encoder.json"));

  // rerunning from the manifest reproduces the run
  testing::TempDir c("runc");
  auto from_manifest = load_experiment_config(a / "manifest.json");
  from_manifest.output_dir = c.path().string();
  const auto rc = run_experiment(from_manifest);
  CHECK(rc.config_hash == ra.config_hash);
  CHECK(testing::read_text(c / "reports_ssp.json") == testing::read_text(a / "reports_ssp.json"));
}

TEST_CASE("fusing with alpha 1 reproduces the origin path") {
  testing::TempDir dir("alpha1");
  auto c = small_config(dir.path());
  c.stacking = {StackingMode::Fuse, 1.0};
  const auto r = run_experiment(c);
  CHECK(r.evaluation.ssp.reports == r.evaluation.origin.reports);
  CHECK(r.evaluation.oap == 0.0);
}

TEST_CASE("alpha sweep emits one point per grid value") {
  testing::TempDir dir("sweep");
  auto c = small_config(dir.path());
  c.sweep.parameter = SweepParameter::Alpha;
  for (int i = 0; i <= 10; ++i) c.sweep.values.push_back(i / 10.0);
  const auto pts = run_sweep(c);
  REQUIRE(pts.size() == 11);
  CHECK(pts.back().value == 1.0);
  CHECK(pts.back().oap == 0.0);
  const auto csv = testing::read_text(dir / "sweep.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 12);

  c.sweep.parameter = SweepParameter::DPrime;
  c.sweep.values = {2.5};
  CHECK_THROWS_AS(run_sweep(c), StageError);
}

TEST_CASE("stage errors carry the stage name") {
  testing::TempDir dir("err");
  auto c = small_config(dir.path());
  c.data.synthetic.reset();
  c.data.csv_path = (dir / "missing.csv").string();
  try {
    run_experiment(c);
    FAIL("expected a data error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "data");
    CHECK(std::string(e.what()).rfind("[data] ", 0) == 0);
  }
}

TEST_CASE("CLI stages reproduce the full run bit for bit") {
  testing::TempDir dir("cli");
  const auto cfg_path = dir / "config.json";
  write_config(small_config(dir / "unused"), cfg_path);
  const auto full = dir / "full";
  const auto staged = dir / "staged";
  const std::string cfg = " --config \"" + cfg_path.string() + "\"";

  REQUIRE(run_cli("run" + cfg + " --out \"" + full.string() + "\"") == 0);
  REQUIRE(run_cli("pretrain" + cfg + " --out \"" + staged.string() + "\"") == 0);
  REQUIRE(run_cli("embed" + cfg + " --out \"" + staged.string() + "\"") == 0);
  REQUIRE(run_cli("train-eval" + cfg + " --out \"" + staged.string() + "\"") == 0);
  for (const char* f : {"encoder.json", "embeddings_train.csv", "embeddings_test.csv", "reports_ssp.json",
                        "reports_origin.json", "summary.json"}) {
    INFO(f);
    CHECK(testing::read_text(full / f) == testing::read_text(staged / f));
  }

  CHECK(run_cli("report --dir \"" + full.string() + "\"") == 0);
  // registries that do not match are rejected
  auto reports = read_reports_json(full / "reports_origin.json");
  reports.pop_back();
  write_reports_json(reports, dir / "short.json");
  CHECK(run_cli("report --ssp \"" + (full / "reports_ssp.json").string() + "\" --origin \"" +
                (dir / "short.json").string() + "\"") != 0);
  CHECK(run_cli("embed" + cfg + " --out \"" + (dir / "empty").string() + "\"") != 0);
  CHECK(run_cli("run --task bogus") != 0);
}
