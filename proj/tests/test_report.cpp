#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <unistd.h>

#include "basinlab/report.hpp"

using namespace basinlab;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("basinlab-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

nlohmann::json tiny_manifest(const std::string& family = "constrained") {
  return nlohmann::json::parse(R"({
    "experiment": "tiny",
    "dataset": {"kind": "blobs", "num_classes": 3, "clusters_per_class": 1, "n_train": 60, "n_test": 60,
                "noise_dims": 0, "spread": 0.4},
    "model": {"kind": "mlp", "hidden": [8]},
    "train": {"epochs": 3, "batch_size": 15},
    "ensemble": {"family": ")" + family + R"(", "members": 3, "split_epoch": 1},
    "metrics": ["accuracy", "q_pair", "q_joint", "diversity", "plane"],
    "metric_options": {"q_joint_samples": 4, "lambda_points": 5, "plane_resolution": 4}
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

std::string schema_path(const nlohmann::json& j) {
  try {
    parse_manifest(j);
  } catch (const SchemaError& e) {
    return e.field_path;
  }
  return "";
}

void write_metrics(const fs::path& p, std::uint64_t seed, double v) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << nlohmann::json{{"experiment", "e"}, {"seed", seed}, {"family", "deep"},
                                     {"records", {{{"metric", "ensemble_accuracy"}, {"value", v}}}}}
                          .dump();
}

}  // namespace

TEST(Manifest, DefaultsAndRoundTrip) {
  const ExperimentManifest m = parse_manifest(tiny_manifest());
  EXPECT_EQ(m.ensemble.family, Family::constrained);
  EXPECT_EQ(m.ensemble.members, 3u);
  EXPECT_EQ(m.train.epochs, 3u);
  EXPECT_EQ(m.train.peak_lr, desk_train_config().peak_lr);
  EXPECT_EQ(m.seeds, std::vector<std::uint64_t>{0});
  EXPECT_EQ(to_json(parse_manifest(to_json(m))), to_json(m));
}

TEST(Manifest, SchemaErrorsNameTheField) {
  auto j = tiny_manifest();
  j["ensemble"]["famly"] = "deep";
  EXPECT_EQ(schema_path(j), "$.ensemble.famly");
  j = tiny_manifest();
  j["train"]["epochs"] = "ten";
  EXPECT_EQ(schema_path(j), "$.train.epochs");
  j = tiny_manifest();
  j.erase("experiment");
  EXPECT_EQ(schema_path(j), "$.experiment");
  j = tiny_manifest();
  j["ensemble"]["family"] = "bagging";
  EXPECT_EQ(schema_path(j), "$.ensemble.family");
  j = tiny_manifest();
  j["ensemble"]["split_epoch"] = 9;
  EXPECT_EQ(schema_path(j), "$.ensemble.split_epoch");
  j = tiny_manifest();
  j["metrics"] = {"accuracy", "sharpness"};
  EXPECT_EQ(schema_path(j), "$.metrics[1]");
}

TEST(Manifest, SweGetsAFloor) {
  auto j = tiny_manifest("swe");
  EXPECT_EQ(parse_manifest(j).train.floor_lr, 0.01);
}

TEST(Manifest, LoadErrors) {
  TempDir t;
  EXPECT_THROW(load_manifest(t.path() / "missing.json"), FormatError);
  std::ofstream(t.path() / "bad.json") << "{ not json";
  EXPECT_THROW(load_manifest(t.path() / "bad.json"), SchemaError);
}

TEST(Table, MeanAndSampleStd) {
  TempDir t;
  for (int s = 1; s <= 3; ++s) write_metrics(t.path() / ("seed-" + std::to_string(s)) / "metrics.json", s, s);
  const std::string csv = cmd_table({t.path()}, "csv");
  EXPECT_EQ(csv, "experiment,family,metric,mean,std,seeds\ne,deep,ensemble_accuracy,2.00,1.00,3\n");
  const std::string text = cmd_table({t.path()}, "text");
  EXPECT_NE(text.find("2.00 ± 1.00"), std::string::npos);
  EXPECT_THROW(cmd_table({t.path()}, "xml"), UsageError);
  EXPECT_THROW(cmd_table({t.path() / "nope"}, "csv"), FormatError);
  write_metrics(t.path() / "one" / "metrics.json", 1, 5);
  EXPECT_EQ(aggregate(read_records({t.path() / "one"}))[0].stddev, 0.0);
}

TEST(Plot, EmptyInputsWarnAndDrawAxes) {
  TempDir t;
  for (const std::string kind : {"interpolation", "scatter", "ablation", "plane"}) {
    std::ostringstream warn;
    const std::string svg = cmd_plot(kind, {t.path()}, warn);
    EXPECT_NE(svg.find("<svg"), std::string::npos) << kind;
    EXPECT_NE(warn.str().find("warning"), std::string::npos) << kind;
  }
  std::ostringstream warn;
  EXPECT_THROW(cmd_plot("pie", {t.path()}, warn), UsageError);
}

class RunTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    RunOverrides ov;
    ov.out = dir_->path().string();
    first_ = cmd_run(parse_manifest(tiny_manifest()), ov);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path seed0() { return seed_dir(dir_->path(), "tiny", 0); }

  static TempDir* dir_;
  static RunSummary first_;
};

TempDir* RunTest::dir_ = nullptr;
RunSummary RunTest::first_;

TEST_F(RunTest, WritesArtifacts) {
  EXPECT_EQ(first_.runs_trained, 4u);  // trunk plus three members
  EXPECT_EQ(first_.runs_cached, 0u);
  for (const char* f : {"manifest.json", "metrics.json", "plane.csv", "member-0", "member-2", "trunk"})
    EXPECT_TRUE(fs::exists(seed0() / f)) << f;
  EXPECT_EQ(load_members(seed0()).size(), 3u);
  const auto metrics = read_json_file(seed0() / "metrics.json");
  EXPECT_EQ(metrics["family"], "constrained");
  EXPECT_EQ(metrics["reports"]["plane"]["loss"].size(), 16u);
  EXPECT_EQ(metrics["reports"]["q_pair"]["q_pair"].size(), 5u);
}

TEST_F(RunTest, RerunReusesCheckpoints) {
  const std::string before = slurp(seed0() / "metrics.json");
  RunOverrides ov;
  ov.out = dir_->path().string();
  const RunSummary again = cmd_run(parse_manifest(tiny_manifest()), ov);
  EXPECT_EQ(again.runs_trained, 0u);
  EXPECT_EQ(again.runs_cached, 4u);
  EXPECT_EQ(slurp(seed0() / "metrics.json"), before);
}

TEST_F(RunTest, MismatchedManifestIsRefused) {
  auto j = tiny_manifest();
  j["train"]["epochs"] = 4;
  RunOverrides ov;
  ov.out = dir_->path().string();
  EXPECT_THROW(cmd_run(parse_manifest(j), ov), UsageError);
}

TEST_F(RunTest, PostHocCommands) {
  const auto a = cmd_align(seed0(), "pcd", 2);
  EXPECT_EQ(a["method"], "pcd");
  EXPECT_EQ(load_members(seed0() / "aligned-pcd").size(), 3u);
  const auto c = cmd_connect(seed0() / "aligned-pcd", 3, 5, "test");
  EXPECT_EQ(c["q_joint"]["q_joint"].size(), 3u);
  EXPECT_TRUE(fs::exists(seed0() / "aligned-pcd" / "connect.json"));
  const auto d = cmd_diversity(seed0(), "train");
  EXPECT_EQ(d["eval_split"], "train");
  cmd_plane(seed0(), 3, 0.1, "test");
  const std::string csv = slurp(seed0() / "plane.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
  EXPECT_THROW(cmd_align(seed0(), "sinkhorn", 2), UsageError);
  EXPECT_THROW(cmd_connect(dir_->path(), 3, 5, "test"), FormatError);
}

TEST_F(RunTest, PlanePlotAndTable) {
  std::ostringstream warn;
  cmd_plane(seed0(), 25, 0.2, "test");
  const std::string svg = cmd_plot("plane", {seed0() / "plane.json"}, warn);
  EXPECT_EQ(count(svg, "class=\"cell\""), 625u);
  EXPECT_EQ(count(svg, "class=\"anchor\""), 3u);
  EXPECT_EQ(cmd_plot("plane", {seed0() / "plane.json"}, warn), svg);
  const std::string interp = cmd_plot("interpolation", {seed0() / "metrics.json"}, warn);
  EXPECT_EQ(count(interp, "class=\"series\""), 1u);
  EXPECT_EQ(count(interp, "class=\"zero\""), 1u);
  EXPECT_NE(cmd_table({seed0() / "metrics.json"}, "csv").find("tiny,constrained,q_joint,"), std::string::npos);
}
