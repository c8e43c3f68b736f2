#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fairmeta/cli.hpp"

namespace fairmeta::cli {
namespace {

const std::string kFixtures = FAIRMETA_FIXTURE_DIR;
const std::string kCli = FAIRMETA_CLI;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("fairmeta_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

json tiny_run(const std::string& out) {
  auto j = json::parse(R"({
    "method": "fair-maml",
    "repetitions": 2,
    "data": {"synthetic": {"records_per_task": 40, "n_train": 10, "n_val": 3, "n_test": 4}},
    "train": {"hidden1": 6, "hidden2": 6, "K": 5, "meta_batch_size": 3, "iterations": 12,
              "val_interval": 5},
    "eval": {"k": [5, 10]}
  })");
  j["output_dir"] = out;
  return j;
}

json discover_run(const std::string& out) {
  json j;
  j["output_dir"] = out;
  j["discover"] = {{"csv", kFixtures + "/discovery_fixture.csv"},
                   {"task_column", "district"},
                   {"target_column", "incidents"},
                   {"protected_columns", {"share_a", "share_b"}},
                   {"dag", kFixtures + "/race_income_crime.dag"},
                   {"dag_protected", "R"},
                   {"dag_target", "C"}};
  return j;
}

std::string write_config(const TempDir& dir, const json& j, const std::string& name = "config.json") {
  const auto p = (dir / name).string();
  std::ofstream(p) << j.dump(2);
  return p;
}

/// Runs the executable; returns its exit status.
int run_cli(const std::string& args, const TempDir& dir) {
  const std::string cmd = kCli + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                          (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

RunConfig config_of(const json& j) { return run_config_from_json(j); }

TEST(Overrides, DottedKeysAndValueTypes) {
  json doc = {{"train", {{"lambda", 1.0}}}};
  apply_override(doc, "train.lambda", "2.5");
  apply_override(doc, "train.order", "first");
  apply_override(doc, "eval.k", "[5]");
  apply_override(doc, "repetitions", "3");
  EXPECT_EQ(doc["train"]["lambda"], 2.5);
  EXPECT_EQ(doc["train"]["order"], "first");
  EXPECT_EQ(doc["eval"]["k"], json::array({5}));
  const auto rc = run_config_from_json(doc);
  EXPECT_EQ(rc.train.lambda, 2.5);
  EXPECT_EQ(rc.train.order, diffnet::GradientOrder::First);
  EXPECT_EQ(rc.eval.k, std::vector<std::size_t>{5});
  EXPECT_EQ(rc.repetitions, 3u);
  EXPECT_THROW(apply_override(doc, "train..x", "1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "repetitions.x", "1"), ConfigError);
}

TEST(Overrides, SeedPrecedence) {
  TempDir dir;
  const auto path = write_config(dir, {{"seed", 4}});
  EXPECT_EQ(load_run_config(path, {}, nullptr).seed, 4u);
  EXPECT_EQ(load_run_config(path, {}, "11").seed, 11u);
  EXPECT_EQ(load_run_config(path, {{"seed", "12"}}, "11").seed, 12u);
  EXPECT_THROW(load_run_config(path, {}, "eleven"), ConfigError);
}

TEST(RunConfigJson, RejectsInvalid) {
  EXPECT_THROW(config_of(json{{"repetitions", 0}}), ConfigError);
  EXPECT_THROW(config_of(json{{"methd", "maml"}}), ConfigError);
  EXPECT_THROW(config_of(json{{"method", "svm"}}), ConfigError);
  EXPECT_THROW(config_of(json{{"train", {{"c", 0}}}}), ConfigError);
  EXPECT_THROW(config_of(json{{"data", {{"source", "parquet"}}}}), ConfigError);
  EXPECT_THROW(config_of(json{{"eval", {{"k", {1}}}}}), ConfigError);
}

TEST(Train, ArtifactsAndSummaryAreRecomputable) {
  TempDir dir;
  const auto rc = config_of(tiny_run(dir.str()));
  const auto written = run_train(rc);
  EXPECT_EQ(written.size(), 2u * 2 + 1);
  for (std::size_t r = 0; r < 2; ++r) {
    const auto t = csv::read_file(run_csv_path(rc, r).string());
    EXPECT_EQ(t.header, run_csv_header());
    EXPECT_EQ(t.rows.size(), 12u);
    EXPECT_TRUE(fs::exists(checkpoint_path(rc, r)));
  }
  EXPECT_TRUE(slurp(run_csv_path(rc, 0)).starts_with("iteration,train_loss,train_md,val_loss,val_md,val_auc,val_ir\n"));

  // summary means are the plain mean of the last rows
  const auto summary = csv::read_file((dir / "summary.csv").string());
  ASSERT_EQ(summary.header, (std::vector<std::string>{"metric", "mean", "std"}));
  ASSERT_EQ(summary.rows.size(), 6u);
  const auto a = csv::read_file(run_csv_path(rc, 0).string()).rows.back();
  const auto b = csv::read_file(run_csv_path(rc, 1).string()).rows.back();
  for (std::size_t c = 1; c < 7; ++c) {
    const double x = csv::parse_number(a[c], 0, ""), y = csv::parse_number(b[c], 0, "");
    EXPECT_EQ(summary.rows[c - 1][0], run_csv_header()[c]);
    EXPECT_NEAR(csv::parse_number(summary.rows[c - 1][1], 0, ""), (x + y) / 2, 1e-15);
    EXPECT_NEAR(csv::parse_number(summary.rows[c - 1][2], 0, ""), std::abs(x - y) / 2, 1e-15);
  }

  // the recorded seeds are base + r
  EXPECT_EQ(metalearn::load_checkpoint(checkpoint_path(rc, 1).string()).config.seed, rc.seed + 1);
}

TEST(Train, SingleRepetitionHasZeroStd) {
  TempDir dir;
  auto j = tiny_run(dir.str());
  j["repetitions"] = 1;
  run_train(config_of(j));
  const auto summary = csv::read_file((dir / "summary.csv").string());
  for (const auto& row : summary.rows) EXPECT_EQ(row[2], "0") << row[0];
}

TEST(Eval, SingleKRowAndRoundTrip) {
  TempDir dir;
  auto j = tiny_run(dir.str());
  run_train(config_of(j));
  j["eval"]["k"] = {5};
  run_eval(config_of(j));
  const auto t = csv::read_file((dir / "eval.csv").string());
  EXPECT_EQ(t.header, eval_csv_header());
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0][0], "fair-maml");
  EXPECT_EQ(t.rows[0][1], "5");
  EXPECT_EQ(t.rows[0][2], "8");  // 4 test tasks x 2 checkpoints
  for (std::size_t c = 4; c < t.header.size(); ++c) EXPECT_NO_THROW(csv::parse_number(t.rows[0][c], 0, ""));
}

TEST(Eval, ConstantPredictorCheckpoint) {
  TempDir dir;
  auto j = tiny_run(dir.str());
  const auto rc = config_of(j);
  const auto ts = load_taskset(rc.data);
  metalearn::Checkpoint ck;
  ck.config = rc.train;
  ck.method = metalearn::Method::Baseline;
  ck.n_features = ts.n_features;
  ck.stats = ts.stats;
  ck.state = metalearn::TrainState(diffnet::MLPParams<double>(rc.train.net(ts.n_features)), 0);
  const auto ck_path = (dir / "constant.json").string();
  metalearn::save_checkpoint(ck, ck_path);
  j["eval"]["checkpoints"] = {ck_path};
  run_eval(config_of(j));
  const auto t = csv::read_file((dir / "eval.csv").string());
  ASSERT_EQ(t.rows.size(), 2u);
  for (const auto& row : t.rows) {
    EXPECT_EQ(row[0], "baseline");
    EXPECT_EQ(row[6], "0");    // md_mean
    EXPECT_EQ(row[10], "0.5");  // auc_mean
  }
}

TEST(Eval, DimensionMismatchIsAnError) {
  TempDir dir;
  auto j = tiny_run(dir.str());
  j["repetitions"] = 1;
  run_train(config_of(j));
  j["data"]["synthetic"]["n_features"] = 3;
  EXPECT_THROW(run_eval(config_of(j)), DimensionError);
}

TEST(Discover, HandCountedFixture) {
  TempDir dir;
  run_discover(config_of(discover_run(dir.str())));
  const auto t = csv::read_file((dir / "discovery.csv").string());
  EXPECT_EQ(t.header, (std::vector<std::string>{"protected_variable", "r", "flagged", "comparisons_total",
                                                "comparisons_skipped"}));
  ASSERT_EQ(t.rows.size(), 2u);
  // 6 of 18 comparisons within epsilon; see discovery_fixture_counts.txt
  EXPECT_EQ(t.rows[0], (std::vector<std::string>{"share_a", csv::format_number(6.0 / 18.0), "true", "18", "0"}));
  EXPECT_EQ(t.rows[1], (std::vector<std::string>{"share_b", "1", "false", "18", "0"}));

  EXPECT_EQ(slurp(dir / "dag_paths.csv"), "path\nR -> C\nR -> I -> C\n");
  EXPECT_EQ(slurp(dir / "dag_edges.csv"),
            "from,to,label\nR,C,unfair\nR,I,unfair\nI,C,partially-unfair\nA,C,fair\n");
}

TEST(Discover, IdenticalDistributionsNothingFlagged) {
  TempDir dir;
  auto j = discover_run(dir.str());
  j["discover"]["protected_columns"] = {"share_b"};
  j["discover"].erase("dag");
  const auto written = run_discover(config_of(j));
  EXPECT_EQ(written.size(), 1u);
  EXPECT_EQ(slurp(dir / "discovery.csv"),
            "protected_variable,r,flagged,comparisons_total,comparisons_skipped\nshare_b,1,false,18,0\n");
}

TEST(Discover, CyclicDagRejectedWithLine) {
  TempDir dir;
  auto j = discover_run(dir.str());
  j["discover"]["dag"] = kFixtures + "/cyclic.dag";
  try {
    run_discover(config_of(j));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_FALSE(fs::exists(dir / "discovery.csv"));
}

TEST(Executable, ExitStatusAndMessages) {
  TempDir dir;
  const auto good = write_config(dir, tiny_run((dir / "out").string()));
  EXPECT_EQ(run_cli("train --config " + good + " --repetitions 1", dir), 0);
  EXPECT_EQ(slurp(dir / "stdout.txt").find("summary.csv") != std::string::npos, true);

  EXPECT_EQ(run_cli("train --config " + good + " --train.lamda 1", dir), 2);
  EXPECT_NE(slurp(dir / "stderr.txt").find("lamda"), std::string::npos);
  EXPECT_EQ(run_cli("train --config " + (dir / "missing.json").string(), dir), 2);
  EXPECT_EQ(run_cli("", dir), 2);
  EXPECT_EQ(run_cli("train --config " + good + " stray", dir), 2);

  auto cyc = discover_run((dir / "disc").string());
  cyc["discover"]["dag"] = kFixtures + "/cyclic.dag";
  EXPECT_EQ(run_cli("discover --config " + write_config(dir, cyc, "cyc.json"), dir), 1);
  EXPECT_NE(slurp(dir / "stderr.txt").find("line 3"), std::string::npos);
}

TEST(Executable, TrainingAbortKeepsPartialCsv) {
  TempDir dir;
  auto j = tiny_run((dir / "out").string());
  j["repetitions"] = 1;
  j["train"]["alpha"] = 1e300;
  EXPECT_EQ(run_cli("train --config " + write_config(dir, j), dir), 1);
  EXPECT_NE(slurp(dir / "stderr.txt").find("non-finite"), std::string::npos);
  EXPECT_EQ(slurp(dir / "out" / "run_0.csv"), "iteration,train_loss,train_md,val_loss,val_md,val_auc,val_ir\n");
  EXPECT_FALSE(fs::exists(dir / "out" / "summary.csv"));
}

TEST(Executable, EnvironmentSeed) {
  TempDir dir;
  auto j = tiny_run((dir / "out").string());
  j["repetitions"] = 1;
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(run_cli("train --config " + cfg, dir), 0);
  const auto base = slurp(dir / "out" / "run_0.csv");
  ::setenv("FAIRMETA_SEED", "5", 1);
  const int rc = run_cli("train --config " + cfg, dir);
  ::unsetenv("FAIRMETA_SEED");
  ASSERT_EQ(rc, 0);
  EXPECT_NE(slurp(dir / "out" / "run_0.csv"), base);
  EXPECT_EQ(metalearn::load_checkpoint((dir / "out" / "checkpoint_0.json").string()).config.seed, 5u);
}

TEST(Executable, RerunsAreByteIdentical) {
  TempDir a, b;
  for (const auto* dir : {&a, &b}) {
    auto j = tiny_run((*dir / "out").string());
    j["discover"] = discover_run("")["discover"];
    const auto cfg = write_config(*dir, j);
    for (const char* cmd : {"gen-data", "train", "eval", "report", "discover"})
      ASSERT_EQ(run_cli(std::string(cmd) + " --config " + cfg, *dir), 0) << cmd << slurp(*dir / "stderr.txt");
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a / "out")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a / "out");
    EXPECT_EQ(slurp(entry.path()), slurp(b / "out" / rel.string())) << rel;
    ++compared;
  }
  // data/{train,val,test}, run+checkpoint x2, summary, eval, discovery, dag paths/edges
  EXPECT_EQ(compared, 3u + 4 + 1 + 1 + 3);
}

}  // namespace
}  // namespace fairmeta::cli
