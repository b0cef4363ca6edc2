#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dran/data.hpp"
#include "dran/hash.hpp"
#include "support.hpp"

#ifndef DRAN_CLI_PATH
#error "DRAN_CLI_PATH must point at the dran executable"
#endif

using dran::testing::TempDir;
using dran::testing::write_text;
using nlohmann::json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(DRAN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json load(const std::string& path) {
  std::ifstream in(path);
  return json::parse(in);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(dran::detail::split_csv_line(line));
  return rows;
}

const char* kTinyConfig =
    R"({"L":8,"H":4,"d_model":8,"heads":2,"tem_layers":1,"spa_layers":1,"c_e":8,)"
    R"("latent":8,"ffn":16,"mlp_hidden":8,"batch":32,"epochs":2})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(run("synth --nodes 4 --steps 200 --shift mean:5@100 --seed 31 --out " +
                  dir.file("s")),
              0);
    write_text(dir.file("tiny.json"), kTinyConfig);
  }
  std::string panel() const { return dir.file("s/panel.csv"); }
  std::string train_args(const std::string& out) const {
    return "--config " + dir.file("tiny.json") + " --data " + panel() + " --out " + dir.file(out);
  }
  TempDir dir{"cli"};
};

}  // namespace

TEST_F(Cli, SynthShapeAndDeterminism) {
  ASSERT_EQ(run("synth --nodes 8 --steps 400 --shift mean:5@200 --seed 31 --out " + dir.file("a")), 0);
  ASSERT_EQ(run("synth --nodes 8 --steps 400 --shift mean:5@200 --seed 31 --out " + dir.file("b")), 0);
  const auto p = dran::load_csv(dir.file("a/panel.csv"));
  EXPECT_EQ(p.values.shape(), (dran::Shape{400, 8, 1}));
  EXPECT_EQ(dran::git_file_hash(dir.file("a/panel.csv")), dran::git_file_hash(dir.file("b/panel.csv")));
  EXPECT_EQ(load(dir.file("a/shift.json"))["shift"]["mean_jump"], 5.0);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("synth --steps 400 --out " + dir.file("x")), 2);
  EXPECT_EQ(run("synth --nodes 8 --shift jump:3 --out " + dir.file("x")), 2);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("train " + train_args("t") + " --seeds 35..31"), 2);
  EXPECT_EQ(run("train " + train_args("t") + " --ablate no_such"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  EXPECT_EQ(run("eval --checkpoint " + dir.file("missing.ckpt") + " --data " + panel()), 1);
  write_text(dir.file("bad.json"), R"({"L": 8, "bogus": 1})");
  EXPECT_EQ(run("train --config " + dir.file("bad.json") + " --data " + panel() + " --out " +
                dir.file("t")),
            1);
  EXPECT_EQ(run("train " + train_args("t") + " --epochs 2 --lr 1e300"), 1);
}

TEST_F(Cli, TrainAggregatesSeedsAndReplaysManifest) {
  ASSERT_EQ(run("train " + train_args("t") + " --seeds 31..35"), 0);
  const json agg = load(dir.file("t/aggregate.json"));
  ASSERT_EQ(agg["rows"].size(), 5u);
  std::vector<double> maes;
  for (const auto& r : agg["rows"]) maes.push_back(r["test_mae"].get<double>());
  double mean = 0.0;
  for (double m : maes) mean += m / 5.0;
  EXPECT_NEAR(agg["mean"]["mae"].get<double>(), mean, 1e-12);
  EXPECT_GT(agg["std"]["mae"].get<double>(), 0.0);
  EXPECT_EQ(agg["rows"][0]["seed"], 31);
  EXPECT_EQ(agg["rows"][4]["seed"], 35);

  const json manifest = load(dir.file("t/manifest.json"));
  EXPECT_EQ(manifest["seeds"].size(), 5u);
  EXPECT_EQ(manifest["data_hash"], dran::git_file_hash(panel()));
  EXPECT_EQ(manifest["config"]["N"], 4);

  ASSERT_EQ(run("train --manifest " + dir.file("t/manifest.json") + " --out " + dir.file("r")), 0);
  EXPECT_EQ(dran::read_file_bytes(dir.file("t/aggregate.json")),
            dran::read_file_bytes(dir.file("r/aggregate.json")));
  EXPECT_EQ(dran::read_file_bytes(dir.file("t/full_seed33_report.json")),
            dran::read_file_bytes(dir.file("r/full_seed33_report.json")));
  EXPECT_EQ(dran::git_file_hash(dir.file("t/full_seed33.ckpt")),
            agg["rows"][2]["checkpoint_id"].get<std::string>());
}

TEST_F(Cli, ManifestRejectsChangedData) {
  ASSERT_EQ(run("train " + train_args("t")), 0);
  ASSERT_EQ(run("synth --nodes 4 --steps 200 --seed 32 --out " + dir.file("s")), 0);
  EXPECT_EQ(run("train --manifest " + dir.file("t/manifest.json") + " --out " + dir.file("r")), 1);
}

TEST_F(Cli, AblateTagsVariant) {
  ASSERT_EQ(run("train " + train_args("t") + " --ablate no_sfl"), 0);
  EXPECT_EQ(load(dir.file("t/no_sfl_seed31_report.json"))["variant"], "no_sfl");
  EXPECT_EQ(load(dir.file("t/aggregate.json"))["variant"], "no_sfl");
}

TEST_F(Cli, AblateWritesSixVariantRows) {
  ASSERT_EQ(run("ablate " + train_args("a") + " --epochs 1 --seeds 31,32"), 0);
  const auto rows = read_csv(dir.file("a/ablation.csv"));
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0][0], "variant");
  std::set<std::string> names, counts;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    names.insert(rows[i][0]);
    counts.insert(rows[i][1]);
    EXPECT_EQ(rows[i].size(), rows[0].size());
  }
  EXPECT_EQ(names, (std::set<std::string>{"full", "no_sto", "no_sta", "no_sfl", "no_dsfl", "no_gate"}));
  EXPECT_EQ(counts.size(), 6u);
}

TEST_F(Cli, EvalMatchesTrainingReport) {
  ASSERT_EQ(run("train " + train_args("t")), 0);
  ASSERT_EQ(run("eval --checkpoint " + dir.file("t/full_seed31.ckpt") + " --data " + panel() +
                " --out " + dir.file("e")),
            0);
  const json m = load(dir.file("e/metrics.json"));
  const json rep = load(dir.file("t/full_seed31_report.json"));
  EXPECT_EQ(m["metrics"]["mae"], rep["test"]["mae"]);
  EXPECT_EQ(m["checkpoint_id"], rep["checkpoint_id"]);
}

TEST_F(Cli, DiagnoseVerdicts) {
  ASSERT_EQ(run("diagnose --data " + panel() + " --node 1 --window-a 0:80 --window-b 0:80 --out " +
                dir.file("d")),
            0);
  EXPECT_EQ(load(dir.file("d/verdict.json"))["shifted"], false);
  ASSERT_EQ(run("diagnose --data " + panel() +
                " --node 1 --window-a 0:80 --window-b 120:200 --out " + dir.file("d")),
            0);
  EXPECT_EQ(load(dir.file("d/verdict.json"))["shifted"], true);
  EXPECT_EQ(read_csv(dir.file("d/density_a.csv")).size(), 513u);
  EXPECT_EQ(run("diagnose --data " + panel() + " --node 4 --window-a 0:80 --window-b 0:80 --out " +
                dir.file("d")),
            2);
}

TEST_F(Cli, ExportRelations) {
  ASSERT_EQ(run("train " + train_args("t")), 0);
  ASSERT_EQ(run("export-relations --checkpoint " + dir.file("t/full_seed31.ckpt") + " --data " +
                panel() + " --step 3 --raw --out " + dir.file("x")),
            0);
  const auto dy = read_csv(dir.file("x/a_dy.csv"));
  const auto st = read_csv(dir.file("x/a_st.csv"));
  ASSERT_EQ(dy.size(), 5u);
  ASSERT_EQ(st.size(), 5u);
  for (std::size_t i = 1; i <= 4; ++i) {
    ASSERT_EQ(dy[i].size(), 5u);
    double row = 0.0;
    for (std::size_t j = 1; j <= 4; ++j) {
      row += std::stod(dy[i][j]);
      EXPECT_EQ(st[i][j], st[j][i]);
    }
    EXPECT_NEAR(row, 1.0, 1e-9);
  }
  EXPECT_EQ(run("export-relations --checkpoint " + dir.file("t/full_seed31.ckpt") + " --data " +
                panel() + " --step 8 --out " + dir.file("x")),
            2);
}
