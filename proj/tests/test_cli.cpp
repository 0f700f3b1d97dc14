#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "midalign/checkpoint.hpp"
#include "midalign/evaluation.hpp"
#include "midalign/retrieval.hpp"

namespace {

using namespace midalign;
using nlohmann::json;
namespace fs = std::filesystem;

struct Run {
  int code = -1;
  std::string output;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(MIDALIGN_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buffer[4096];
  std::size_t n;
  while ((n = std::fread(buffer, 1, sizeof buffer, pipe)) > 0) r.output.append(buffer, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("midalign_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const json tiny = {
        {"seed", 3},
        {"corpus", {{"num_sentences", 300}}},
        {"model", {{"num_layers", 2}, {"hidden_dim", 16}, {"num_heads", 2}, {"ffn_dim", 32}}},
        {"pretrain", {{"steps", 20}}},
        {"train", {{"max_epochs", 1}, {"eval_every", 2}}},
        {"task", {{"max_eval_sentences", 20}, {"align_cap", 40}}},
        {"retrieval", {{"max_sentences", 20}}},
        {"merge", {{"max_dev_sentences", 20}}},
    };
    io::write_file(dir_ / "tiny.json", tiny.dump());
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string common(const std::string& recipe) const {
    return "--config " + (dir_ / "tiny.json").string() + " --out " + (dir_ / "ws").string() + " --recipe " + recipe;
  }
  fs::path ws() const { return dir_ / "ws"; }

  fs::path dir_;
};

TEST_F(Cli, TaskOnlyTrainingThenRetrievalReports) {
  auto r = run_cli("train " + common("baseline-sft"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("seed: 3"), std::string::npos);
  const auto log = io::read_file(ws() / "logs" / "sft.jsonl");
  EXPECT_EQ(log.find("\"align\""), std::string::npos);

  r = run_cli("eval-retrieval " + common("baseline-sft"));
  ASSERT_EQ(r.code, 0) << r.output;
  for (const auto* name : {"untrained", "sft"}) {
    const auto j = json::parse(io::read_file(ws() / "reports" / (std::string(name) + ".retrieval.json")));
    const auto report = retrieval::RetrievalReport::from_json(j);
    EXPECT_EQ(report.num_layers, 3u);
    EXPECT_EQ(report.languages.size(), 6u);
    EXPECT_TRUE(fs::exists(ws() / "reports" / (std::string(name) + ".retrieval.csv")));
  }
}

TEST_F(Cli, MergeAtOneReproducesTheTaskAdapters) {
  auto r = run_cli("train " + common("merge"));
  ASSERT_EQ(r.code, 0) << r.output;
  r = run_cli("merge " + common("merge") + " --weight 1.0");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(io::read_file(ws() / "adapters" / "merged.ckpt"), io::read_file(ws() / "adapters" / "sft.ckpt"));
  r = run_cli("eval-task " + common("merge"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto sft = evaluation::TaskReport::from_json(json::parse(io::read_file(ws() / "reports" / "sft.task.json")));
  const auto merged = evaluation::TaskReport::from_json(json::parse(io::read_file(ws() / "reports" / "merged.task.json")));
  ASSERT_EQ(sft.languages.size(), merged.languages.size());
  for (const auto& [lang, score] : sft.languages) {
    EXPECT_NEAR(merged.languages.at(lang).f1(), score.f1(), 1e-6) << lang;
  }
}

TEST_F(Cli, PlacementReportHasOneRowPerPlacement) {
  const auto r = run_cli("run " + common("placement"));
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream csv(io::read_file(ws() / "placement.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("placement,align_layers,", 0), 0u) << line;
  std::vector<std::string> names;
  while (std::getline(csv, line)) names.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(names, (std::vector<std::string>{"bottom", "middle", "top", "multi"}));
  for (const auto* f : {"summary.csv", "summary.json", "layers.csv"}) EXPECT_TRUE(fs::exists(ws() / f)) << f;
}

TEST_F(Cli, ErrorsExitNonZeroWithAMessage) {
  auto r = run_cli("train " + common("no-such-recipe"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("unknown recipe"), std::string::npos) << r.output;

  r = run_cli("eval-task " + common("baseline-sft"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("base.ckpt"), std::string::npos) << r.output;

  r = run_cli("train --config " + (dir_ / "missing.json").string() + " --out " + ws().string());
  EXPECT_NE(r.code, 0);

  io::write_file(dir_ / "typo.json", "{\"sead\": 1}");
  r = run_cli("train --config " + (dir_ / "typo.json").string() + " --out " + ws().string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("sead"), std::string::npos) << r.output;
}

TEST_F(Cli, RepeatedRunsGiveIdenticalArtifacts) {
  auto r = run_cli("run " + common("mid-align"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto first_log = io::read_file(ws() / "logs" / "mid-align.jsonl");
  const auto first_csv = io::read_file(ws() / "summary.csv");
  const auto first_ckpt = io::read_file(ws() / "adapters" / "mid-align.ckpt");
  fs::remove_all(ws());
  r = run_cli("run " + common("mid-align"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(io::read_file(ws() / "logs" / "mid-align.jsonl"), first_log);
  EXPECT_EQ(io::read_file(ws() / "summary.csv"), first_csv);
  EXPECT_EQ(io::read_file(ws() / "adapters" / "mid-align.ckpt"), first_ckpt);
}

}  // namespace
