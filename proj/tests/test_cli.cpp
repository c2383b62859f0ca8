// Drives the stagegen binary as a separate process.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <map>

#include "stagegen/stagegen.hpp"
#include "test_util.hpp"

using namespace stagegen;
using testutil::slurp;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(STAGEGEN_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return files;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testutil::TempDir("cli");
    ASSERT_EQ(run("synth-data --n 80 --side 32 --seed 7 --split 0.8 --out " + (*dir_ / "data").string()).code, 0);
    write(*dir_ / "run.json", R"({"manifest": ")" + (*dir_ / "data").string() + R"(", "batch_size": 16, "log_wall_time": false,
      "checkpoint_every": 3, "max_steps": 6, "epochs": 10,
      "model": {"image_side": 32, "latent_dim": 16, "base_feature_maps_g": 8, "base_feature_maps_d": 8, "resnet_blocks": 2}})");
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string p(const std::string& rel) { return (*dir_ / rel).string(); }
  static std::string config() { return p("run.json"); }

  static inline testutil::TempDir* dir_ = nullptr;
};

TEST_F(CliTest, HelpListsEveryFlag) {
  const std::map<std::string, std::vector<std::string>> flags = {
      {"synth-data", {"--n", "--side", "--seed", "--out"}},
      {"preprocess", {"--src", "--out", "--side", "--subset", "--seed"}},
      {"train", {"--stage", "--config", "--edge-source", "--resume"}},
      {"generate", {"--stage1", "--stage2", "--n", "--seed", "--out"}},
      {"evaluate", {"--real", "--fake", "--embedder", "--fit-embedder"}},
      {"probe", {"--stage2", "--manifest", "--sigma", "--pairs", "--seed"}},
      {"plot-losses", {"--csv", "--out"}},
      {"subset-experiment", {"--manifest", "--fractions", "--budget", "--seed"}}};
  for (const auto& [cmd, names] : flags) {
    const auto r = run(cmd + " --help");
    EXPECT_EQ(r.code, 0) << cmd;
    for (const auto& f : names) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " " << f;
  }
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("synth-data --n 4 --side 32").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("train --stage 3 --config " + config()).code, 2);
}

TEST_F(CliTest, SynthDataIsByteIdenticalOnRerun) {
  testutil::TempDir other("cli_synth");
  ASSERT_EQ(run("synth-data --n 80 --side 32 --seed 7 --split 0.8 --out " + other.path().string()).code, 0);
  EXPECT_EQ(tree(other.path()), tree(*dir_ / "data"));
  const auto m = load_manifest(other.path());
  EXPECT_EQ(m.records.size(), 80u);
  EXPECT_TRUE(fs::exists(other / kResolvedConfigFile));
}

TEST_F(CliTest, PreprocessSubset) {
  testutil::TempDir out("cli_pre");
  ASSERT_EQ(run("preprocess --src " + p("data/rgb") + " --out " + out.path().string() + " --side 32 --subset 0.25 --seed 1").code, 0);
  const auto m = load_manifest(out.path());
  EXPECT_EQ(m.records.size(), 20u);
  EXPECT_EQ(m.subset_fraction, 0.25);
}

TEST_F(CliTest, StageTwoWithoutStageOneCheckpointFailsBeforeCompute) {
  const auto out = p("no_ckpt_run");
  EXPECT_EQ(run("train --stage 2 --config " + config() + " --edge-source ckpt --out " + out).code, 2);
  EXPECT_EQ(run("train --stage 2 --config " + config() + " --edge-source " + p("missing.sgck") + " --out " + out).code, 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(CliTest, InterruptedRunResumesBitwise) {
  const auto full = p("full"), part = p("part");
  ASSERT_EQ(run("train --stage 1 --config " + config() + " --out " + full).code, 0);
  ASSERT_EQ(run("train --stage 1 --config " + config() + " --out " + part + " --max-steps 3").code, 0);
  ASSERT_EQ(run("train --stage 1 --config " + config() + " --out " + part + " --resume " + part + "/stage1_step3.sgck").code, 0);
  EXPECT_EQ(slurp(fs::path(part) / "stage1.sgck"), slurp(fs::path(full) / "stage1.sgck"));
  EXPECT_EQ(slurp(fs::path(part) / "losses_stage1.csv"), slurp(fs::path(full) / "losses_stage1.csv"));
  EXPECT_EQ(LossLog::read(fs::path(full) / "losses_stage1.csv").rows.size(), 6u);
  const auto echo = load_run_config(fs::path(full) / kResolvedConfigFile);
  EXPECT_EQ(echo.train.stage, 1);
  EXPECT_EQ(echo.train.max_steps, 6);
}

TEST_F(CliTest, FullWorkflow) {
  const auto s1 = p("wf1"), s2 = p("wf2");
  ASSERT_EQ(run("train --stage 1 --config " + config() + " --out " + s1).code, 0);
  const auto trained = run("train --stage 2 --config " + config() + " --out " + s2 + " --edge-source ckpt --stage1-ckpt " + s1 +
                           "/stage1.sgck");
  ASSERT_EQ(trained.code, 0);
  EXPECT_EQ(nlohmann::json::parse(trained.out).at("steps"), 6);

  ASSERT_EQ(run("generate --stage1 " + s1 + "/stage1.sgck --stage2 " + s2 + "/stage2.sgck --n 20 --seed 3 --out " + p("gen")).code, 0);
  EXPECT_TRUE(fs::exists(p("gen/contact_sheet.png")));
  EXPECT_TRUE(fs::exists(p("gen/gray_19.png")));

  const auto ev = run("evaluate --real " + p("data") + " --fake " + p("gen") + " --embedder " + p("emb.sgck") +
                      " --fit-embedder --kind gray --embed-dim 8 --embed-steps 5 --report " + p("eval.json"));
  ASSERT_EQ(ev.code, 0);
  const auto report = nlohmann::json::parse(ev.out);
  EXPECT_TRUE(std::isfinite(report.at("fid").get<double>()));
  EXPECT_EQ(report.at("n_fake"), 20);
  EXPECT_EQ(report.at("n_real"), 80);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("eval.json"))), report);
  // the saved embedder reproduces the score
  const auto again = run("evaluate --real " + p("data") + " --fake " + p("gen") + " --embedder " + p("emb.sgck") + " --kind gray");
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(nlohmann::json::parse(again.out).at("fid"), report.at("fid"));
  EXPECT_EQ(run("evaluate --real " + p("data") + " --fake " + p("gen") + " --embedder " + p("emb.sgck") + " --kind edge").code, 2);
  EXPECT_EQ(run("evaluate --real " + p("data") + " --fake " + p("gen") + " --embedder " + p("absent.sgck")).code, 2);

  const auto pr = run("probe --stage2 " + s2 + "/stage2.sgck --manifest " + p("data") + " --sigma 0.01,0.1 --pairs 8 --seed 2");
  ASSERT_EQ(pr.code, 0);
  const auto probes = nlohmann::json::parse(pr.out).at("probes");
  ASSERT_EQ(probes.size(), 2u);
  EXPECT_EQ(probes[1].at("sigma"), 0.1);
  EXPECT_TRUE(std::isfinite(probes[0].at("mean_ratio").get<double>()));

  ASSERT_EQ(run("plot-losses --csv " + s1 + "/losses_stage1.csv --out " + p("a.svg")).code, 0);
  ASSERT_EQ(run("plot-losses --csv " + s1 + "/losses_stage1.csv --out " + p("b.svg")).code, 0);
  EXPECT_EQ(slurp(p("a.svg")), slurp(p("b.svg")));
}

TEST_F(CliTest, PlotRejectsEmptyCsv) {
  write(*dir_ / "empty.csv", std::string(LossLog::kHeader) + "\n");
  EXPECT_EQ(run("plot-losses --csv " + p("empty.csv") + " --out " + p("e.svg")).code, 1);
  EXPECT_FALSE(fs::exists(p("e.svg")));
}

TEST_F(CliTest, SubsetExperimentWritesReport) {
  const auto r = run("subset-experiment --manifest " + p("data") + " --fractions 0.5,1.0 --budget 2 --seed 4 --config " + config() +
                     " --n-generated 70 --out " + p("subset"));
  ASSERT_EQ(r.code, 0);
  const auto report = nlohmann::json::parse(slurp(p("subset/subset_report.json")));
  EXPECT_EQ(report.at("rows").size(), 2u);
  EXPECT_EQ(nlohmann::json::parse(r.out), report);
}
