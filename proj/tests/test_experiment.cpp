// tests/test_experiment.cpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "spkr/experiment.hpp"
#include "test_util.hpp"

namespace spkr {
namespace {

using testing::CaptureWarnings;
using testing::TempDir;

#ifndef SPKR_CONFIG_DIR
#define SPKR_CONFIG_DIR "configs"
#endif

fs::path ConfigPath(const std::string &name) { return fs::path(SPKR_CONFIG_DIR) / name; }

std::string ConfigErrorOf(const std::string &text) {
  try {
    ParseExperimentConfig(Json::parse(text));
  } catch (const ConfigError &e) {
    return e.what();
  }
  return "";
}

TEST(Config, EmptyObjectGivesDefaults) {
  const ExperimentConfig c = ParseExperimentConfig(Json::object());
  EXPECT_EQ(c.grid, DurationGrid().points());
  EXPECT_EQ(c.ubm_components, 1024);
  EXPECT_EQ(c.tv_rank, 500);
  EXPECT_DOUBLE_EQ(c.SessionSeconds(), c.grid.back());
  EXPECT_FALSE(c.noise.enabled);
}

TEST(Config, ShippedConfigsParse) {
  for (const char *name : {"tiny.json", "desk.json", "full_scale.json"})
    EXPECT_NO_THROW(LoadExperimentConfig(ConfigPath(name))) << name;
  const ExperimentConfig desk = LoadExperimentConfig(ConfigPath("desk.json"));
  EXPECT_EQ(desk.grid, (std::vector<double>{0.5, 2, 10}));
  EXPECT_EQ(desk.ubm_components, 64);
  EXPECT_EQ(desk.roles.at("test").n_speakers, 30);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_NE(ConfigErrorOf(R"({"sed": 3})").find("unknown key 'sed'"), std::string::npos);
  EXPECT_NE(ConfigErrorOf(R"({"ubm": {"component": 3}})").find("ubm"), std::string::npos);
  EXPECT_NE(ConfigErrorOf(R"({"corpus": {"roles": {"eval": {}}}})").find("corpus.roles"), std::string::npos);
}

TEST(Config, BadValuesRejected) {
  EXPECT_NE(ConfigErrorOf(R"({"seed": "x"})"), "");
  EXPECT_NE(ConfigErrorOf(R"({"grid": [2, 1]})").find("grid"), std::string::npos);
  EXPECT_NE(ConfigErrorOf(R"({"tv": {"rank": 10}, "lda": {"rank": 20}})").find("ranks"), std::string::npos);
  EXPECT_NE(ConfigErrorOf(R"({"fusion": {"target_prior": 1}})"), "");
  EXPECT_NE(ConfigErrorOf(R"({"map": {"relevance": 0}})"), "");
  EXPECT_NE(ConfigErrorOf(R"({"corpus": {"synthesize": false}})").find("manifests"), std::string::npos);
  EXPECT_NE(ConfigErrorOf(R"({"grid": [1, 2], "noise_profile": {"sigma": {"gmm": [1]}}})"), "");
  EXPECT_NE(ConfigErrorOf(R"({"noise_profile": {"sigma": {"ivec": []}}})").find("ivec"), std::string::npos);
}

TEST(Config, MalformedFileIsConfigError) {
  TempDir dir("cfg");
  WriteStringToFile(dir / "bad.json", "{\"seed\": ");
  EXPECT_THROW(LoadExperimentConfig(dir / "bad.json"), ConfigError);
  EXPECT_THROW(LoadExperimentConfig(dir / "absent.json"), ConfigError);
}

TEST(Stages, OrderAndUnknownName) {
  std::vector<std::string> names;
  for (const auto &s : Stages()) names.push_back(s.name);
  EXPECT_EQ(names, (std::vector<std::string>{"synth-corpus", "frontend", "train-ubm", "train-tv", "train-backend",
                                             "enroll", "score", "fuse", "eval"}));
  TempDir dir("stage");
  EXPECT_THROW(RunStage("decode", ExperimentConfig{}, dir.path()), Error);
}

TEST(Stages, FailureNamesTheStage) {
  TempDir dir("stage");
  try {
    RunStage("train-ubm", ExperimentConfig{}, dir.path());
    FAIL() << "expected a failure on an empty work directory";
  } catch (const Error &e) {
    EXPECT_EQ(std::string(e.what()).rfind("train-ubm: ", 0), 0u) << e.what();
  }
}

ScoreTable Toy(std::size_t n) {
  ScoreTable t;
  t.subsystems = DefaultSubsystems();
  for (std::size_t i = 0; i < n; ++i)
    t.trials.push_back({"e" + std::to_string(i % 3), "t" + std::to_string(i), 1.0, i % 2 ? 1.0 : 4.0,
                        std::vector<double>(t.subsystems.size(), 0.5), i % 3 == 0});
  return t;
}

TEST(NoiseProfile, DisabledIsIdentity) {
  const ScoreTable in = Toy(10);
  NoiseProfile np;
  np.sigma["gmm"] = {5.0, 5.0};
  const ScoreTable out = ApplyNoiseProfile(in, np, DurationGrid({1, 4}), 1, "test");
  EXPECT_EQ(FormatScores(out), FormatScores(in));
}

TEST(NoiseProfile, PerBinSigmaAndTrialKeyedDraws) {
  const ScoreTable in = Toy(40);
  NoiseProfile np;
  np.enabled = true;
  np.sigma["gmm"] = {0.0, 3.0};  // noisy on 4 s tests only
  const DurationGrid grid({1, 4});
  const ScoreTable out = ApplyNoiseProfile(in, np, grid, 9, "test");
  for (std::size_t i = 0; i < in.trials.size(); ++i) {
    const auto &a = in.trials[i], &b = out.trials[i];
    EXPECT_EQ(b.scores[1], a.scores[1]);  // no sigma for this subsystem
    if (a.d_test == 1.0)
      EXPECT_EQ(b.scores[0], a.scores[0]);
    else
      EXPECT_NE(b.scores[0], a.scores[0]);
  }
  // Reordering the table does not change any trial's draw.
  ScoreTable rev = in;
  std::reverse(rev.trials.begin(), rev.trials.end());
  const ScoreTable out_rev = ApplyNoiseProfile(rev, np, grid, 9, "test");
  EXPECT_EQ(out_rev.trials.back().scores[0], out.trials.front().scores[0]);
  EXPECT_NE(ApplyNoiseProfile(in, np, grid, 9, "dev").trials[0].scores[0], out.trials[0].scores[0]);
}

std::vector<fs::path> FilesUnder(const fs::path &root) {
  std::vector<fs::path> out;
  for (const auto &e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

TEST(EndToEnd, TinyRunIsByteDeterministic) {
  const ExperimentConfig cfg = LoadExperimentConfig(ConfigPath("tiny.json"));
  TempDir a("run_a"), b("run_b");
  {
    CaptureWarnings quiet;
    RunExperiment(cfg, a.path());
    RunExperiment(cfg, b.path());
  }
  const auto files = FilesUnder(a.path());
  ASSERT_EQ(files, FilesUnder(b.path()));
  ASSERT_TRUE(fs::exists(a / "report.json"));
  for (const auto &f : files) EXPECT_EQ(ReadFileToString(a.path() / f), ReadFileToString(b.path() / f)) << f;

  const Json rep = Json::parse(ReadFileToString(a / "report.json"));
  std::size_t sum = 0;
  for (const auto &row : rep["trial_counts"])
    for (const auto &c : row) sum += c.get<std::size_t>();
  EXPECT_EQ(sum, rep["trials"].get<std::size_t>());
  for (const char *name : {"gmm", "tvs_cosine", "tvs_plda", "mean", "lr", "nn", "duration_lr", "duration_nn"})
    EXPECT_TRUE(rep["systems"].contains(name)) << name;
  EXPECT_EQ(rep["min_test_sessions_per_speaker"].get<std::size_t>(), cfg.max_test_sessions);
}

TEST(EndToEnd, SeedChangesTheCorpus) {
  ExperimentConfig cfg = LoadExperimentConfig(ConfigPath("tiny.json"));
  TempDir a("seed_a"), b("seed_b");
  CaptureWarnings quiet;
  RunStage("synth-corpus", cfg, a.path());
  cfg.seed += 1;
  RunStage("synth-corpus", cfg, b.path());
  const auto files = FilesUnder(a.path());
  ASSERT_FALSE(files.empty());
  bool differs = false;
  for (const auto &f : files)
    if (f.extension() == ".wav") differs = differs || ReadFileToString(a.path() / f) != ReadFileToString(b.path() / f);
  EXPECT_TRUE(differs);
}

#ifdef SPKR_CLI_PATH
int RunCli(const std::string &args, const fs::path &log) {
  const std::string cmd = std::string(SPKR_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  const fs::path log = dir / "log.txt";
  WriteStringToFile(dir / "bad.json", R"({"bogus": 1})");
  EXPECT_EQ(RunCli("run --config " + (dir / "bad.json").string() + " --out " + (dir / "w").string(), log), 2);
  EXPECT_NE(ReadFileToString(log).find("config error"), std::string::npos);
  EXPECT_EQ(RunCli("", log), 2);
  EXPECT_EQ(RunCli("frobnicate", log), 2);
  EXPECT_EQ(RunCli("train-tv --config " + ConfigPath("tiny.json").string() + " --out " + (dir / "w").string(), log),
            1);
  EXPECT_NE(ReadFileToString(log).find("train-tv: "), std::string::npos);
  EXPECT_EQ(RunCli("--help", log), 0);
}
#endif

}  // namespace
}  // namespace spkr
