// tests/test_eval.cpp

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

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "spkr/eval.hpp"
#include "test_util.hpp"

namespace spkr {
namespace {

using testing::CaptureWarnings;

// Exhaustive ROC: every candidate threshold is counted from scratch, then the
// first sign change of FRR - FAR is interpolated.
double BruteForceEer(const std::vector<double> &tgt, const std::vector<double> &non) {
  std::vector<double> thr = tgt;
  thr.insert(thr.end(), non.begin(), non.end());
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  thr.push_back(std::numeric_limits<double>::infinity());
  std::vector<double> fa, fr;
  for (double t : thr) {
    double a = 0, r = 0;
    for (double s : non) a += s >= t;
    for (double s : tgt) r += s < t;
    fa.push_back(a / non.size());
    fr.push_back(r / tgt.size());
  }
  if (fr[0] >= fa[0]) return 50.0 * (fa[0] + fr[0]);
  for (std::size_t i = 1; i < thr.size(); ++i) {
    const double g0 = fr[i - 1] - fa[i - 1], g1 = fr[i] - fa[i];
    if (g1 >= 0.0) {
      const double lambda = -g0 / (g1 - g0);
      return 100.0 * (fa[i - 1] + lambda * (fa[i] - fa[i - 1]));
    }
  }
  return 100.0 * fa.back();
}

TEST(Eer, WorkedExample) {
  const std::vector<double> tgt{3, 2, 2.6}, non{1, 0.5, 2.5};
  EXPECT_NEAR(ComputeEer(tgt, non), 100.0 / 3.0, 1e-9);
  EXPECT_NEAR(ComputeEer(tgt, non), BruteForceEer(tgt, non), 1e-12);
}

TEST(Eer, SeparatedAndChance) {
  const std::vector<double> hi{5, 6, 7}, lo{1, 2, 3};
  EXPECT_EQ(ComputeEer(hi, lo), 0.0);
  const std::vector<double> same{0.3, 1.2, -4.0, 2.0};
  EXPECT_NEAR(ComputeEer(same, same), 50.0, 1e-12);
  EXPECT_NEAR(ComputeEer(lo, hi), 100.0, 1e-12);
  EXPECT_THROW(ComputeEer(std::vector<double>{}, lo), Error);
}

TEST(Eer, MatchesBruteForceOnRandomSets) {
  Rng rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    const auto nt = 1 + rng.Below(15), nn = 1 + rng.Below(25);
    const bool coarse = rep % 2 == 0;  // integer scores force ties
    std::vector<double> tgt, non;
    for (std::uint64_t i = 0; i < nt; ++i) tgt.push_back(coarse ? double(rng.Below(6)) + 1 : rng.Normal(1.0, 1.0));
    for (std::uint64_t i = 0; i < nn; ++i) non.push_back(coarse ? double(rng.Below(6)) : rng.Normal(0.0, 1.0));
    EXPECT_NEAR(ComputeEer(tgt, non), BruteForceEer(tgt, non), 1e-9) << rep;
  }
}

TEST(Eer, InvariantToIncreasingTransform) {
  Rng rng(2);
  std::vector<double> tgt, non, tgt2, non2;
  for (int i = 0; i < 80; ++i) tgt.push_back(rng.Normal(1.0, 1.0));
  for (int i = 0; i < 300; ++i) non.push_back(rng.Normal(0.0, 1.0));
  for (double x : tgt) tgt2.push_back(std::exp(2.0 * x) - 3.0);
  for (double x : non) non2.push_back(std::exp(2.0 * x) - 3.0);
  EXPECT_NEAR(ComputeEer(tgt, non), ComputeEer(tgt2, non2), 1e-12);
}

TEST(Identification, Examples) {
  const IdentificationTest right{{"a", "b", "c"}, {0.9, 0.1, 0.2}, "a"};
  const IdentificationTest wrong{{"a", "b", "c"}, {0.9, 0.1, 0.2}, "b"};
  EXPECT_EQ(IdentificationError(std::vector<IdentificationTest>{right, right}), 0.0);
  EXPECT_EQ(IdentificationError(std::vector<IdentificationTest>{wrong, wrong}), 100.0);
  EXPECT_NEAR(IdentificationError(std::vector<IdentificationTest>{right, wrong, right}), 100.0 / 3, 1e-12);
  EXPECT_THROW(IdentificationError(std::vector<IdentificationTest>{}), Error);
}

TEST(Identification, TiesGoToSmallestId) {
  const IdentificationTest t{{"zed", "amy", "bob"}, {1.0, 1.0, 0.5}, "amy"};
  EXPECT_EQ(IdentifyTop(t), "amy");
}

TEST(Identification, InvariantToIncreasingTransform) {
  Rng rng(3);
  std::vector<IdentificationTest> a, b;
  for (int i = 0; i < 50; ++i) {
    IdentificationTest t{{"m0", "m1", "m2", "m3"}, {}, "m" + std::to_string(i % 4)};
    for (int m = 0; m < 4; ++m) t.scores.push_back(rng.Normal(m == i % 4 ? 0.8 : 0.0, 1.0));
    a.push_back(t);
    for (auto &s : t.scores) s = std::tanh(s) * 7.0 + 1.0;
    b.push_back(t);
  }
  EXPECT_EQ(IdentificationError(a), IdentificationError(b));
}

TEST(Rer, Examples) {
  EXPECT_NEAR(RelativeErrorReduction(52.26, 49.37), 5.53, 0.005);
  EXPECT_NEAR(RelativeErrorReduction(15.14, 13.39), 11.56, 0.005);
  EXPECT_EQ(RelativeErrorReduction(7.0, 7.0), 0.0);
  EXPECT_THROW(RelativeErrorReduction(0.0, 1.0), Error);
}

TEST(ConfidenceInterval, Examples) {
  EXPECT_NEAR(ConfidenceHalfwidth(50.0, 10000), 0.98, 1e-12);
  EXPECT_EQ(ConfidenceHalfwidth(0.0, 100), 0.0);
  EXPECT_NEAR(ConfidenceHalfwidth(46.25, 212625), 0.212, 0.0005);
}

std::vector<SessionRecord> Records(int speakers, int sessions, const std::vector<double> &conds) {
  std::vector<SessionRecord> out;
  for (int s = 0; s < speakers; ++s)
    for (int k = 0; k < sessions; ++k) {
      const std::string parent = "spk" + std::to_string(s) + "-s" + std::to_string(k);
      for (double c : conds) {
        SessionRecord r;
        r.speaker_id = "spk" + std::to_string(s);
        r.parent_id = parent;
        r.session_id = c == conds.back() ? parent : parent + "@" + FormatDouble(c, 6);
        r.condition_seconds = c;
        r.speech_seconds = c;
        out.push_back(r);
      }
    }
  return out;
}

TEST(MakeTrials, SmallestEnumeration) {
  const TrialList list = MakeTrials(Records(2, 2, {50.0}), 50);
  EXPECT_EQ(list.enroll.size(), 2u);
  EXPECT_EQ(list.test.size(), 2u);
  ASSERT_EQ(list.trials.size(), 4u);
  EXPECT_EQ(std::count_if(list.trials.begin(), list.trials.end(), [](const Trial &t) { return t.is_target; }), 2);
  EXPECT_EQ(list.enroll[0].session_id, "spk0-s0");
  EXPECT_EQ(list.test[1].session_id, "spk1-s1");
}

TEST(MakeTrials, CountsScaleWithConditions) {
  const std::vector<double> conds{0.5, 2.0, 10.0};
  const TrialList list = MakeTrials(Records(5, 7, conds), 4);
  // Per speaker: one enrolment parent, four test parents, three conditions each.
  EXPECT_EQ(list.enroll.size(), 5u * 3);
  EXPECT_EQ(list.test.size(), 5u * 4 * 3);
  EXPECT_EQ(list.trials.size(), list.enroll.size() * list.test.size());
  const auto targets =
      std::count_if(list.trials.begin(), list.trials.end(), [](const Trial &t) { return t.is_target; });
  EXPECT_EQ(static_cast<std::size_t>(targets), 5u * 3 * 4 * 3);
  EXPECT_EQ(FormatTrials(list), FormatTrials(MakeTrials(Records(5, 7, conds), 4)));
}

TEST(MakeTrials, SingleSessionSpeakersExcluded) {
  auto records = Records(3, 2, {1.0});
  const auto lonely = Records(1, 1, {1.0});
  for (auto r : lonely) {
    r.speaker_id = "solo";
    r.parent_id = r.session_id = "solo-s0";
    records.push_back(r);
  }
  CaptureWarnings warnings;
  const TrialList list = MakeTrials(records, 50);
  EXPECT_EQ(list.enroll.size(), 3u);
  EXPECT_EQ(list.test.size(), 3u);
  EXPECT_TRUE(warnings.Contains("solo"));
  EXPECT_THROW(MakeTrials(Records(1, 3, {1.0}), 50), Error);
}

// Scores for every trial of a list, targets shifted upward.
ScoreTable ScoreList(const TrialList &list, Rng &rng) {
  ScoreTable table;
  table.subsystems = {"a", "b"};
  for (const auto &tr : list.trials) {
    const auto &e = list.enroll[tr.enroll], &t = list.test[tr.test];
    TrialScore s{e.session_id, t.session_id, e.condition_seconds, t.condition_seconds, {}, tr.is_target};
    s.scores = {rng.Normal(tr.is_target ? 2.0 : 0.0, 1.0), rng.Normal(tr.is_target ? 1.0 : 0.0, 1.0)};
    table.trials.push_back(std::move(s));
  }
  return table;
}

TEST(TNormList, CohortIsOtherSpeakersSameCondition) {
  Rng rng(4);
  const TrialList list = MakeTrials(Records(4, 3, {1.0, 5.0}), 2);
  const ScoreTable table = ScoreList(list, rng);
  std::map<std::string, std::string> owner;
  for (const auto &e : list.enroll) owner[e.session_id] = e.speaker_id;
  const auto normed = ApplyTNorm(table.trials, owner);
  ASSERT_EQ(normed.size(), table.trials.size());
  const TrialScore &probe = table.trials[7];
  std::vector<double> cohort;
  for (const auto &t : table.trials)
    if (t.test_id == probe.test_id && t.d_enroll == probe.d_enroll &&
        owner[t.enroll_id] != owner[probe.enroll_id])
      cohort.push_back(t.scores[1]);
  EXPECT_EQ(cohort.size(), 3u);
  EXPECT_NEAR(normed[7].scores[1], TNorm(probe.scores[1], cohort), 1e-12);
}

TEST(Report, CountsSumAndSystemsPresent) {
  Rng rng(5);
  const DurationGrid grid({1.0, 5.0, 20.0});
  const TrialList list = MakeTrials(Records(6, 4, grid.points()), 3);
  const ScoreTable table = ScoreList(list, rng);
  const ConditionReport rep = BuildConditionReport(table, grid, {{"a", "b"}});
  EXPECT_EQ(rep.trials, table.trials.size());
  std::size_t trial_sum = 0, id_sum = 0;
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t t = 0; t < 3; ++t) {
      trial_sum += rep.trial_counts[e][t];
      id_sum += rep.id_test_counts[e][t];
    }
  EXPECT_EQ(trial_sum, rep.trials);
  EXPECT_EQ(id_sum, rep.id_tests);
  // One identification test per (test utterance, enrolment condition).
  EXPECT_EQ(rep.id_tests, list.test.size() * grid.size());
  ASSERT_EQ(rep.systems.size(), 2u);
  const SystemReport &a = rep.System("a");
  EXPECT_LT(a.eer, rep.System("b").eer);
  EXPECT_NEAR(a.eer_ci, ConfidenceHalfwidth(a.eer, rep.trials), 1e-12);
  ASSERT_EQ(rep.rer.size(), 1u);
  EXPECT_NEAR(*rep.rer[0].eer, RelativeErrorReduction(a.eer, rep.System("b").eer), 1e-12);
  EXPECT_THROW(rep.System("missing"), Error);
}

TEST(Report, OverallEerMatchesDirectComputation) {
  Rng rng(6);
  const DurationGrid grid({1.0, 5.0});
  const TrialList list = MakeTrials(Records(5, 3, grid.points()), 2);
  const ScoreTable table = ScoreList(list, rng);
  const ConditionReport rep = BuildConditionReport(table, grid);
  std::vector<double> tgt, non;
  for (const auto &t : table.trials) (*t.is_target ? tgt : non).push_back(t.scores[0]);
  EXPECT_EQ(rep.System("a").eer, ComputeEer(tgt, non));
}

TEST(Report, UnlabelledTrialRejected) {
  Rng rng(7);
  const DurationGrid grid({1.0});
  ScoreTable table = ScoreList(MakeTrials(Records(2, 2, {1.0}), 1), rng);
  table.trials[0].is_target.reset();
  EXPECT_THROW(BuildConditionReport(table, grid), Error);
}

TEST(Report, CellCsvLayout) {
  CellMatrix cells(2, std::vector<std::optional<double>>(2));
  cells[0][0] = 12.5;
  cells[1][1] = 0.25;
  EXPECT_EQ(FormatCellCsv(cells, {0.5, 2.0}), "enroll\\test,0.5,2\n0.5,12.5,\n2,,0.25\n");
}

}  // namespace
}  // namespace spkr
