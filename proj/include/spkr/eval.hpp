// spkr/eval.hpp

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

// Evaluation metrics, closed-set trial lists and the per-condition report.

#ifndef SPKR_EVAL_HPP_
#define SPKR_EVAL_HPP_

#include <algorithm>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "spkr/common.hpp"
#include "spkr/corpus.hpp"
#include "spkr/fusion.hpp"
#include "spkr/scoring.hpp"

namespace spkr {

// ---------------------------------------------------------------------------
// Metrics.

/// One closed-set identification test: the scores of every candidate model.
struct IdentificationTest {
  std::vector<std::string> model_ids;
  std::vector<double> scores;
  std::string truth;
};

/// Picks the highest-scoring model; equal scores resolve to the
/// lexicographically smallest model id.
inline const std::string &IdentifyTop(const IdentificationTest &t) {
  if (t.model_ids.empty() || t.model_ids.size() != t.scores.size())
    throw Error("identification: test has no (or mismatched) model scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.scores.size(); ++i) {
    if (t.scores[i] > t.scores[best] ||
        (t.scores[i] == t.scores[best] && t.model_ids[i] < t.model_ids[best]))
      best = i;
  }
  return t.model_ids[best];
}

/// Percentage of tests whose top model is not the true one.
inline double IdentificationError(std::span<const IdentificationTest> tests) {
  if (tests.empty()) throw Error("identification_error: no tests");
  std::size_t wrong = 0;
  for (const auto &t : tests) wrong += IdentifyTop(t) != t.truth;
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(tests.size());
}

/// Equal error rate in percent.  Thresholds sweep every observed score plus
/// +inf; FAR(t) = #{non >= t}/N, FRR(t) = #{tgt < t}/T.  FAR falls and FRR
/// rises along the sweep, and the crossing is interpolated linearly between
/// the two neighbouring ROC vertices.
inline double ComputeEer(std::span<const double> target, std::span<const double> nontarget) {
  if (target.empty() || nontarget.empty()) throw Error("compute_eer: both classes must be non-empty");
  std::vector<double> tgt(target.begin(), target.end()), non(nontarget.begin(), nontarget.end());
  std::sort(tgt.begin(), tgt.end());
  std::sort(non.begin(), non.end());
  std::vector<double> thr(tgt);
  thr.insert(thr.end(), non.begin(), non.end());
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  thr.push_back(std::numeric_limits<double>::infinity());

  const double nt = static_cast<double>(tgt.size()), nn = static_cast<double>(non.size());
  auto far = [&](double t) {
    return static_cast<double>(non.end() - std::lower_bound(non.begin(), non.end(), t)) / nn;
  };
  auto frr = [&](double t) {
    return static_cast<double>(std::lower_bound(tgt.begin(), tgt.end(), t) - tgt.begin()) / nt;
  };
  double prev_far = far(thr.front()), prev_frr = frr(thr.front());
  if (prev_frr >= prev_far) return 100.0 * 0.5 * (prev_far + prev_frr);
  for (std::size_t i = 1; i < thr.size(); ++i) {
    const double fa = far(thr[i]), fr = frr(thr[i]);
    if (fr >= fa) {
      // Segment from (prev_far, prev_frr) to (fa, fr) crosses FAR = FRR.
      const double denom = (fr - prev_frr) - (fa - prev_far);
      const double lambda = denom > 0.0 ? (prev_far - prev_frr) / denom : 0.0;
      return 100.0 * (prev_far + lambda * (fa - prev_far));
    }
    prev_far = fa;
    prev_frr = fr;
  }
  return 100.0 * 0.5 * (prev_far + prev_frr);  // unreachable: +inf gives FAR = 0
}

inline double RelativeErrorReduction(double base, double updated) {
  if (!(base > 0.0)) throw Error("relative_error_reduction: base error must be positive");
  return 100.0 * (base - updated) / base;
}

/// Wald 95% half-width, in percent, of an error rate measured on n trials.
inline double ConfidenceHalfwidth(double error_percent, std::size_t n) {
  if (!(error_percent >= 0.0 && error_percent <= 100.0))
    throw Error("confidence_halfwidth: error must be within [0, 100]");
  if (n < 1) throw Error("confidence_halfwidth: n must be >= 1");
  const double p = error_percent / 100.0;
  return 100.0 * 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Trial lists.

/// One analysed utterance: a session or one of its duration slices.
struct SessionRecord {
  std::string speaker_id;
  std::string parent_id;   // session it was cut from (itself for originals)
  std::string session_id;
  double condition_seconds = 0.0;
  double speech_seconds = 0.0;
  std::string path;        // feature archive, relative to the work directory
};

struct Trial {
  std::size_t enroll = 0;  // index into TrialList::enroll
  std::size_t test = 0;    // index into TrialList::test
  bool is_target = false;
};

struct TrialList {
  std::vector<SessionRecord> enroll;  // one parent session per speaker, all conditions
  std::vector<SessionRecord> test;
  std::vector<Trial> trials;          // enrolment-major, then test order
};

/// Per speaker, the first parent session (in record order) enrols and up to
/// `max_test_sessions` of the following parents are tests.  Every test is
/// scored against every enrolment model.
inline TrialList MakeTrials(const std::vector<SessionRecord> &records, std::size_t max_test_sessions) {
  std::vector<std::string> speakers;
  std::map<std::string, std::vector<std::string>> parents;
  for (const auto &r : records) {
    auto &p = parents[r.speaker_id];
    if (p.empty()) speakers.push_back(r.speaker_id);
    if (std::find(p.begin(), p.end(), r.parent_id) == p.end()) p.push_back(r.parent_id);
  }
  std::set<std::string> enroll_parents, test_parents;
  std::size_t kept = 0;
  for (const auto &spk : speakers) {
    const auto &p = parents[spk];
    if (p.size() < 2) {
      Warn("make_trials: speaker " + spk + " has a single session; excluded");
      continue;
    }
    ++kept;
    enroll_parents.insert(p[0]);
    for (std::size_t i = 1; i < p.size() && i <= max_test_sessions; ++i) test_parents.insert(p[i]);
  }
  if (kept < 2) throw Error("make_trials: need at least 2 speakers with 2 or more sessions");

  TrialList list;
  for (const auto &r : records) {
    if (enroll_parents.count(r.parent_id)) list.enroll.push_back(r);
    else if (test_parents.count(r.parent_id)) list.test.push_back(r);
  }
  list.trials.reserve(list.enroll.size() * list.test.size());
  for (std::size_t e = 0; e < list.enroll.size(); ++e)
    for (std::size_t t = 0; t < list.test.size(); ++t)
      list.trials.push_back({e, t, list.enroll[e].speaker_id == list.test[t].speaker_id});
  return list;
}

/// Canonical text form, used to check that equal inputs give equal lists.
inline std::string FormatTrials(const TrialList &list) {
  std::ostringstream os;
  for (const auto &tr : list.trials)
    os << list.enroll[tr.enroll].session_id << '\t' << list.test[tr.test].session_id << '\t'
       << (tr.is_target ? "tgt" : "non") << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// T-norm over a scored trial list.

/// Normalises each trial by the scores of the same test utterance against the
/// other speakers' models of the same enrolment condition.
inline std::vector<TrialScore> ApplyTNorm(const std::vector<TrialScore> &raw,
                                          const std::map<std::string, std::string> &model_speaker) {
  std::map<std::pair<std::string, double>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < raw.size(); ++i) groups[{raw[i].test_id, raw[i].d_enroll}].push_back(i);
  std::vector<TrialScore> out = raw;
  std::vector<double> cohort;
  for (const auto &[key, idx] : groups) {
    for (std::size_t i : idx) {
      const std::string &spk = model_speaker.at(raw[i].enroll_id);
      for (std::size_t s = 0; s < raw[i].scores.size(); ++s) {
        cohort.clear();
        for (std::size_t j : idx)
          if (model_speaker.at(raw[j].enroll_id) != spk) cohort.push_back(raw[j].scores[s]);
        out[i].scores[s] = TNorm(raw[i].scores[s], cohort);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Condition report.

using CellMatrix = std::vector<std::vector<std::optional<double>>>;

struct SystemReport {
  std::string name;
  double id_error = 0.0;
  double eer = 0.0;
  double id_error_ci = 0.0;
  double eer_ci = 0.0;
  CellMatrix id_error_cells;  // [enrol bin][test bin]
  CellMatrix eer_cells;
};

struct RerReport {
  std::string base, updated;
  std::optional<double> id_error, eer;
  CellMatrix id_error_cells;
};

struct ConditionReport {
  std::vector<double> grid;
  std::size_t trials = 0;
  std::size_t id_tests = 0;
  std::vector<std::vector<std::size_t>> trial_counts;
  std::vector<std::vector<std::size_t>> id_test_counts;
  std::vector<SystemReport> systems;
  std::vector<RerReport> rer;

  const SystemReport &System(const std::string &name) const {
    for (const auto &s : systems)
      if (s.name == name) return s;
    throw Error("report has no system '" + name + "'");
  }
};

namespace detail {
inline CellMatrix EmptyCells(std::size_t n) { return CellMatrix(n, std::vector<std::optional<double>>(n)); }

/// Identification tests per (test id, enrolment bin); only complete when
/// every model of that bin was scored.
struct IdGroup {
  std::size_t e_bin = 0, t_bin = 0;
  IdentificationTest test;
};

inline std::vector<IdGroup> GroupIdentification(const ScoreTable &table, std::size_t system,
                                                const DurationGrid &grid) {
  std::map<std::pair<std::string, std::size_t>, IdGroup> groups;
  for (const auto &t : table.trials) {
    const std::size_t eb = AssignBinIndex(t.d_enroll, grid);
    IdGroup &g = groups[{t.test_id, eb}];
    g.e_bin = eb;
    g.t_bin = AssignBinIndex(t.d_test, grid);
    g.test.model_ids.push_back(t.enroll_id);
    g.test.scores.push_back(t.scores[system]);
    if (t.is_target && *t.is_target) g.test.truth = t.enroll_id;
  }
  std::vector<IdGroup> out;
  for (auto &[key, g] : groups) {
    if (g.test.truth.empty()) continue;  // no enrolled model for this speaker
    out.push_back(std::move(g));
  }
  return out;
}
}  // namespace detail

/// Overall and per-cell identification error and EER for every system in the
/// table, plus relative error reductions for the requested (base, new) pairs.
inline ConditionReport BuildConditionReport(
    const ScoreTable &table, const DurationGrid &grid,
    const std::vector<std::pair<std::string, std::string>> &rer_pairs = {}) {
  for (const auto &t : table.trials)
    if (!t.is_target) throw Error("report: trial " + t.enroll_id + " / " + t.test_id + " is unlabelled");
  const std::size_t n = grid.size();
  ConditionReport rep;
  rep.grid = grid.points();
  rep.trials = table.trials.size();
  rep.trial_counts.assign(n, std::vector<std::size_t>(n, 0));
  rep.id_test_counts.assign(n, std::vector<std::size_t>(n, 0));
  for (const auto &t : table.trials)
    ++rep.trial_counts[AssignBinIndex(t.d_enroll, grid)][AssignBinIndex(t.d_test, grid)];

  for (std::size_t s = 0; s < table.subsystems.size(); ++s) {
    SystemReport sys;
    sys.name = table.subsystems[s];
    sys.id_error_cells = detail::EmptyCells(n);
    sys.eer_cells = detail::EmptyCells(n);

    const auto groups = detail::GroupIdentification(table, s, grid);
    std::vector<std::vector<std::vector<IdentificationTest>>> id_cells(
        n, std::vector<std::vector<IdentificationTest>>(n));
    std::vector<IdentificationTest> all_id;
    for (const auto &g : groups) {
      id_cells[g.e_bin][g.t_bin].push_back(g.test);
      all_id.push_back(g.test);
    }
    std::vector<std::vector<std::vector<double>>> tgt(n, std::vector<std::vector<double>>(n)), non = tgt;
    std::vector<double> all_tgt, all_non;
    for (const auto &t : table.trials) {
      const std::size_t eb = AssignBinIndex(t.d_enroll, grid), tb = AssignBinIndex(t.d_test, grid);
      (*t.is_target ? tgt : non)[eb][tb].push_back(t.scores[s]);
      (*t.is_target ? all_tgt : all_non).push_back(t.scores[s]);
    }
    for (std::size_t e = 0; e < n; ++e) {
      for (std::size_t t = 0; t < n; ++t) {
        if (!id_cells[e][t].empty()) sys.id_error_cells[e][t] = IdentificationError(id_cells[e][t]);
        if (!tgt[e][t].empty() && !non[e][t].empty()) sys.eer_cells[e][t] = ComputeEer(tgt[e][t], non[e][t]);
        if (s == 0) rep.id_test_counts[e][t] = id_cells[e][t].size();
      }
    }
    if (s == 0) rep.id_tests = all_id.size();
    sys.id_error = IdentificationError(all_id);
    sys.eer = ComputeEer(all_tgt, all_non);
    sys.id_error_ci = ConfidenceHalfwidth(sys.id_error, all_id.size());
    sys.eer_ci = ConfidenceHalfwidth(sys.eer, table.trials.size());
    rep.systems.push_back(std::move(sys));
  }

  for (const auto &[base_name, new_name] : rer_pairs) {
    const SystemReport &base = rep.System(base_name), &upd = rep.System(new_name);
    RerReport r;
    r.base = base_name;
    r.updated = new_name;
    if (base.id_error > 0.0) r.id_error = RelativeErrorReduction(base.id_error, upd.id_error);
    if (base.eer > 0.0) r.eer = RelativeErrorReduction(base.eer, upd.eer);
    r.id_error_cells = detail::EmptyCells(n);
    for (std::size_t e = 0; e < n; ++e)
      for (std::size_t t = 0; t < n; ++t) {
        const auto &b = base.id_error_cells[e][t], &u = upd.id_error_cells[e][t];
        if (b && u && *b > 0.0) r.id_error_cells[e][t] = RelativeErrorReduction(*b, *u);
      }
    rep.rer.push_back(std::move(r));
  }
  return rep;
}

/// CSV with a header row of test durations; rows are enrolment durations,
/// both ascending.  Empty cells are left blank.
inline std::string FormatCellCsv(const CellMatrix &cells, const std::vector<double> &grid) {
  std::ostringstream os;
  os << "enroll\\test";
  for (double g : grid) os << ',' << FormatDouble(g, 6);
  os << '\n';
  for (std::size_t e = 0; e < cells.size(); ++e) {
    os << FormatDouble(grid[e], 6);
    for (const auto &c : cells[e]) {
      os << ',';
      if (c) os << FormatDouble(*c, 9);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace spkr

#endif  // SPKR_EVAL_HPP_
