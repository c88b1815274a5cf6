// spkr/scoring.hpp

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

// Trial scoring back-ends: cosine similarity, two-covariance Gaussian PLDA
// and T-norm, plus the trial score file.

#ifndef SPKR_SCORING_HPP_
#define SPKR_SCORING_HPP_

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spkr/common.hpp"
#include "spkr/textio.hpp"

namespace spkr {

inline double CosineScore(const Eigen::Ref<const Vector> &a, const Eigen::Ref<const Vector> &b) {
  if (a.size() != b.size()) throw Error("cosine_score: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw Error("cosine_score: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// PLDA: x = mu + V y + e, y ~ N(0, I), e ~ N(0, Sigma).

struct PldaModel {
  Vector mu;     // d
  Matrix v;      // d x q
  Matrix sigma;  // d x d, full

  Eigen::Index Dim() const { return mu.size(); }
  Eigen::Index Rank() const { return v.cols(); }
};

/// Precomputed closed-form verification LLR.  With B = V V' and T = B + S,
/// the same-speaker pair has covariance [[T, B], [B, T]] and the
/// different-speaker pair [[T, 0], [0, T]].
class PldaScorer {
 public:
  explicit PldaScorer(const PldaModel &m, const std::string &source = "PLDA model") : mu_(m.mu) {
    const Eigen::Index d = m.Dim();
    if (m.v.rows() != d || m.sigma.rows() != d || m.sigma.cols() != d)
      throw Error(source + ": inconsistent PLDA shapes");
    const Matrix b = m.v * m.v.transpose();
    const Matrix t = b + m.sigma;
    Eigen::LLT<Matrix> llt_t(t);
    if (llt_t.info() != Eigen::Success)
      throw Error(source + ": total covariance is not positive definite");
    const Matrix t_inv = llt_t.solve(Matrix::Identity(d, d));
    Matrix p = t - b * t_inv * b;
    p = 0.5 * (p + p.transpose()).eval();
    Eigen::LLT<Matrix> llt_p(p);
    if (llt_p.info() != Eigen::Success)
      throw Error(source + ": same-speaker covariance is not positive definite");
    const Matrix p_inv = llt_p.solve(Matrix::Identity(d, d));
    self_ = p_inv - t_inv;
    cross_ = -t_inv * b * p_inv;
    const double logdet_t = 2.0 * llt_t.matrixLLT().diagonal().array().log().sum();
    const double logdet_p = 2.0 * llt_p.matrixLLT().diagonal().array().log().sum();
    constant_ = -0.5 * (logdet_p - logdet_t);
  }

  double Score(const Eigen::Ref<const Vector> &enroll, const Eigen::Ref<const Vector> &test) const {
    if (enroll.size() != mu_.size() || test.size() != mu_.size())
      throw Error("plda_llr: dimension mismatch");
    const Vector e = enroll - mu_, t = test - mu_;
    return constant_ - 0.5 * (e.dot(self_ * e) + t.dot(self_ * t) + 2.0 * e.dot(cross_ * t));
  }

 private:
  Vector mu_;
  Matrix self_, cross_;
  double constant_ = 0.0;
};

inline double PldaLlr(const PldaModel &m, const Eigen::Ref<const Vector> &enroll,
                      const Eigen::Ref<const Vector> &test) {
  return PldaScorer(m).Score(enroll, test);
}

struct PldaTrainConfig {
  bool zero_init = false;   // start with V = 0 (no speaker subspace)
  double init_scale = 0.5;  // times sqrt(mean total variance)
};

struct PldaTrainResult {
  PldaModel model;
  /// Total data log-likelihood before each iteration and after the last.
  std::vector<double> loglike_history;
};

namespace detail {

struct PldaSpeaker {
  std::vector<Eigen::Index> rows;
  Vector sum;  // sum of centred vectors
};

/// Log-likelihood of all data and, when `acc` is given, EM accumulators
/// sum_i (sum_j r_ij) E[y_i]' and sum_i n_i E[y_i y_i'].
inline double PldaEStep(const PldaModel &m, const Matrix &centred,
                        const std::vector<PldaSpeaker> &speakers, Matrix *acc_r, Matrix *acc_yy) {
  const Eigen::Index d = m.Dim(), q = m.Rank();
  Eigen::LLT<Matrix> llt_s(m.sigma);
  if (llt_s.info() != Eigen::Success) throw Error("train_plda: Sigma is not positive definite");
  const double logdet_s = 2.0 * llt_s.matrixLLT().diagonal().array().log().sum();
  const Matrix s_inv_v = llt_s.solve(m.v);
  const Matrix vt_s_inv_v = m.v.transpose() * s_inv_v;
  double ll = 0.0;
  for (const auto &spk : speakers) {
    const auto n = static_cast<double>(spk.rows.size());
    double quad = 0.0;
    for (auto r : spk.rows) {
      const Vector x = centred.row(r).transpose();
      quad += x.dot(llt_s.solve(x));
    }
    ll += -0.5 * (n * d * kLog2Pi + n * logdet_s + quad);
    if (spk.rows.size() < 2 || q == 0) continue;  // singletons: y absent
    const Matrix l = Matrix::Identity(q, q) + n * vt_s_inv_v;
    Eigen::LLT<Matrix> llt_l(l);
    const Vector b = s_inv_v.transpose() * spk.sum;
    const Vector ey = llt_l.solve(b);
    ll += -0.5 * (2.0 * llt_l.matrixLLT().diagonal().array().log().sum() - b.dot(ey));
    if (acc_r) {
      acc_r->noalias() += spk.sum * ey.transpose();
      acc_yy->noalias() += n * (llt_l.solve(Matrix::Identity(q, q)) + ey * ey.transpose());
    }
  }
  return ll;
}

}  // namespace detail

/// EM for the PLDA model.  Speakers with a single vector inform only Sigma.
inline PldaTrainResult TrainPlda(const Eigen::Ref<const Matrix> &vectors,
                                 const std::vector<std::string> &labels, int rank, int iters,
                                 std::uint64_t seed, const PldaTrainConfig &cfg = {}) {
  const Eigen::Index n = vectors.rows(), d = vectors.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw Error("train_plda: label count mismatch");
  if (rank < 0 || rank > d) throw Error("train_plda: rank must be in [0, dim]");
  std::map<std::string, detail::PldaSpeaker> by_label;
  for (Eigen::Index i = 0; i < n; ++i) by_label[labels[static_cast<std::size_t>(i)]].rows.push_back(i);
  int multi = 0;
  for (const auto &[_, s] : by_label) multi += s.rows.size() >= 2;
  if (multi < 2) throw Error("train_plda: need at least 2 speakers with 2 or more sessions");

  PldaTrainResult res;
  PldaModel &m = res.model;
  m.mu = vectors.colwise().mean().transpose();
  const Matrix centred = vectors.rowwise() - m.mu.transpose();
  std::vector<detail::PldaSpeaker> speakers;
  Matrix within = Matrix::Zero(d, d);
  double within_count = 0.0;
  for (auto &[_, s] : by_label) {
    s.sum = Vector::Zero(d);
    for (auto r : s.rows) s.sum += centred.row(r).transpose();
    if (s.rows.size() >= 2) {
      const Vector mean = s.sum / static_cast<double>(s.rows.size());
      for (auto r : s.rows) {
        const Vector x = centred.row(r).transpose() - mean;
        within.noalias() += x * x.transpose();
      }
      within_count += static_cast<double>(s.rows.size());
    }
    speakers.push_back(std::move(s));
  }
  m.sigma = within / within_count;
  m.sigma += (1e-6 * m.sigma.trace() / d) * Matrix::Identity(d, d);

  m.v = Matrix::Zero(d, rank);
  if (!cfg.zero_init) {
    const double scale = cfg.init_scale * std::sqrt((centred.cwiseAbs2().sum()) / (n * d));
    Rng rng(seed);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < rank; ++j) m.v(i, j) = scale * rng.Normal();
  }

  const Matrix scatter = centred.transpose() * centred;
  for (int it = 0; it <= iters; ++it) {
    Matrix acc_r = Matrix::Zero(d, rank), acc_yy = Matrix::Zero(rank, rank);
    const double ll = detail::PldaEStep(m, centred, speakers, &acc_r, &acc_yy);
    res.loglike_history.push_back(ll);
    if (it == iters) break;
    if (rank > 0 && acc_yy.trace() > 0.0)
      m.v = acc_yy.ldlt().solve(acc_r.transpose()).transpose();
    Matrix sigma = (scatter - m.v * acc_r.transpose()) / static_cast<double>(n);
    m.sigma = 0.5 * (sigma + sigma.transpose());
  }
  return res;
}

inline double PldaLogLikelihood(const PldaModel &m, const Eigen::Ref<const Matrix> &vectors,
                                const std::vector<std::string> &labels) {
  std::map<std::string, detail::PldaSpeaker> by_label;
  for (Eigen::Index i = 0; i < vectors.rows(); ++i)
    by_label[labels[static_cast<std::size_t>(i)]].rows.push_back(i);
  const Matrix centred = vectors.rowwise() - m.mu.transpose();
  std::vector<detail::PldaSpeaker> speakers;
  for (auto &[_, s] : by_label) {
    s.sum = Vector::Zero(m.Dim());
    for (auto r : s.rows) s.sum += centred.row(r).transpose();
    speakers.push_back(std::move(s));
  }
  return detail::PldaEStep(m, centred, speakers, nullptr, nullptr);
}

inline std::string FormatPlda(const PldaModel &m) {
  TextWriter w("spkr-plda", 1);
  w.Scalar("dim", m.Dim());
  w.Scalar("rank", m.Rank());
  w.Vec("mu", m.mu);
  w.Mat("v", m.v);
  w.Mat("sigma", m.sigma);
  return w.str();
}

inline PldaModel ReadPlda(const std::filesystem::path &path) {
  auto r = TextReader::FromFile(path, "spkr-plda", 1);
  PldaModel m;
  const auto d = r.Scalar<Eigen::Index>("dim");
  const auto q = r.Scalar<Eigen::Index>("rank");
  m.mu = r.Vec("mu");
  m.v = r.Mat("v");
  m.sigma = r.Mat("sigma");
  if (m.mu.size() != d || m.v.rows() != d || m.v.cols() != q || m.sigma.rows() != d)
    r.Fail("shape mismatch");
  return m;
}

// ---------------------------------------------------------------------------
// T-norm.

/// (raw - mean) / sd over the cohort scores of the same test segment, with
/// the sample (n - 1) standard deviation.
inline double TNorm(double raw, std::span<const double> cohort) {
  if (cohort.size() < 2) throw Error("degenerate cohort");
  double mean = 0.0;
  for (double c : cohort) mean += c;
  mean /= static_cast<double>(cohort.size());
  double ss = 0.0;
  for (double c : cohort) ss += (c - mean) * (c - mean);
  const double sd = std::sqrt(ss / static_cast<double>(cohort.size() - 1));
  if (!(sd > 0.0)) throw Error("degenerate cohort");
  return (raw - mean) / sd;
}

// ---------------------------------------------------------------------------
// Trial scores.

inline const std::vector<std::string> &DefaultSubsystems() {
  static const std::vector<std::string> names{"gmm", "tvs_cosine", "tvs_plda"};
  return names;
}

struct TrialScore {
  std::string enroll_id;
  std::string test_id;
  double d_enroll = 0.0;
  double d_test = 0.0;
  std::vector<double> scores;  // one per subsystem
  std::optional<bool> is_target;
};

struct ScoreTable {
  std::vector<std::string> subsystems = DefaultSubsystems();
  std::vector<TrialScore> trials;
};

/// Tab-separated: enroll_id test_id d_enroll d_test <subsystems...> label,
/// reals with 9 significant digits, label one of tgt/non/?.
inline std::string FormatScores(const ScoreTable &table) {
  std::ostringstream os;
  os << "enroll_id\ttest_id\td_enroll\td_test";
  for (const auto &s : table.subsystems) os << '\t' << s;
  os << "\tlabel\n";
  for (const auto &t : table.trials) {
    if (t.scores.size() != table.subsystems.size()) throw Error("score row arity mismatch");
    os << t.enroll_id << '\t' << t.test_id << '\t' << FormatDouble(t.d_enroll, 9) << '\t'
       << FormatDouble(t.d_test, 9);
    for (double s : t.scores) os << '\t' << FormatDouble(s, 9);
    os << '\t' << (t.is_target ? (*t.is_target ? "tgt" : "non") : "?") << '\n';
  }
  return os.str();
}

inline ScoreTable ParseScores(const std::string &text, const std::string &source = "<scores>") {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw Error(source + ": empty score file");
  const auto header = SplitTabs(line);
  if (header.size() < 6 || header[0] != "enroll_id" || header[1] != "test_id" ||
      header[2] != "d_enroll" || header[3] != "d_test" || header.back() != "label")
    throw Error(source + ": bad score file header");
  ScoreTable table;
  table.subsystems.assign(header.begin() + 4, header.end() - 1);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = SplitTabs(line);
    if (f.size() != header.size())
      throw Error(source + ":" + std::to_string(lineno) + ": wrong field count");
    TrialScore t;
    t.enroll_id = f[0];
    t.test_id = f[1];
    t.d_enroll = std::strtod(f[2].c_str(), nullptr);
    t.d_test = std::strtod(f[3].c_str(), nullptr);
    for (std::size_t i = 4; i + 1 < f.size(); ++i) t.scores.push_back(std::strtod(f[i].c_str(), nullptr));
    const std::string &label = f.back();
    if (label == "tgt") t.is_target = true;
    else if (label == "non") t.is_target = false;
    else if (label != "?") throw Error(source + ":" + std::to_string(lineno) + ": bad label '" + label + "'");
    table.trials.push_back(std::move(t));
  }
  return table;
}

inline ScoreTable ReadScores(const std::filesystem::path &path) {
  return ParseScores(ReadFileToString(path), path.string());
}

}  // namespace spkr

#endif  // SPKR_SCORING_HPP_
