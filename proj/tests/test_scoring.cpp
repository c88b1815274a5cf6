// tests/test_scoring.cpp

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

#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "spkr/scoring.hpp"
#include "test_util.hpp"

namespace spkr {
namespace {

using testing::RandomMatrix;
using testing::RandomVector;

PldaModel RandomPlda(Rng &rng, Eigen::Index d, Eigen::Index q) {
  PldaModel m;
  m.mu = RandomVector(rng, d);
  m.v = RandomMatrix(rng, d, q, 0.8);
  const Matrix a = RandomMatrix(rng, d, d, 0.4);
  m.sigma = a * a.transpose() + 0.3 * Matrix::Identity(d, d);
  return m;
}

// Dense multivariate normal log-density.
double LogNormal(const Vector &x, const Matrix &cov) {
  Eigen::LLT<Matrix> llt(cov);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (x.size() * std::log(2.0 * std::numbers::pi) + logdet + x.dot(llt.solve(x)));
}

// LLR from the explicit 2d-dimensional joint Gaussians.
double DenseLlr(const PldaModel &m, const Vector &e, const Vector &t) {
  const Eigen::Index d = m.Dim();
  const Matrix b = m.v * m.v.transpose(), tot = b + m.sigma;
  Matrix same(2 * d, 2 * d);
  same << tot, b, b, tot;
  Vector joint(2 * d);
  joint << e - m.mu, t - m.mu;
  return LogNormal(joint, same) - LogNormal(e - m.mu, tot) - LogNormal(t - m.mu, tot);
}

// Speakers drawn from a known PLDA model.
Matrix SimulatePlda(const PldaModel &m, int speakers, int sessions, Rng &rng,
                    std::vector<std::string> &labels) {
  const Eigen::LLT<Matrix> chol(m.sigma);
  const Matrix lower = chol.matrixL();
  Matrix x(speakers * sessions, m.Dim());
  labels.clear();
  for (int s = 0; s < speakers; ++s) {
    const Vector y = RandomVector(rng, m.Rank());
    for (int j = 0; j < sessions; ++j) {
      x.row(s * sessions + j) = (m.mu + m.v * y + lower * RandomVector(rng, m.Dim())).transpose();
      labels.push_back("spk" + std::to_string(s));
    }
  }
  return x;
}

TEST(Cosine, Examples) {
  const Vector a = Vector(Eigen::Vector2d(1, 0)), b = Vector(Eigen::Vector2d(1, 1));
  EXPECT_DOUBLE_EQ(CosineScore(b, b), 1.0);
  EXPECT_EQ(CosineScore(a, Vector(Eigen::Vector2d(0, 3))), 0.0);
  EXPECT_NEAR(CosineScore(a, b), 0.70711, 1e-5);
  EXPECT_NEAR(CosineScore(a, b), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(CosineScore(a, Vector::Zero(2)), Error);
  EXPECT_THROW(CosineScore(a, Vector::Ones(3)), Error);
}

TEST(Cosine, ScaleInvariant) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Vector a = RandomVector(rng, 6), b = RandomVector(rng, 6);
    const double lambda = rng.Uniform(1e-3, 1e3);
    const double s = CosineScore(a, b);
    EXPECT_NEAR(CosineScore(a, lambda * b), s, 1e-12);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(PldaLlr, MatchesDenseGaussianOracle) {
  Rng rng(2);
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const auto d = static_cast<Eigen::Index>(1 + rng.Below(8));
    const auto q = static_cast<Eigen::Index>(1 + rng.Below(static_cast<std::uint64_t>(d)));
    const PldaModel m = RandomPlda(rng, d, q);
    const Vector e = m.mu + RandomVector(rng, d), t = m.mu + RandomVector(rng, d);
    worst = std::max(worst, std::abs(PldaLlr(m, e, t) - DenseLlr(m, e, t)));
  }
  EXPECT_LT(worst, 1e-8);
}

TEST(PldaLlr, AtTheMeanOnlyTheConstantRemains) {
  Rng rng(3);
  const PldaModel m = RandomPlda(rng, 4, 2);
  const Matrix b = m.v * m.v.transpose(), tot = b + m.sigma;
  // Same-speaker vs independent joint covariance, both evaluated at zero.
  Matrix same(8, 8), diff = Matrix::Zero(8, 8);
  same << tot, b, b, tot;
  diff << tot, Matrix::Zero(4, 4), Matrix::Zero(4, 4), tot;
  const double expect = -0.5 * (LogDetSpd(same) - LogDetSpd(diff));
  EXPECT_NEAR(PldaLlr(m, m.mu, m.mu), expect, 1e-10);
  // Equivalently -ln det(I - G^2) / 2 with G = T^-1 B.
  const Matrix g = tot.llt().solve(b);
  EXPECT_NEAR(PldaLlr(m, m.mu, m.mu),
              -0.5 * std::log((Matrix::Identity(4, 4) - g * g).determinant()), 1e-10);
}

TEST(PldaLlr, Symmetric) {
  Rng rng(4);
  const PldaModel m = RandomPlda(rng, 6, 3);
  const PldaScorer scorer(m);
  for (int i = 0; i < 100; ++i) {
    const Vector a = RandomVector(rng, 6, 2.0), b = RandomVector(rng, 6, 2.0);
    EXPECT_NEAR(scorer.Score(a, b), scorer.Score(b, a), 1e-10);
  }
}

TEST(PldaLlr, ZeroSubspaceGivesZero) {
  Rng rng(5);
  PldaModel m = RandomPlda(rng, 5, 2);
  m.v.setZero();
  for (int i = 0; i < 20; ++i)
    EXPECT_NEAR(PldaLlr(m, RandomVector(rng, 5), RandomVector(rng, 5)), 0.0, 1e-12);
}

TEST(PldaLlr, NonPdCovarianceNamesSource) {
  Rng rng(6);
  PldaModel m = RandomPlda(rng, 3, 1);
  m.sigma = -Matrix::Identity(3, 3);
  m.v.setZero();
  try {
    PldaScorer scorer(m, "models/plda.txt");
    FAIL();
  } catch (const Error &e) {
    EXPECT_NE(std::string(e.what()).find("models/plda.txt"), std::string::npos);
  }
}

TEST(PldaTrain, LogLikelihoodMonotoneAndMatchesEvaluator) {
  Rng rng(7);
  const PldaModel truth = RandomPlda(rng, 5, 2);
  std::vector<std::string> labels;
  const Matrix x = SimulatePlda(truth, 60, 4, rng, labels);
  const auto res = TrainPlda(x, labels, 2, 15, 3);
  ASSERT_EQ(res.loglike_history.size(), 16u);
  for (std::size_t i = 1; i < res.loglike_history.size(); ++i) {
    const double prev = res.loglike_history[i - 1];
    EXPECT_GE(res.loglike_history[i], prev - 1e-8 * std::abs(prev)) << i;
  }
  EXPECT_NEAR(PldaLogLikelihood(res.model, x, labels), res.loglike_history.back(),
              1e-9 * std::abs(res.loglike_history.back()));
}

TEST(PldaTrain, MarginalLikelihoodMatchesDenseOracle) {
  Rng rng(8);
  const PldaModel m = RandomPlda(rng, 3, 2);
  std::vector<std::string> labels;
  const Matrix x = SimulatePlda(m, 3, 3, rng, labels);
  // Each speaker's sessions are jointly Gaussian with B off the diagonal.
  const Matrix b = m.v * m.v.transpose();
  double expect = 0.0;
  for (int s = 0; s < 3; ++s) {
    Matrix cov(9, 9);
    Vector joint(9);
    for (int i = 0; i < 3; ++i) {
      joint.segment(3 * i, 3) = x.row(3 * s + i).transpose() - m.mu;
      for (int j = 0; j < 3; ++j) cov.block(3 * i, 3 * j, 3, 3) = b + (i == j ? m.sigma : Matrix::Zero(3, 3));
    }
    expect += LogNormal(joint, cov);
  }
  EXPECT_NEAR(PldaLogLikelihood(m, x, labels), expect, 1e-9);
}

TEST(PldaTrain, RecoversKnownSubspace) {
  Rng rng(9);
  PldaModel truth = RandomPlda(rng, 5, 2);
  truth.v *= 1.5;
  std::vector<std::string> labels;
  const Matrix x = SimulatePlda(truth, 200, 5, rng, labels);
  const auto res = TrainPlda(x, labels, 2, 50, 4);
  const Matrix qa = Eigen::HouseholderQR<Matrix>(truth.v).householderQ() * Matrix::Identity(5, 2);
  const Matrix qb = Eigen::HouseholderQR<Matrix>(res.model.v).householderQ() * Matrix::Identity(5, 2);
  const double cos_min = Eigen::JacobiSVD<Matrix>(qa.transpose() * qb).singularValues().minCoeff();
  EXPECT_LT(std::acos(std::min(1.0, cos_min)) * 180.0 / std::numbers::pi, 15.0);
}

TEST(PldaTrain, ZeroInitWithoutIterationsIsSingleGaussian) {
  Rng rng(10);
  const PldaModel truth = RandomPlda(rng, 4, 2);
  std::vector<std::string> labels;
  const Matrix x = SimulatePlda(truth, 20, 3, rng, labels);
  PldaTrainConfig cfg;
  cfg.zero_init = true;
  const PldaModel m = TrainPlda(x, labels, 2, 0, 1, cfg).model;
  EXPECT_EQ(m.v.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LT((m.mu - x.colwise().mean().transpose()).norm(), 1e-12);
  EXPECT_NEAR(PldaLlr(m, x.row(0).transpose(), x.row(1).transpose()), 0.0, 1e-12);
}

TEST(PldaTrain, DeterministicAndValidated) {
  Rng rng(11);
  const PldaModel truth = RandomPlda(rng, 4, 2);
  std::vector<std::string> labels;
  const Matrix x = SimulatePlda(truth, 10, 3, rng, labels);
  const auto a = TrainPlda(x, labels, 2, 4, 8), b = TrainPlda(x, labels, 2, 4, 8);
  EXPECT_EQ(a.model.v, b.model.v);
  EXPECT_EQ(a.model.sigma, b.model.sigma);
  EXPECT_THROW(TrainPlda(x, labels, 5, 1, 0), Error);
  std::vector<std::string> singletons(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) singletons[i] = "u" + std::to_string(i);
  singletons[0] = singletons[1] = "pair";
  EXPECT_THROW(TrainPlda(x, singletons, 2, 1, 0), Error);
}

TEST(PldaTrain, SingletonsInformOnlySigma) {
  Rng rng(12);
  const PldaModel truth = RandomPlda(rng, 3, 1);
  std::vector<std::string> labels;
  Matrix x = SimulatePlda(truth, 12, 3, rng, labels);
  Matrix extra(x.rows() + 2, 3);
  extra << x, RandomMatrix(rng, 2, 3);
  labels.push_back("lonely1");
  labels.push_back("lonely2");
  const auto res = TrainPlda(extra, labels, 1, 6, 2);
  for (std::size_t i = 1; i < res.loglike_history.size(); ++i)
    EXPECT_GE(res.loglike_history[i], res.loglike_history[i - 1] - 1e-8 * std::abs(res.loglike_history[i - 1]));
}

TEST(TNorm, Examples) {
  const std::vector<double> cohort{1.0, 3.0};
  EXPECT_NEAR(TNorm(5.0, cohort), 3.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(TNorm(5.0, cohort), 2.1213, 1e-4);
  EXPECT_EQ(TNorm(2.0, cohort), 0.0);
  const std::vector<double> shifted{8.5, 10.5};
  EXPECT_NEAR(TNorm(12.5, shifted), TNorm(5.0, cohort), 1e-12);
}

TEST(TNorm, DegenerateCohortRejected) {
  const std::vector<double> same{2.0, 2.0, 2.0}, one{1.0};
  for (const auto *c : {&same, &one}) {
    try {
      TNorm(1.0, *c);
      FAIL();
    } catch (const Error &e) {
      EXPECT_NE(std::string(e.what()).find("degenerate cohort"), std::string::npos);
    }
  }
}

TEST(TNorm, CohortMembersBecomeStandardised) {
  Rng rng(13);
  std::vector<double> cohort(25);
  for (auto &c : cohort) c = rng.Normal(3.0, 2.0);
  double mean = 0.0, ss = 0.0;
  std::vector<double> z;
  for (double c : cohort) z.push_back(TNorm(c, cohort));
  for (double v : z) mean += v / z.size();
  for (double v : z) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt(ss / (z.size() - 1)), 1.0, 1e-12);
}

TEST(ScoreFile, RoundTrip) {
  ScoreTable table;
  table.trials.push_back({"spk-s000", "spk-s001@2", 0.5, 2.0, {1.25, -0.125, 3.0e-5}, true});
  table.trials.push_back({"spk-s000", "oth-s001", 0.5, 10.0, {0.1, 0.2, 0.3}, false});
  table.trials.push_back({"a", "b", 1.0, 1.0, {0.0, 0.0, 0.0}, std::nullopt});
  const std::string text = FormatScores(table);
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "enroll_id\ttest_id\td_enroll\td_test\tgmm\ttvs_cosine\ttvs_plda\tlabel");
  const ScoreTable back = ParseScores(text);
  ASSERT_EQ(back.trials.size(), 3u);
  EXPECT_EQ(back.subsystems, table.subsystems);
  EXPECT_EQ(back.trials[0].scores, table.trials[0].scores);
  EXPECT_EQ(back.trials[0].is_target, std::optional<bool>(true));
  EXPECT_EQ(back.trials[1].is_target, std::optional<bool>(false));
  EXPECT_FALSE(back.trials[2].is_target.has_value());
  EXPECT_EQ(FormatScores(back), text);
  EXPECT_THROW(ParseScores("x\ty\n"), Error);
}

TEST(ModelFile, PldaRoundTrip) {
  testing::TempDir dir("plda");
  Rng rng(14);
  const PldaModel m = RandomPlda(rng, 4, 2);
  WriteStringToFile(dir / "plda.txt", FormatPlda(m));
  const PldaModel back = ReadPlda(dir / "plda.txt");
  EXPECT_EQ(back.mu, m.mu);
  EXPECT_EQ(back.v, m.v);
  EXPECT_EQ(back.sigma, m.sigma);
}

}  // namespace
}  // namespace spkr
