// spkr/fusion.hpp

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

// Score fusion: mean, prior-weighted logistic regression, a one-hidden-layer
// network, and per (enrolment, test) duration-cell variants of the last two.
// Every fused score is a pre-sigmoid log-odds value.

#ifndef SPKR_FUSION_HPP_
#define SPKR_FUSION_HPP_

#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "spkr/common.hpp"
#include "spkr/corpus.hpp"
#include "spkr/scoring.hpp"
#include "spkr/textio.hpp"

namespace spkr {

inline double FuseMean(std::span<const double> scores) {
  if (scores.empty()) throw Error("fuse_mean: no scores");
  double s = 0.0;
  for (double x : scores) s += x;
  return s / static_cast<double>(scores.size());
}

/// Labelled training scores, one row per trial.
struct FusionData {
  Matrix scores;                     // N x S
  std::vector<std::uint8_t> target;  // N

  Eigen::Index NumSubsystems() const { return scores.cols(); }
  std::size_t NumTargets() const {
    return static_cast<std::size_t>(std::count(target.begin(), target.end(), 1));
  }
  std::size_t NumNontargets() const { return target.size() - NumTargets(); }
};

/// Labelled trials only; unlabelled rows are skipped.
inline FusionData MakeFusionData(std::span<const TrialScore> trials) {
  std::vector<const TrialScore *> rows;
  for (const auto &t : trials)
    if (t.is_target) rows.push_back(&t);
  FusionData data;
  const auto s = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front()->scores.size());
  data.scores.resize(static_cast<Eigen::Index>(rows.size()), s);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i]->scores.size()) != s) throw Error("fusion: arity mismatch");
    for (Eigen::Index j = 0; j < s; ++j)
      data.scores(static_cast<Eigen::Index>(i), j) = rows[i]->scores[static_cast<std::size_t>(j)];
    data.target.push_back(*rows[i]->is_target ? 1 : 0);
  }
  return data;
}

inline double Logit(double p) { return std::log(p / (1.0 - p)); }

namespace detail {
inline double Softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double Sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Per-trial weight and signed label for the prior-weighted cross-entropy
/// pi/Nt sum_tgt softplus(-(s + logit pi)) + (1-pi)/Nn sum_non softplus(s + logit pi).
inline void CheckBothClasses(const FusionData &d, const char *who) {
  if (d.NumTargets() == 0 || d.NumNontargets() == 0)
    throw Error(std::string(who) + ": both target and non-target trials are required");
}

/// Loss contribution and d loss / d score for one trial.
inline std::pair<double, double> WeightedCrossEntropy(double score, bool target, double w_tgt,
                                                      double w_non, double offset) {
  const double z = score + offset;
  if (target) return {w_tgt * Softplus(-z), -w_tgt * Sigmoid(-z)};
  return {w_non * Softplus(z), w_non * Sigmoid(z)};
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Logistic regression.

struct LrFusion {
  Vector weights;
  double offset = 0.0;

  double Apply(std::span<const double> scores) const {
    if (static_cast<Eigen::Index>(scores.size()) != weights.size())
      throw Error("apply_lr_fusion: expected " + std::to_string(weights.size()) + " scores, got " +
                  std::to_string(scores.size()));
    double s = offset;
    for (std::size_t i = 0; i < scores.size(); ++i) s += weights(static_cast<Eigen::Index>(i)) * scores[i];
    return s;
  }
};

struct LrTrainConfig {
  double target_prior = 0.5;
  double gradient_tolerance = 1e-9;
  int max_iters = 200;
  double max_weight_norm = 1e3;
};

/// Objective at theta = (w, b); fills the gradient when asked.
inline double LrObjective(const Vector &theta, const FusionData &data, double prior,
                          Vector *gradient = nullptr) {
  const Eigen::Index s = data.NumSubsystems();
  if (theta.size() != s + 1) throw Error("lr objective: parameter size mismatch");
  const double w_tgt = prior / static_cast<double>(data.NumTargets());
  const double w_non = (1.0 - prior) / static_cast<double>(data.NumNontargets());
  const double offset = Logit(prior);
  const Vector lin = data.scores * theta.head(s);
  double loss = 0.0;
  if (gradient) *gradient = Vector::Zero(s + 1);
  for (Eigen::Index i = 0; i < data.scores.rows(); ++i) {
    const auto [l, dl] = detail::WeightedCrossEntropy(lin(i) + theta(s), data.target[static_cast<std::size_t>(i)],
                                                      w_tgt, w_non, offset);
    loss += l;
    if (gradient) {
      gradient->head(s) += dl * data.scores.row(i).transpose();
      (*gradient)(s) += dl;
    }
  }
  return loss;
}

/// Damped Newton on the convex objective, stopping at the gradient-norm
/// tolerance.  Separable data drive |w| upward; it is capped with a warning.
inline LrFusion TrainLrFusion(const FusionData &data, const LrTrainConfig &cfg = {}) {
  detail::CheckBothClasses(data, "train_lr_fusion");
  if (!(cfg.target_prior > 0.0 && cfg.target_prior < 1.0))
    throw Error("train_lr_fusion: target prior must be in (0, 1)");
  const Eigen::Index s = data.NumSubsystems(), p = s + 1;
  const double prior = cfg.target_prior;
  const double w_tgt = prior / static_cast<double>(data.NumTargets());
  const double w_non = (1.0 - prior) / static_cast<double>(data.NumNontargets());
  const double offset = Logit(prior);
  Matrix design(data.scores.rows(), p);
  design << data.scores, Vector::Ones(data.scores.rows());

  Vector theta = Vector::Zero(p);
  Vector grad;
  double loss = LrObjective(theta, data, prior, &grad);
  bool capped = false;
  for (int it = 0; it < cfg.max_iters && grad.norm() > cfg.gradient_tolerance; ++it) {
    const Vector z = design * theta;
    Vector h(design.rows());
    for (Eigen::Index i = 0; i < design.rows(); ++i) {
      const double sg = detail::Sigmoid(z(i) + offset);
      h(i) = (data.target[static_cast<std::size_t>(i)] ? w_tgt : w_non) * sg * (1.0 - sg);
    }
    Matrix hess = design.transpose() * h.asDiagonal() * design;
    hess.diagonal().array() += 1e-12 * (1.0 + hess.diagonal().maxCoeff());
    const Vector step = hess.ldlt().solve(grad);
    double alpha = 1.0;
    Vector next;
    double next_loss = loss;
    Vector next_grad;
    for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
      next = theta - alpha * step;
      next_loss = LrObjective(next, data, prior, &next_grad);
      if (next_loss <= loss) break;
    }
    if (!(next_loss <= loss)) break;  // no descent possible at machine precision
    const bool stalled = loss - next_loss <= 0.0 && (next - theta).norm() == 0.0;
    theta = next;
    loss = next_loss;
    grad = next_grad;
    if (theta.head(s).norm() > cfg.max_weight_norm) {
      theta.head(s) *= cfg.max_weight_norm / theta.head(s).norm();
      capped = true;
      break;
    }
    if (stalled) break;
  }
  // The gradient tolerance can be met long before |w| diverges.  If every
  // trial sits on its own side of the boundary the infimum is at infinity, so
  // scale out along the current direction to the cap.
  if (!capped && theta.head(s).norm() > 0.0) {
    const Vector z = design * theta;
    bool separated = true;
    for (Eigen::Index i = 0; i < z.size() && separated; ++i)
      separated = data.target[static_cast<std::size_t>(i)] ? z(i) + offset > 0.0 : z(i) + offset < 0.0;
    if (separated) {
      const double scale = cfg.max_weight_norm / theta.head(s).norm();
      if (scale > 1.0) {
        Vector grown = theta * scale;
        grown(s) += (scale - 1.0) * offset;  // scale z + offset, not z
        theta = grown;
      }
      capped = true;
    }
  }
  if (capped) Warn("train_lr_fusion: classes are separable; weight norm capped at " +
                   FormatDouble(cfg.max_weight_norm, 6));
  return {theta.head(s), theta(s)};
}

// ---------------------------------------------------------------------------
// Feed-forward network: S inputs -> 4 tanh units -> 1 linear output.

struct NnFusion {
  static constexpr Eigen::Index kHidden = 4;
  Matrix input_weights;  // S x 4
  Vector hidden_bias;    // 4
  Vector output_weights; // 4
  double output_bias = 0.0;

  static NnFusion Zero(Eigen::Index inputs) {
    return {Matrix::Zero(inputs, kHidden), Vector::Zero(kHidden), Vector::Zero(kHidden), 0.0};
  }

  Eigen::Index NumInputs() const { return input_weights.rows(); }
  Eigen::Index NumParams() const { return NumInputs() * kHidden + 2 * kHidden + 1; }

  /// Packing order: input weights (row-major), hidden bias, output weights,
  /// output bias.
  Vector Pack() const {
    Vector p(NumParams());
    Eigen::Index i = 0;
    for (Eigen::Index r = 0; r < input_weights.rows(); ++r)
      for (Eigen::Index c = 0; c < kHidden; ++c) p(i++) = input_weights(r, c);
    p.segment(i, kHidden) = hidden_bias; i += kHidden;
    p.segment(i, kHidden) = output_weights; i += kHidden;
    p(i) = output_bias;
    return p;
  }

  static NnFusion Unpack(const Vector &p, Eigen::Index inputs) {
    NnFusion m = Zero(inputs);
    if (p.size() != m.NumParams()) throw Error("nn fusion: parameter size mismatch");
    Eigen::Index i = 0;
    for (Eigen::Index r = 0; r < inputs; ++r)
      for (Eigen::Index c = 0; c < kHidden; ++c) m.input_weights(r, c) = p(i++);
    m.hidden_bias = p.segment(i, kHidden); i += kHidden;
    m.output_weights = p.segment(i, kHidden); i += kHidden;
    m.output_bias = p(i);
    return m;
  }

  double Apply(std::span<const double> scores) const {
    if (static_cast<Eigen::Index>(scores.size()) != NumInputs())
      throw Error("apply_nn_fusion: expected " + std::to_string(NumInputs()) + " scores, got " +
                  std::to_string(scores.size()));
    double out = output_bias;
    for (Eigen::Index h = 0; h < kHidden; ++h) {
      double a = hidden_bias(h);
      for (std::size_t i = 0; i < scores.size(); ++i)
        a += input_weights(static_cast<Eigen::Index>(i), h) * scores[i];
      out += output_weights(h) * std::tanh(a);
    }
    return out;
  }
};

struct NnTrainConfig {
  double target_prior = 0.5;
  int epochs = 2000;
  double learning_rate = 0.5;
  double init_range = 0.5;
};

/// Same prior-weighted cross-entropy as the LR trainer, on the network output.
inline double NnObjective(const Vector &params, const FusionData &data, double prior,
                          Vector *gradient = nullptr) {
  const Eigen::Index s = data.NumSubsystems(), hsz = NnFusion::kHidden;
  const NnFusion m = NnFusion::Unpack(params, s);
  const double w_tgt = prior / static_cast<double>(data.NumTargets());
  const double w_non = (1.0 - prior) / static_cast<double>(data.NumNontargets());
  const double offset = Logit(prior);
  Matrix act = data.scores * m.input_weights;  // N x 4
  act.rowwise() += m.hidden_bias.transpose();
  const Matrix hidden = act.array().tanh().matrix();
  const Vector out = (hidden * m.output_weights).array() + m.output_bias;
  double loss = 0.0;
  Vector dout(out.size());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const auto [l, dl] = detail::WeightedCrossEntropy(out(i), data.target[static_cast<std::size_t>(i)],
                                                      w_tgt, w_non, offset);
    loss += l;
    dout(i) = dl;
  }
  if (gradient) {
    NnFusion g = NnFusion::Zero(s);
    g.output_bias = dout.sum();
    g.output_weights = hidden.transpose() * dout;
    // d act = dout * w2 * (1 - tanh^2)
    Matrix dact = (dout * m.output_weights.transpose()).array() * (1.0 - hidden.array().square());
    g.hidden_bias = dact.colwise().sum().transpose();
    g.input_weights = data.scores.transpose() * dact;
    *gradient = g.Pack();
    (void)hsz;
  }
  return loss;
}

inline NnFusion InitNnFusion(Eigen::Index inputs, std::uint64_t seed, double range) {
  NnFusion m = NnFusion::Zero(inputs);
  Vector p = m.Pack();
  Rng rng(seed);
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = rng.Uniform(-range, range);
  return NnFusion::Unpack(p, inputs);
}

/// Full-batch gradient descent from a seeded uniform initialisation.
inline NnFusion TrainNnFusion(const FusionData &data, std::uint64_t seed, const NnTrainConfig &cfg = {}) {
  detail::CheckBothClasses(data, "train_nn_fusion");
  if (!(cfg.target_prior > 0.0 && cfg.target_prior < 1.0))
    throw Error("train_nn_fusion: target prior must be in (0, 1)");
  const Eigen::Index s = data.NumSubsystems();
  Vector p = InitNnFusion(s, seed, cfg.init_range).Pack();
  Vector grad;
  for (int e = 0; e < cfg.epochs; ++e) {
    NnObjective(p, data, cfg.target_prior, &grad);
    p -= cfg.learning_rate * grad;
  }
  return NnFusion::Unpack(p, s);
}

// ---------------------------------------------------------------------------
// Duration-dependent fusion.

/// Nearest grid point in log-duration; boundaries at geometric midpoints,
/// ties to the smaller point, clamped at both ends.
inline double AssignBin(double duration, const DurationGrid &grid) {
  if (!(duration > 0.0)) throw Error("assign_bin: duration must be positive");
  const auto &p = grid.points();
  for (std::size_t i = 0; i + 1 < p.size(); ++i)
    if (std::log(duration) <= 0.5 * (std::log(p[i]) + std::log(p[i + 1]))) return p[i];
  return p.back();
}

inline std::size_t AssignBinIndex(double duration, const DurationGrid &grid) {
  return static_cast<std::size_t>(grid.IndexOf(AssignBin(duration, grid)));
}

enum class FusionKind { kLr, kNn };

inline const char *FusionKindName(FusionKind k) { return k == FusionKind::kLr ? "lr" : "nn"; }

using FusionModel = std::variant<LrFusion, NnFusion>;

inline double ApplyFusion(const FusionModel &m, std::span<const double> scores) {
  return std::visit([&](const auto &x) { return x.Apply(scores); }, m);
}

struct DurationFusionConfig {
  std::size_t min_per_bin = 50;
  LrTrainConfig lr;
  NnTrainConfig nn;
  std::uint64_t seed = 0;
};

struct DurationCell {
  bool fallback = true;
  std::size_t trials = 0;
  FusionModel model;
};

struct DurationFusion {
  FusionKind kind = FusionKind::kLr;
  DurationGrid grid;
  FusionModel overall;
  std::vector<DurationCell> cells;  // enrolment-major, grid.size()^2

  const DurationCell &Cell(double d_enroll, double d_test) const {
    return cells[AssignBinIndex(d_enroll, grid) * grid.size() + AssignBinIndex(d_test, grid)];
  }

  const FusionModel &ModelFor(double d_enroll, double d_test) const {
    const DurationCell &c = Cell(d_enroll, d_test);
    return c.fallback ? overall : c.model;
  }

  double Apply(std::span<const double> scores, double d_enroll, double d_test) const {
    return ApplyFusion(ModelFor(d_enroll, d_test), scores);
  }

  std::size_t NumTrainedCells() const {
    std::size_t n = 0;
    for (const auto &c : cells) n += !c.fallback;
    return n;
  }
};

inline FusionModel TrainFusionModel(FusionKind kind, const FusionData &data,
                                    const DurationFusionConfig &cfg, std::uint64_t seed) {
  if (kind == FusionKind::kLr) return TrainLrFusion(data, cfg.lr);
  return TrainNnFusion(data, seed, cfg.nn);
}

/// One model per (enrolment bin, test bin); sparse or single-class cells
/// fall back to a model trained on every trial.
inline DurationFusion TrainDurationFusion(std::span<const TrialScore> trials, const DurationGrid &grid,
                                          FusionKind kind, const DurationFusionConfig &cfg = {}) {
  DurationFusion df;
  df.kind = kind;
  df.grid = grid;
  df.overall = TrainFusionModel(kind, MakeFusionData(trials), cfg, cfg.seed);
  const std::size_t n = grid.size();
  std::vector<std::vector<TrialScore>> bins(n * n);
  for (const auto &t : trials)
    if (t.is_target) bins[AssignBinIndex(t.d_enroll, grid) * n + AssignBinIndex(t.d_test, grid)].push_back(t);
  df.cells.resize(n * n);
  for (std::size_t c = 0; c < n * n; ++c) {
    DurationCell &cell = df.cells[c];
    cell.trials = bins[c].size();
    cell.model = df.overall;
    const FusionData data = MakeFusionData(bins[c]);
    if (cell.trials < cfg.min_per_bin || data.NumTargets() == 0 || data.NumNontargets() == 0) continue;
    try {
      cell.model = TrainFusionModel(kind, data, cfg, MixSeed(cfg.seed, c + 1));
      cell.fallback = false;
    } catch (const Error &e) {
      Warn("duration fusion cell (" + FormatDouble(grid[c / n], 6) + ", " +
           FormatDouble(grid[c % n], 6) + ") falls back: " + e.what());
    }
  }
  return df;
}

/// Per-subsystem weights of the LR model for a duration pair, negatives
/// clamped to zero and normalised to sum to one.
inline Vector DurationWeights(const DurationFusion &df, double d_enroll, double d_test) {
  if (df.kind != FusionKind::kLr) throw Error("weights undefined for NN");
  const auto &lr = std::get<LrFusion>(df.ModelFor(d_enroll, d_test));
  Vector w = lr.weights.cwiseMax(0.0);
  const double sum = w.sum();
  if (!(sum > 0.0)) {
    Warn("duration_weights: no positive weights; returning uniform weights");
    return Vector::Constant(w.size(), 1.0 / static_cast<double>(w.size()));
  }
  return w / sum;
}

// ---------------------------------------------------------------------------
// Fusion model file.

namespace detail {
inline void WriteFusionModel(TextWriter &w, const std::string &key, const FusionModel &m) {
  if (const auto *lr = std::get_if<LrFusion>(&m)) {
    w.Vec(key + ".weights", lr->weights);
    w.Scalar(key + ".offset", lr->offset);
  } else {
    w.Vec(key + ".params", std::get<NnFusion>(m).Pack());
  }
}

inline FusionModel ReadFusionModel(TextReader &r, const std::string &key, FusionKind kind,
                                   Eigen::Index inputs) {
  if (kind == FusionKind::kLr) {
    LrFusion lr;
    lr.weights = r.Vec(key + ".weights");
    lr.offset = r.Scalar<double>(key + ".offset");
    return lr;
  }
  return NnFusion::Unpack(r.Vec(key + ".params"), inputs);
}

inline Eigen::Index FusionInputs(const FusionModel &m) {
  if (const auto *lr = std::get_if<LrFusion>(&m)) return lr->weights.size();
  return std::get<NnFusion>(m).NumInputs();
}
}  // namespace detail

inline std::string FormatDurationFusion(const DurationFusion &df) {
  TextWriter w("spkr-fusion", 1);
  w.Scalar("kind", std::string(FusionKindName(df.kind)));
  w.Scalar("inputs", detail::FusionInputs(df.overall));
  w.Vec("grid", Eigen::Map<const Vector>(df.grid.points().data(), static_cast<Eigen::Index>(df.grid.size())));
  detail::WriteFusionModel(w, "overall", df.overall);
  for (std::size_t c = 0; c < df.cells.size(); ++c) {
    const auto &cell = df.cells[c];
    const std::string key = "cell" + std::to_string(c);
    w.Scalar(key + ".fallback", cell.fallback ? 1 : 0);
    w.Scalar(key + ".trials", cell.trials);
    if (!cell.fallback) detail::WriteFusionModel(w, key, cell.model);
  }
  return w.str();
}

inline DurationFusion ParseDurationFusion(TextReader &r) {
  DurationFusion df;
  const auto kind = r.Scalar<std::string>("kind");
  if (kind == "lr") df.kind = FusionKind::kLr;
  else if (kind == "nn") df.kind = FusionKind::kNn;
  else r.Fail("unknown fusion kind '" + kind + "'");
  const auto inputs = r.Scalar<Eigen::Index>("inputs");
  const Vector g = r.Vec("grid");
  df.grid = DurationGrid(std::vector<double>(g.data(), g.data() + g.size()));
  df.overall = detail::ReadFusionModel(r, "overall", df.kind, inputs);
  df.cells.resize(df.grid.size() * df.grid.size());
  for (std::size_t c = 0; c < df.cells.size(); ++c) {
    auto &cell = df.cells[c];
    const std::string key = "cell" + std::to_string(c);
    cell.fallback = r.Scalar<int>(key + ".fallback") != 0;
    cell.trials = r.Scalar<std::size_t>(key + ".trials");
    cell.model = cell.fallback ? df.overall : detail::ReadFusionModel(r, key, df.kind, inputs);
  }
  return df;
}

inline DurationFusion ReadDurationFusion(const std::filesystem::path &path) {
  auto r = TextReader::FromFile(path, "spkr-fusion", 1);
  return ParseDurationFusion(r);
}

}  // namespace spkr

#endif  // SPKR_FUSION_HPP_
