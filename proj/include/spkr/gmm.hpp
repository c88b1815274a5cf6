// spkr/gmm.hpp

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

// Diagonal-covariance GMMs: UBM training by EM with binary splitting, MAP
// mean adaptation, frame-normalised log-likelihood-ratio scoring with a UBM
// Gaussian shortlist, and Baum-Welch statistics.

#ifndef SPKR_GMM_HPP_
#define SPKR_GMM_HPP_

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <vector>

#include "spkr/common.hpp"
#include "spkr/textio.hpp"

namespace spkr {

struct DiagonalGmm {
  Vector weights;    // K
  Matrix means;      // K x D
  Matrix variances;  // K x D

  Eigen::Index NumComponents() const { return weights.size(); }
  Eigen::Index Dim() const { return means.cols(); }

  void Validate() const {
    const auto k = weights.size();
    if (k < 1) throw Error("gmm: no components");
    if (means.rows() != k || variances.rows() != k || variances.cols() != means.cols())
      throw Error("gmm: inconsistent parameter shapes");
    if (!weights.allFinite() || !means.allFinite() || !variances.allFinite())
      throw Error("gmm: non-finite parameters");
    if ((variances.array() <= 0.0).any()) throw Error("gmm: non-positive variance");
    if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-10)
      throw Error("gmm: weights must be non-negative and sum to 1");
  }

  bool SameStructure(const DiagonalGmm &o) const {
    return NumComponents() == o.NumComponents() && Dim() == o.Dim();
  }
};

/// Per-component log N(x; m_k, v_k) + log w_k in the expanded quadratic form
/// const_k + sum_d x_d (lin_kd + x_d quad_kd).
class GmmEvaluator {
 public:
  explicit GmmEvaluator(const DiagonalGmm &gmm) {
    gmm.Validate();
    const RowMatrix inv = gmm.variances.cwiseInverse();
    linear_ = gmm.means.cwiseProduct(inv);
    quad_ = -0.5 * inv;
    constant_.resize(gmm.NumComponents());
    for (Eigen::Index k = 0; k < gmm.NumComponents(); ++k) {
      constant_(k) = std::log(gmm.weights(k)) -
                     0.5 * (gmm.Dim() * kLog2Pi + gmm.variances.row(k).array().log().sum() +
                            gmm.means.row(k).cwiseProduct(linear_.row(k)).sum());
    }
  }

  Eigen::Index NumComponents() const { return constant_.size(); }
  Eigen::Index Dim() const { return linear_.cols(); }

  /// T x K matrix of weighted component log-densities.
  Matrix ComponentLogLikes(const Eigen::Ref<const RowMatrix> &x) const {
    Matrix out = x * linear_.transpose() + x.cwiseAbs2() * quad_.transpose();
    out.rowwise() += constant_.transpose();
    return out;
  }

  double ComponentLogLike(const double *x, Eigen::Index k) const {
    double s = constant_(k);
    const double *lin = linear_.row(k).data();
    const double *q = quad_.row(k).data();
    const Eigen::Index d = Dim();
    for (Eigen::Index i = 0; i < d; ++i) s += x[i] * (lin[i] + x[i] * q[i]);
    return s;
  }

 private:
  RowMatrix linear_, quad_;
  Vector constant_;
};

struct GmmLogLikelihood {
  double mean = 0.0;  // average over frames
  Vector per_frame;
};

inline void CheckDims(const DiagonalGmm &gmm, const Eigen::Ref<const RowMatrix> &x) {
  if (x.cols() != gmm.Dim())
    throw Error("feature dimension " + std::to_string(x.cols()) + " does not match model dimension " +
                std::to_string(gmm.Dim()));
}

inline GmmLogLikelihood GmmLogLikelihoodOf(const DiagonalGmm &gmm,
                                           const Eigen::Ref<const RowMatrix> &x) {
  CheckDims(gmm, x);
  const GmmEvaluator ev(gmm);
  const Matrix ll = ev.ComponentLogLikes(x);
  GmmLogLikelihood out;
  out.per_frame.resize(x.rows());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const Eigen::RowVectorXd row = ll.row(t);
    out.per_frame(t) = LogSumExp(row.data(), static_cast<std::size_t>(row.size()));
  }
  out.mean = x.rows() > 0 ? out.per_frame.mean() : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Sufficient statistics.

struct BaumWelchStats {
  Vector n;  // K zeroth-order counts
  Matrix f;  // K x D first-order sums centred on the UBM means
  long frames = 0;
};

namespace detail {

struct RawStats {
  Vector n;
  Matrix f;   // sum gamma x
  Matrix s;   // sum gamma x^2
  double loglike = 0.0;
};

/// Posterior-weighted raw moments, processed in blocks to bound memory.
inline RawStats AccumulateRaw(const DiagonalGmm &gmm, const Eigen::Ref<const RowMatrix> &x,
                              bool second_order) {
  const GmmEvaluator ev(gmm);
  const Eigen::Index k = gmm.NumComponents(), d = gmm.Dim();
  RawStats st{Vector::Zero(k), Matrix::Zero(k, d), second_order ? Matrix::Zero(k, d) : Matrix(), 0.0};
  constexpr Eigen::Index kBlock = 4096;
  for (Eigen::Index b = 0; b < x.rows(); b += kBlock) {
    const Eigen::Index len = std::min(kBlock, x.rows() - b);
    const auto xb = x.middleRows(b, len);
    Matrix post = ev.ComponentLogLikes(xb);  // len x K
    for (Eigen::Index t = 0; t < len; ++t) {
      const double mx = post.row(t).maxCoeff();
      double sum = 0.0;
      for (Eigen::Index j = 0; j < k; ++j) sum += std::exp(post(t, j) - mx);
      const double lse = mx + std::log(sum);
      st.loglike += lse;
      for (Eigen::Index j = 0; j < k; ++j) post(t, j) = std::exp(post(t, j) - lse);
    }
    st.n += post.colwise().sum().transpose();
    st.f.noalias() += post.transpose() * xb;
    if (second_order) st.s.noalias() += post.transpose() * xb.cwiseAbs2();
  }
  return st;
}

}  // namespace detail

inline BaumWelchStats AccumulateBwStats(const DiagonalGmm &ubm, const Eigen::Ref<const RowMatrix> &x) {
  CheckDims(ubm, x);
  const detail::RawStats raw = detail::AccumulateRaw(ubm, x, false);
  BaumWelchStats st;
  st.n = raw.n;
  st.f = raw.f - raw.n.asDiagonal() * ubm.means;
  st.frames = static_cast<long>(x.rows());
  return st;
}

// ---------------------------------------------------------------------------
// EM training.

struct GmmTrainConfig {
  int split_iters = 3;           // EM passes after each binary split
  double variance_floor = 1e-4;  // fraction of the global variance
  double split_perturbation = 0.2;
  long max_frames = 0;           // 0: use every frame; else seeded subsample
};

struct GmmTrainResult {
  DiagonalGmm gmm;
  /// Average per-frame log-likelihood entering each of the final EM
  /// iterations, then after the last one (iters + 1 values).
  std::vector<double> loglike_history;
};

namespace detail {

/// One EM step in place; returns the log-likelihood of the incoming model.
inline double EmStep(DiagonalGmm &gmm, const Eigen::Ref<const RowMatrix> &x, const Vector &floor) {
  const RawStats st = AccumulateRaw(gmm, x, true);
  const double total = static_cast<double>(x.rows());
  for (Eigen::Index k = 0; k < gmm.NumComponents(); ++k) {
    const double nk = st.n(k);
    gmm.weights(k) = nk / total;
    if (nk < 1e-10) continue;  // dead component keeps its parameters
    const Eigen::RowVectorXd mean = st.f.row(k) / nk;
    gmm.means.row(k) = mean;
    gmm.variances.row(k) = (st.s.row(k) / nk - mean.cwiseAbs2()).cwiseMax(floor.transpose());
  }
  gmm.weights /= gmm.weights.sum();
  return st.loglike / total;
}

inline void SplitComponents(DiagonalGmm &gmm, Eigen::Index target, double perturbation) {
  const Eigen::Index k = gmm.NumComponents();
  const Eigen::Index n_split = std::min(k, target - k);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return gmm.weights(a) > gmm.weights(b); });
  DiagonalGmm out;
  out.weights.resize(k + n_split);
  out.means.resize(k + n_split, gmm.Dim());
  out.variances.resize(k + n_split, gmm.Dim());
  out.weights.head(k) = gmm.weights;
  out.means.topRows(k) = gmm.means;
  out.variances.topRows(k) = gmm.variances;
  for (Eigen::Index i = 0; i < n_split; ++i) {
    const Eigen::Index src = order[static_cast<std::size_t>(i)], dst = k + i;
    Eigen::Index dim;
    gmm.variances.row(src).maxCoeff(&dim);
    const double delta = perturbation * std::sqrt(gmm.variances(src, dim));
    out.means.row(dst) = gmm.means.row(src);
    out.variances.row(dst) = gmm.variances.row(src);
    out.means(src, dim) -= delta;
    out.means(dst, dim) += delta;
    out.weights(src) *= 0.5;
    out.weights(dst) = out.weights(src);
  }
  gmm = std::move(out);
}

}  // namespace detail

/// Trains a K-component diagonal GMM: global Gaussian, binary splitting with
/// `split_iters` EM passes per split, then `iters` recorded EM iterations.
inline GmmTrainResult TrainGmmEm(const Eigen::Ref<const RowMatrix> &features, int num_components,
                                 int iters, std::uint64_t seed, const GmmTrainConfig &cfg = {}) {
  if (num_components < 1) throw Error("train_gmm_em: K must be >= 1");
  if (features.rows() < 10L * num_components)
    throw Error("train_gmm_em: " + std::to_string(features.rows()) + " frames is fewer than 10*K");
  if (!features.allFinite()) throw Error("train_gmm_em: non-finite features");

  RowMatrix subsample;
  const bool subsampled = cfg.max_frames > 0 && features.rows() > cfg.max_frames;
  if (subsampled) {
    // Seeded selection without replacement, kept in frame order.
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(features.rows()));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (Eigen::Index i = 0; i < cfg.max_frames; ++i) {
      const auto j = i + static_cast<Eigen::Index>(rng.Below(static_cast<std::uint64_t>(features.rows() - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(cfg.max_frames));
    std::sort(idx.begin(), idx.end());
    subsample.resize(cfg.max_frames, features.cols());
    for (Eigen::Index i = 0; i < cfg.max_frames; ++i) subsample.row(i) = features.row(idx[static_cast<std::size_t>(i)]);
  }
  const Eigen::Ref<const RowMatrix> x = subsampled ? Eigen::Ref<const RowMatrix>(subsample) : features;

  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::RowVectorXd var = (x.rowwise() - mean).cwiseAbs2().colwise().mean();
  const Vector floor = (cfg.variance_floor * var).transpose();

  GmmTrainResult res;
  DiagonalGmm &g = res.gmm;
  g.weights = Vector::Ones(1);
  g.means = mean;
  g.variances = var.cwiseMax(floor.transpose());
  while (g.NumComponents() < num_components) {
    detail::SplitComponents(g, num_components, cfg.split_perturbation);
    for (int i = 0; i < cfg.split_iters; ++i) detail::EmStep(g, x, floor);
  }
  for (int i = 0; i < iters; ++i) res.loglike_history.push_back(detail::EmStep(g, x, floor));
  res.loglike_history.push_back(GmmLogLikelihoodOf(g, x).mean);
  return res;
}

// ---------------------------------------------------------------------------
// MAP adaptation and scoring.

/// Mean-only MAP adaptation with relevance factor r.
inline DiagonalGmm MapAdaptMeans(const DiagonalGmm &ubm, const Eigen::Ref<const RowMatrix> &x,
                                 double relevance) {
  if (!(relevance > 0.0)) throw Error("map_adapt_means: relevance must be positive");
  if (x.rows() == 0) return ubm;
  CheckDims(ubm, x);
  const detail::RawStats st = detail::AccumulateRaw(ubm, x, false);
  DiagonalGmm out = ubm;
  for (Eigen::Index k = 0; k < ubm.NumComponents(); ++k)
    out.means.row(k) = (st.f.row(k) + relevance * ubm.means.row(k)) / (st.n(k) + relevance);
  return out;
}

/// Top-C UBM components per frame, reused for every model scored against the
/// same features.
struct GaussianShortlist {
  Eigen::Index per_frame = 0;
  std::vector<int> index;  // frames x per_frame, row-major
  Vector ubm_loglike;      // per frame, over the shortlist
};

namespace detail {
inline double ShortlistFrameLogLike(const GmmEvaluator &ev, const double *x, const int *idx,
                                    Eigen::Index c, double *scratch) {
  for (Eigen::Index j = 0; j < c; ++j) scratch[j] = ev.ComponentLogLike(x, idx[j]);
  return LogSumExp(scratch, static_cast<std::size_t>(c));
}
}  // namespace detail

inline GaussianShortlist SelectShortlist(const DiagonalGmm &ubm, const Eigen::Ref<const RowMatrix> &x,
                                         int top_c) {
  CheckDims(ubm, x);
  if (top_c < 1) throw Error("shortlist size must be >= 1");
  const GmmEvaluator ev(ubm);
  const Eigen::Index k = ubm.NumComponents();
  GaussianShortlist sl;
  sl.per_frame = std::min<Eigen::Index>(top_c, k);
  sl.index.resize(static_cast<std::size_t>(x.rows() * sl.per_frame));
  sl.ubm_loglike.resize(x.rows());
  const Matrix ll = ev.ComponentLogLikes(x);
  std::vector<int> order(static_cast<std::size_t>(k));
  std::vector<double> scratch(static_cast<std::size_t>(k));
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + sl.per_frame, order.end(),
                      [&](int a, int b) { return ll(t, a) > ll(t, b) || (ll(t, a) == ll(t, b) && a < b); });
    std::sort(order.begin(), order.begin() + sl.per_frame);
    int *dst = sl.index.data() + t * sl.per_frame;
    std::copy(order.begin(), order.begin() + sl.per_frame, dst);
    sl.ubm_loglike(t) = detail::ShortlistFrameLogLike(ev, x.row(t).data(), dst, sl.per_frame, scratch.data());
  }
  return sl;
}

/// Mean over frames of log p(x|model) - log p(x|ubm), both evaluated on the
/// UBM shortlist.
inline double ScoreLlr(const GaussianShortlist &sl, const DiagonalGmm &model,
                       const Eigen::Ref<const RowMatrix> &x) {
  CheckDims(model, x);
  if (static_cast<Eigen::Index>(sl.ubm_loglike.size()) != x.rows())
    throw Error("score_llr: shortlist does not match features");
  if (x.rows() == 0) return 0.0;
  const GmmEvaluator ev(model);
  std::vector<double> scratch(static_cast<std::size_t>(sl.per_frame));
  double sum = 0.0;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const int *idx = sl.index.data() + t * sl.per_frame;
    sum += detail::ShortlistFrameLogLike(ev, x.row(t).data(), idx, sl.per_frame, scratch.data()) -
           sl.ubm_loglike(t);
  }
  return sum / static_cast<double>(x.rows());
}

inline double ScoreLlr(const DiagonalGmm &ubm, const DiagonalGmm &model,
                       const Eigen::Ref<const RowMatrix> &x, int top_c = 5) {
  if (!ubm.SameStructure(model)) throw Error("score_llr: model and UBM differ in K or D");
  return ScoreLlr(SelectShortlist(ubm, x, top_c), model, x);
}

// ---------------------------------------------------------------------------
// Model file.

inline std::string FormatGmm(const DiagonalGmm &g) {
  TextWriter w("spkr-diag-gmm", 1);
  w.Scalar("K", g.NumComponents());
  w.Scalar("D", g.Dim());
  w.Vec("weights", g.weights);
  w.Mat("means", g.means);
  w.Mat("variances", g.variances);
  return w.str();
}

inline void WriteGmm(const std::filesystem::path &path, const DiagonalGmm &g) {
  WriteStringToFile(path, FormatGmm(g));
}

inline DiagonalGmm ParseGmm(TextReader &r) {
  DiagonalGmm g;
  const auto k = r.Scalar<Eigen::Index>("K");
  const auto d = r.Scalar<Eigen::Index>("D");
  g.weights = r.Vec("weights");
  g.means = r.Mat("means");
  g.variances = r.Mat("variances");
  if (g.weights.size() != k || g.means.rows() != k || g.means.cols() != d) r.Fail("shape mismatch");
  g.Validate();
  return g;
}

inline DiagonalGmm ReadGmm(const std::filesystem::path &path) {
  auto r = TextReader::FromFile(path, "spkr-diag-gmm", 1);
  return ParseGmm(r);
}

}  // namespace spkr

#endif  // SPKR_GMM_HPP_
