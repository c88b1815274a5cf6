// spkr/embedding.hpp

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

// Total-variability model M = M0 + T w: EM training of T from Baum-Welch
// statistics, i-vector posterior extraction, LDA and length normalisation.

#ifndef SPKR_EMBEDDING_HPP_
#define SPKR_EMBEDDING_HPP_

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "spkr/common.hpp"
#include "spkr/gmm.hpp"
#include "spkr/textio.hpp"

namespace spkr {

/// Short hex digest of a GMM's serialised parameters; binds extractors to
/// the UBM they were trained against.
inline std::string GmmFingerprint(const DiagonalGmm &g) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(HashString(FormatGmm(g))));
  return buf;
}

struct IVectorExtractor {
  Matrix t_matrix;     // (K*D) x R, component-major blocks of D rows
  std::string ubm_ref;

  Eigen::Index Rank() const { return t_matrix.cols(); }
};

struct IVectorPosterior {
  Vector mean;
  Matrix precision;
};

/// Caches the per-component terms T_k' S_k^-1 T_k for repeated extraction.
class IVectorComputer {
 public:
  IVectorComputer(const IVectorExtractor &ex, const DiagonalGmm &ubm)
      : ex_(ex), k_(ubm.NumComponents()), d_(ubm.Dim()) {
    if (ex.t_matrix.rows() != k_ * d_)
      throw Error("ivector extractor has " + std::to_string(ex.t_matrix.rows()) +
                  " rows, UBM supervector has " + std::to_string(k_ * d_));
    if (!ex.ubm_ref.empty() && ex.ubm_ref != GmmFingerprint(ubm))
      throw Error("ivector extractor is bound to a different UBM (" + ex.ubm_ref + ")");
    inv_var_ = ubm.variances.cwiseInverse();
    quad_.resize(static_cast<std::size_t>(k_));
    for (Eigen::Index k = 0; k < k_; ++k) {
      const auto tk = ex.t_matrix.middleRows(k * d_, d_);
      quad_[static_cast<std::size_t>(k)] =
          tk.transpose() * inv_var_.row(k).transpose().asDiagonal() * tk;
    }
  }

  /// Posterior precision L = I + sum_k n_k T_k' S_k^-1 T_k and linear term
  /// b = sum_k T_k' S_k^-1 f_k.
  void PosteriorTerms(const BaumWelchStats &st, Matrix &precision, Vector &linear) const {
    if (st.n.size() != k_ || st.f.rows() != k_ || st.f.cols() != d_)
      throw Error("extract_ivector: statistics do not match the UBM");
    if (!st.n.allFinite() || !st.f.allFinite()) throw Error("extract_ivector: non-finite statistics");
    const Eigen::Index r = ex_.Rank();
    precision = Matrix::Identity(r, r);
    for (Eigen::Index k = 0; k < k_; ++k)
      if (st.n(k) != 0.0) precision.noalias() += st.n(k) * quad_[static_cast<std::size_t>(k)];
    const RowMatrix scaled = st.f.cwiseProduct(inv_var_);
    linear.noalias() = ex_.t_matrix.transpose() *
                       Eigen::Map<const Vector>(scaled.data(), k_ * d_);
  }

  IVectorPosterior Extract(const BaumWelchStats &st) const {
    IVectorPosterior post;
    Vector linear;
    PosteriorTerms(st, post.precision, linear);
    Eigen::LLT<Matrix> llt(post.precision);
    if (llt.info() != Eigen::Success) throw Error("extract_ivector: precision not positive definite");
    post.mean = llt.solve(linear);
    return post;
  }

 private:
  const IVectorExtractor &ex_;
  Eigen::Index k_, d_;
  Matrix inv_var_;
  std::vector<Matrix> quad_;
};

inline IVectorPosterior ExtractIVector(const IVectorExtractor &ex, const DiagonalGmm &ubm,
                                       const BaumWelchStats &stats) {
  return IVectorComputer(ex, ubm).Extract(stats);
}

struct TvTrainConfig {
  double init_scale = 0.1;  // times sqrt(mean UBM variance)
};

struct TvTrainResult {
  IVectorExtractor extractor;
  /// Auxiliary objective sum_u (b'L^-1 b - ln det L) / 2 before each
  /// iteration and after the last (iters + 1 values).  It equals the
  /// statistics' log-likelihood up to a constant independent of T.
  std::vector<double> objective_history;
};

/// Seeded initial T: unit normal entries scaled by init_scale times the root
/// mean UBM variance.
inline IVectorExtractor InitTotalVariability(const DiagonalGmm &ubm, int rank, std::uint64_t seed,
                                             const TvTrainConfig &cfg = {}) {
  IVectorExtractor ex;
  ex.ubm_ref = GmmFingerprint(ubm);
  const Eigen::Index rows = ubm.NumComponents() * ubm.Dim();
  ex.t_matrix.resize(rows, rank);
  const double scale = cfg.init_scale * std::sqrt(ubm.variances.mean());
  Rng rng(seed);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < rank; ++j) ex.t_matrix(i, j) = scale * rng.Normal();
  return ex;
}

inline TvTrainResult TrainTotalVariability(const std::vector<BaumWelchStats> &stats,
                                           const DiagonalGmm &ubm, int rank, int iters,
                                           std::uint64_t seed, const TvTrainConfig &cfg = {}) {
  const Eigen::Index k_count = ubm.NumComponents(), d = ubm.Dim();
  if (rank < 1) throw Error("train_total_variability: rank must be >= 1");
  if (rank > k_count * d)
    throw Error("train_total_variability: rank exceeds supervector dimension");
  if (static_cast<Eigen::Index>(stats.size()) < rank)
    throw Error("train_total_variability: need at least rank (" + std::to_string(rank) +
                ") utterances, got " + std::to_string(stats.size()));

  TvTrainResult res;
  res.extractor = InitTotalVariability(ubm, rank, seed, cfg);
  IVectorExtractor &ex = res.extractor;

  for (int it = 0; it <= iters; ++it) {
    const IVectorComputer comp(ex, ubm);
    std::vector<Matrix> acc_a(static_cast<std::size_t>(k_count), Matrix::Zero(rank, rank));
    Matrix acc_c = Matrix::Zero(k_count * d, rank);
    double objective = 0.0;
    Matrix precision;
    Vector linear;
    for (const auto &st : stats) {
      comp.PosteriorTerms(st, precision, linear);
      Eigen::LLT<Matrix> llt(precision);
      if (llt.info() != Eigen::Success) throw Error("train_total_variability: precision not PD");
      const Vector w = llt.solve(linear);
      objective += 0.5 * (linear.dot(w) - 2.0 * llt.matrixLLT().diagonal().array().log().sum());
      if (it == iters) continue;
      const Matrix second = llt.solve(Matrix::Identity(rank, rank)) + w * w.transpose();
      for (Eigen::Index k = 0; k < k_count; ++k)
        if (st.n(k) != 0.0) acc_a[static_cast<std::size_t>(k)].noalias() += st.n(k) * second;
      const RowMatrix f = st.f;
      acc_c.noalias() += Eigen::Map<const Vector>(f.data(), k_count * d) * w.transpose();
    }
    res.objective_history.push_back(objective);
    if (it == iters) break;
    for (Eigen::Index k = 0; k < k_count; ++k) {
      const Matrix &a = acc_a[static_cast<std::size_t>(k)];
      if (a.trace() <= 0.0) continue;  // component never occupied
      // T_k = C_k A_k^-1, solved as A_k T_k' = C_k'.
      ex.t_matrix.middleRows(k * d, d) =
          a.ldlt().solve(acc_c.middleRows(k * d, d).transpose()).transpose();
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// LDA and length normalisation.

struct LdaTransform {
  Vector mean;        // subtracted before projection
  Matrix projection;  // R x r
  Vector eigenvalues; // r, decreasing

  Eigen::Index Rank() const { return projection.cols(); }

  Vector Apply(const Eigen::Ref<const Vector> &x) const {
    if (x.size() != mean.size()) throw Error("lda: input dimension mismatch");
    return projection.transpose() * (x - mean);
  }
};

/// Rows of `vectors` are samples.  Solves S_b v = lambda S_w v with S_w
/// ridge-regularised by 1e-6 trace(S_w)/R.
inline LdaTransform TrainLda(const Eigen::Ref<const Matrix> &vectors,
                             const std::vector<std::string> &labels, int rank) {
  const Eigen::Index n = vectors.rows(), dim = vectors.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw Error("train_lda: label count mismatch");
  std::map<std::string, std::vector<Eigen::Index>> classes;
  for (Eigen::Index i = 0; i < n; ++i) classes[labels[static_cast<std::size_t>(i)]].push_back(i);
  const auto n_classes = static_cast<Eigen::Index>(classes.size());
  if (n_classes < 2) throw Error("train_lda: need at least 2 classes");
  if (rank < 1 || rank > std::min(dim, n_classes - 1))
    throw Error("train_lda: rank " + std::to_string(rank) + " exceeds min(dim, classes - 1) = " +
                std::to_string(std::min(dim, n_classes - 1)));

  LdaTransform lda;
  lda.mean = vectors.colwise().mean().transpose();
  Matrix sb = Matrix::Zero(dim, dim), sw = Matrix::Zero(dim, dim);
  for (const auto &[label, idx] : classes) {
    Vector mu = Vector::Zero(dim);
    for (auto i : idx) mu += vectors.row(i).transpose();
    mu /= static_cast<double>(idx.size());
    const Vector dm = mu - lda.mean;
    sb.noalias() += static_cast<double>(idx.size()) * dm * dm.transpose();
    for (auto i : idx) {
      const Vector r = vectors.row(i).transpose() - mu;
      sw.noalias() += r * r.transpose();
    }
  }
  sw += (1e-6 * sw.trace() / dim + std::numeric_limits<double>::min()) * Matrix::Identity(dim, dim);
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(sb, sw);
  if (es.info() != Eigen::Success) throw Error("train_lda: eigen decomposition failed");
  // Eigen returns ascending order.
  lda.projection.resize(dim, rank);
  lda.eigenvalues.resize(rank);
  for (int j = 0; j < rank; ++j) {
    lda.projection.col(j) = es.eigenvectors().col(dim - 1 - j);
    lda.eigenvalues(j) = es.eigenvalues()(dim - 1 - j);
  }
  return lda;
}

inline Vector LengthNormalize(const Eigen::Ref<const Vector> &v) {
  const double norm = v.norm();
  if (!(norm > 0.0)) throw Error("length_normalize: zero vector");
  return v / norm;
}

// ---------------------------------------------------------------------------
// Model files.

inline std::string FormatExtractor(const IVectorExtractor &ex) {
  TextWriter w("spkr-ivector-extractor", 1);
  w.Scalar("ubm_ref", ex.ubm_ref);
  w.Scalar("rank", ex.Rank());
  w.Mat("t_matrix", ex.t_matrix);
  return w.str();
}

inline IVectorExtractor ReadExtractor(const std::filesystem::path &path) {
  auto r = TextReader::FromFile(path, "spkr-ivector-extractor", 1);
  IVectorExtractor ex;
  ex.ubm_ref = r.Scalar<std::string>("ubm_ref");
  const auto rank = r.Scalar<Eigen::Index>("rank");
  ex.t_matrix = r.Mat("t_matrix");
  if (ex.t_matrix.cols() != rank || rank < 1) r.Fail("rank mismatch");
  if (!ex.t_matrix.allFinite()) r.Fail("non-finite T matrix");
  return ex;
}

inline std::string FormatLda(const LdaTransform &lda) {
  TextWriter w("spkr-lda", 1);
  w.Scalar("rank", lda.Rank());
  w.Vec("mean", lda.mean);
  w.Vec("eigenvalues", lda.eigenvalues);
  w.Mat("projection", lda.projection);
  return w.str();
}

inline LdaTransform ReadLda(const std::filesystem::path &path) {
  auto r = TextReader::FromFile(path, "spkr-lda", 1);
  LdaTransform lda;
  const auto rank = r.Scalar<Eigen::Index>("rank");
  lda.mean = r.Vec("mean");
  lda.eigenvalues = r.Vec("eigenvalues");
  lda.projection = r.Mat("projection");
  if (lda.projection.cols() != rank || lda.projection.rows() != lda.mean.size())
    r.Fail("shape mismatch");
  return lda;
}

}  // namespace spkr

#endif  // SPKR_EMBEDDING_HPP_
