// spkr/frontend.hpp

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

// MFCC front-end: static cepstra plus log-energy, bi-Gaussian energy VAD,
// short-time feature warping and regression deltas.  With the default
// configuration a frame is 19 warped MFCCs, their deltas and delta-deltas, and
// the delta and delta-delta of log-energy: 59 dimensions.

#ifndef SPKR_FRONTEND_HPP_
#define SPKR_FRONTEND_HPP_

#include <complex>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <unsupported/Eigen/FFT>

#include "spkr/common.hpp"
#include "spkr/corpus.hpp"
#include "spkr/textio.hpp"

namespace spkr {

struct VadConfig {
  int min_iters = 20;
  int max_iters = 200;
  double tolerance = 1e-6;  // per-frame log-likelihood change
};

struct FrontendConfig {
  double frame_length_ms = 25.0;
  double frame_shift_ms = 10.0;
  int n_cepstra = 19;
  int n_mel_filters = 26;
  int fft_size = 0;  // 0: next power of two >= frame length
  double preemphasis = 0.97;
  double low_freq = 20.0;
  double high_freq = 0.0;  // 0: Nyquist
  double energy_floor = 1e-10;
  bool include_log_energy_for_vad = true;
  int warp_window = 300;
  int delta_context = 2;
  bool deltas_after_warping = true;
  VadConfig vad;

  void Validate() const {
    if (!(frame_shift_ms > 0.0) || !(frame_length_ms > frame_shift_ms))
      throw ConfigError("frontend: need frame_length > frame_shift > 0");
    if (n_cepstra < 1) throw ConfigError("frontend: n_cepstra must be >= 1");
    if (n_mel_filters <= n_cepstra)
      throw ConfigError("frontend: n_mel_filters must exceed n_cepstra");
    if (warp_window < 1) throw ConfigError("frontend: warp_window must be >= 1");
    if (delta_context < 1) throw ConfigError("frontend: delta_context must be >= 1");
  }

  /// Dimension of pipeline output: 3 * n_cepstra + 2.
  int OutputDim() const { return 3 * n_cepstra + 2; }
};

struct FrameGeometry {
  std::size_t length = 0;
  std::size_t shift = 0;
  std::size_t fft_size = 0;
};

inline FrameGeometry GetFrameGeometry(const FrontendConfig &cfg, int sample_rate) {
  FrameGeometry g;
  g.length = static_cast<std::size_t>(std::llround(cfg.frame_length_ms * 1e-3 * sample_rate));
  g.shift = static_cast<std::size_t>(std::llround(cfg.frame_shift_ms * 1e-3 * sample_rate));
  if (g.shift == 0 || g.length <= g.shift)
    throw ConfigError("frontend: frame geometry degenerate at this sample rate");
  if (cfg.fft_size > 0) {
    if (static_cast<std::size_t>(cfg.fft_size) < g.length)
      throw ConfigError("frontend: fft_size smaller than frame length");
    g.fft_size = static_cast<std::size_t>(cfg.fft_size);
  } else {
    g.fft_size = 1;
    while (g.fft_size < g.length) g.fft_size <<= 1;
  }
  return g;
}

inline std::size_t NumFrames(std::size_t num_samples, std::size_t length, std::size_t shift) {
  if (num_samples < length) return 0;
  return (num_samples - length) / shift + 1;
}

inline double HzToMel(double hz) { return 1127.0 * std::log1p(hz / 700.0); }
inline double MelToHz(double mel) { return 700.0 * std::expm1(mel / 1127.0); }

/// Triangular filters equally spaced on the mel scale over FFT power bins.
class MelFilterbank {
 public:
  MelFilterbank(int n_filters, std::size_t fft_size, int sample_rate, double low_hz,
                double high_hz) {
    if (high_hz <= 0.0) high_hz = 0.5 * sample_rate;
    if (!(high_hz > low_hz)) throw ConfigError("mel filterbank: high_freq must exceed low_freq");
    const std::size_t n_bins = fft_size / 2 + 1;
    const double mlo = HzToMel(low_hz), mhi = HzToMel(high_hz);
    const double step = (mhi - mlo) / (n_filters + 1);
    weights_ = Matrix::Zero(n_filters, static_cast<Eigen::Index>(n_bins));
    centers_.resize(n_filters);
    for (int m = 0; m < n_filters; ++m) {
      const double left = mlo + m * step, centre = left + step, right = centre + step;
      centers_[m] = MelToHz(centre);
      for (std::size_t k = 0; k < n_bins; ++k) {
        const double mel = HzToMel(static_cast<double>(k) * sample_rate / fft_size);
        double w = 0.0;
        if (mel > left && mel <= centre) w = (mel - left) / (centre - left);
        else if (mel > centre && mel < right) w = (right - mel) / (right - centre);
        weights_(m, static_cast<Eigen::Index>(k)) = w;
      }
    }
  }

  const Matrix &weights() const { return weights_; }
  const std::vector<double> &CenterFrequencies() const { return centers_; }
  int size() const { return static_cast<int>(centers_.size()); }

 private:
  Matrix weights_;
  std::vector<double> centers_;
};

namespace detail {

struct Analysis {
  RowMatrix mel_energies;  // T x n_mel, linear power
  Vector log_energy;       // T
};

inline Analysis AnalyseFrames(const AudioSignal &signal, const FrontendConfig &cfg,
                              bool want_mel = true) {
  cfg.Validate();
  const FrameGeometry g = GetFrameGeometry(cfg, signal.sample_rate);
  const std::size_t n_frames = NumFrames(signal.samples.size(), g.length, g.shift);
  if (n_frames == 0) throw Error(signal.source_id + ": too short");

  Analysis a;
  a.log_energy.resize(static_cast<Eigen::Index>(n_frames));
  if (want_mel) a.mel_energies.resize(static_cast<Eigen::Index>(n_frames), cfg.n_mel_filters);

  std::vector<double> window(g.length);
  for (std::size_t i = 0; i < g.length; ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (g.length - 1));

  std::optional<MelFilterbank> fbank;
  if (want_mel)
    fbank.emplace(cfg.n_mel_filters, g.fft_size, signal.sample_rate, cfg.low_freq, cfg.high_freq);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> buf(g.fft_size);
  std::vector<std::complex<double>> spec;
  Vector power(static_cast<Eigen::Index>(g.fft_size / 2 + 1));

  for (std::size_t f = 0; f < n_frames; ++f) {
    const double *x = signal.samples.data() + f * g.shift;
    double e = 0.0;
    for (std::size_t i = 0; i < g.length; ++i) e += x[i] * x[i];
    a.log_energy(static_cast<Eigen::Index>(f)) = std::log(e + cfg.energy_floor);
    if (!want_mel) continue;

    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = g.length; i-- > 1;) buf[i] = x[i] - cfg.preemphasis * x[i - 1];
    buf[0] = x[0] - cfg.preemphasis * x[0];
    for (std::size_t i = 0; i < g.length; ++i) buf[i] *= window[i];
    fft.fwd(spec, buf);
    for (Eigen::Index k = 0; k < power.size(); ++k) power(k) = std::norm(spec[static_cast<std::size_t>(k)]);
    a.mel_energies.row(static_cast<Eigen::Index>(f)) = (fbank->weights() * power).transpose();
  }
  return a;
}

}  // namespace detail

/// Linear-power mel filterbank outputs, one row per frame.
inline RowMatrix ComputeMelEnergies(const AudioSignal &signal, const FrontendConfig &cfg) {
  return detail::AnalyseFrames(signal, cfg).mel_energies;
}

/// Per-frame log-energy ln(sum x^2 + floor) of the raw frame.
inline Vector ComputeLogEnergy(const AudioSignal &signal, const FrontendConfig &cfg) {
  return detail::AnalyseFrames(signal, cfg, false).log_energy;
}

/// T x (n_cepstra + 1): MFCC 1..n_cepstra of the orthonormal DCT-II of the log
/// mel energies, then the frame log-energy in the last column.
inline RowMatrix ComputeStatic(const AudioSignal &signal, const FrontendConfig &cfg) {
  const detail::Analysis a = detail::AnalyseFrames(signal, cfg);
  const int m = cfg.n_mel_filters;
  Matrix dct(m, cfg.n_cepstra);
  for (int j = 0; j < m; ++j)
    for (int i = 1; i <= cfg.n_cepstra; ++i)
      dct(j, i - 1) = std::sqrt(2.0 / m) * std::cos(std::numbers::pi * i * (j + 0.5) / m);
  const RowMatrix logmel = a.mel_energies.array().max(cfg.energy_floor).log().matrix();
  RowMatrix out(logmel.rows(), cfg.n_cepstra + 1);
  out.leftCols(cfg.n_cepstra) = logmel * dct;
  out.col(cfg.n_cepstra) = a.log_energy;
  return out;
}

/// Bi-Gaussian VAD: a two-component 1-D GMM fitted by EM on frame
/// log-energies; a frame is speech when the higher-mean component's posterior
/// exceeds 0.5.  Constant input yields no speech.
inline std::vector<std::uint8_t> DetectSpeech(std::span<const double> log_energy,
                                              const VadConfig &cfg = {}) {
  const std::size_t n = log_energy.size();
  std::vector<std::uint8_t> mask(n, 0);
  if (n < 2) return mask;
  const auto [lo_it, hi_it] = std::minmax_element(log_energy.begin(), log_energy.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return mask;

  double mean = 0.0;
  for (double e : log_energy) mean += e;
  mean /= n;
  double var = 0.0;
  for (double e : log_energy) var += (e - mean) * (e - mean);
  var /= n;
  const double floor = 1e-6 * var;

  std::array<double, 2> w{0.5, 0.5}, mu{lo, hi}, v{var, var};
  std::vector<double> post_hi(n);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.max_iters; ++it) {
    std::array<double, 3> acc_lo{}, acc_hi{};  // n, sum x, sum x^2
    double ll = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double x = log_energy[t];
      double lp[2];
      for (int k = 0; k < 2; ++k)
        lp[k] = std::log(w[k]) - 0.5 * (kLog2Pi + std::log(v[k]) + (x - mu[k]) * (x - mu[k]) / v[k]);
      const double lse = LogSumExp(lp, 2);
      ll += lse;
      const double g = std::exp(lp[1] - lse);
      post_hi[t] = g;
      acc_hi[0] += g; acc_hi[1] += g * x; acc_hi[2] += g * x * x;
      acc_lo[0] += 1 - g; acc_lo[1] += (1 - g) * x; acc_lo[2] += (1 - g) * x * x;
    }
    ll /= n;
    const bool converged = std::abs(ll - prev_ll) < cfg.tolerance;
    if (it + 1 >= cfg.min_iters && converged) break;
    prev_ll = ll;
    const std::array<const std::array<double, 3> *, 2> acc{&acc_lo, &acc_hi};
    for (int k = 0; k < 2; ++k) {
      const double nk = (*acc[k])[0];
      if (nk < 1e-10) continue;
      w[k] = nk / n;
      mu[k] = (*acc[k])[1] / nk;
      v[k] = std::max((*acc[k])[2] / nk - mu[k] * mu[k], floor);
    }
  }
  // Components can swap order during EM; label by the final means.
  const bool hi_is_speech = mu[1] >= mu[0];
  for (std::size_t t = 0; t < n; ++t) {
    const double p = hi_is_speech ? post_hi[t] : 1.0 - post_hi[t];
    mask[t] = p > 0.5 ? 1 : 0;
  }
  return mask;
}

/// Short-time feature warping.  Each value is replaced by the standard normal
/// quantile of its rank within a window of `window` frames centred on it; the
/// window is clipped (shrinks) at the sequence edges, and a sequence no longer
/// than the window is warped as one block.  Equal values rank by frame order.
inline RowMatrix ApplyFeatureWarping(const RowMatrix &features, int window) {
  if (window < 1) throw Error("feature warping: window must be >= 1");
  const Eigen::Index n = features.rows();
  RowMatrix out(n, features.cols());
  if (n == 0) return out;
  const boost::math::normal standard;
  std::map<Eigen::Index, std::vector<double>> tables;
  auto table = [&](Eigen::Index w) -> const std::vector<double> & {
    auto it = tables.find(w);
    if (it != tables.end()) return it->second;
    std::vector<double> q(static_cast<std::size_t>(w));
    for (Eigen::Index r = 1; r <= w; ++r)
      q[static_cast<std::size_t>(r - 1)] = boost::math::quantile(standard, (r - 0.5) / w);
    return tables.emplace(w, std::move(q)).first->second;
  };
  const Eigen::Index before = (window - 1) / 2, after = window / 2;
  const bool whole = n <= window;
  std::vector<double> col(static_cast<std::size_t>(n));
  for (Eigen::Index d = 0; d < features.cols(); ++d) {
    for (Eigen::Index t = 0; t < n; ++t) col[static_cast<std::size_t>(t)] = features(t, d);
    for (Eigen::Index t = 0; t < n; ++t) {
      const Eigen::Index lo = whole ? 0 : std::max<Eigen::Index>(0, t - before);
      const Eigen::Index hi = whole ? n - 1 : std::min(n - 1, t + after);
      const double x = col[static_cast<std::size_t>(t)];
      Eigen::Index rank = 1;
      for (Eigen::Index j = lo; j < t; ++j) rank += col[static_cast<std::size_t>(j)] <= x;
      for (Eigen::Index j = t + 1; j <= hi; ++j) rank += col[static_cast<std::size_t>(j)] < x;
      out(t, d) = table(hi - lo + 1)[static_cast<std::size_t>(rank - 1)];
    }
  }
  return out;
}

/// Regression deltas over +-context frames, edges replicated.
inline RowMatrix ComputeDeltas(const RowMatrix &x, int context) {
  const Eigen::Index n = x.rows();
  RowMatrix out = RowMatrix::Zero(n, x.cols());
  double denom = 0.0;
  for (int k = 1; k <= context; ++k) denom += 2.0 * k * k;
  for (Eigen::Index t = 0; t < n; ++t) {
    for (int k = 1; k <= context; ++k) {
      const Eigen::Index next = std::min(n - 1, t + k), prev = std::max<Eigen::Index>(0, t - k);
      out.row(t) += k * (x.row(next) - x.row(prev));
    }
  }
  return out / denom;
}

struct FeatureMatrix {
  RowMatrix frames;                       // speech frames only, T x D
  std::vector<std::uint8_t> speech_mask;  // one flag per analysed frame
  double speech_seconds = 0.0;
  bool warp_window_shrunk = false;        // fewer speech frames than the warp window

  Eigen::Index dim() const { return frames.cols(); }
  Eigen::Index num_frames() const { return frames.rows(); }
};

/// Energy-VAD mask over the framing of `cfg`, usable by BuildSessions.
inline SpeechMaskFn MakeSpeechMaskFn(const FrontendConfig &cfg) {
  return [cfg](const AudioSignal &sig) {
    const FrameGeometry g = GetFrameGeometry(cfg, sig.sample_rate);
    SpeechMask m;
    m.frame_length = g.length;
    m.frame_shift = g.shift;
    const Vector le = ComputeLogEnergy(sig, cfg);
    if (cfg.include_log_energy_for_vad)
      m.speech = DetectSpeech(std::span<const double>(le.data(), static_cast<std::size_t>(le.size())),
                              cfg.vad);
    else
      m.speech.assign(static_cast<std::size_t>(le.size()), 1);
    return m;
  };
}

/// Static features, VAD (or the supplied mask), speech-frame selection,
/// warping of the cepstra, then deltas.
inline FeatureMatrix FrontendPipeline(const AudioSignal &signal, const FrontendConfig &cfg,
                                      const SpeechMask *mask = nullptr) {
  const RowMatrix statics = ComputeStatic(signal, cfg);
  const int nc = cfg.n_cepstra;
  const Eigen::Index n = statics.rows();

  FeatureMatrix fm;
  if (mask) {
    const FrameGeometry g = GetFrameGeometry(cfg, signal.sample_rate);
    if (mask->frame_length != g.length || mask->frame_shift != g.shift)
      throw Error(signal.source_id + ": speech mask framing does not match front-end");
    if (mask->speech.size() != static_cast<std::size_t>(n))
      throw Error(signal.source_id + ": speech mask has " + std::to_string(mask->speech.size()) +
                  " frames, expected " + std::to_string(n));
    fm.speech_mask = mask->speech;
  } else if (cfg.include_log_energy_for_vad) {
    const Vector le = statics.col(nc);
    fm.speech_mask = DetectSpeech(std::span<const double>(le.data(), static_cast<std::size_t>(n)), cfg.vad);
  } else {
    fm.speech_mask.assign(static_cast<std::size_t>(n), 1);
  }

  std::vector<Eigen::Index> keep;
  for (Eigen::Index t = 0; t < n; ++t)
    if (fm.speech_mask[static_cast<std::size_t>(t)]) keep.push_back(t);
  if (keep.empty()) throw Error(signal.source_id + ": no speech detected");

  const auto s = static_cast<Eigen::Index>(keep.size());
  RowMatrix cep(s, nc), energy(s, 1);
  for (Eigen::Index i = 0; i < s; ++i) {
    cep.row(i) = statics.row(keep[static_cast<std::size_t>(i)]).head(nc);
    energy(i, 0) = statics(keep[static_cast<std::size_t>(i)], nc);
  }
  const RowMatrix warped = ApplyFeatureWarping(cep, cfg.warp_window);
  const RowMatrix &delta_src = cfg.deltas_after_warping ? warped : cep;
  const RowMatrix d1 = ComputeDeltas(delta_src, cfg.delta_context);
  const RowMatrix d2 = ComputeDeltas(d1, cfg.delta_context);
  const RowMatrix e1 = ComputeDeltas(energy, cfg.delta_context);
  const RowMatrix e2 = ComputeDeltas(e1, cfg.delta_context);

  fm.frames.resize(s, cfg.OutputDim());
  fm.frames << warped, d1, d2, e1, e2;
  fm.speech_seconds = static_cast<double>(s) * cfg.frame_shift_ms * 1e-3;
  fm.warp_window_shrunk = s < cfg.warp_window;
  return fm;
}

// ---------------------------------------------------------------------------
// Feature archive: 16-byte header ("SPKRFEAT", u32 version, u32 mask length),
// u32 T, u32 D, T*D f64 row-major, then one byte per mask frame; all
// little-endian.  A UTF-8 sidecar "<path>.info" carries speech_seconds.

namespace detail {
inline void PutF64(std::string &s, double x) {
  std::uint64_t b;
  std::memcpy(&b, &x, 8);
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((b >> (8 * i)) & 0xff));
}
inline double GetF64(const unsigned char *p) {
  std::uint64_t b = 0;
  for (int i = 0; i < 8; ++i) b |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double x;
  std::memcpy(&x, &b, 8);
  return x;
}
}  // namespace detail

inline constexpr std::uint32_t kFeatureArchiveVersion = 1;

inline std::string EncodeFeatures(const FeatureMatrix &fm) {
  std::string s = "SPKRFEAT";
  detail::PutLe32(s, kFeatureArchiveVersion);
  detail::PutLe32(s, static_cast<std::uint32_t>(fm.speech_mask.size()));
  detail::PutLe32(s, static_cast<std::uint32_t>(fm.frames.rows()));
  detail::PutLe32(s, static_cast<std::uint32_t>(fm.frames.cols()));
  for (Eigen::Index r = 0; r < fm.frames.rows(); ++r)
    for (Eigen::Index c = 0; c < fm.frames.cols(); ++c) detail::PutF64(s, fm.frames(r, c));
  for (auto m : fm.speech_mask) s.push_back(static_cast<char>(m ? 1 : 0));
  return s;
}

inline void WriteFeatures(const std::filesystem::path &path, const FeatureMatrix &fm) {
  WriteStringToFile(path, EncodeFeatures(fm));
  WriteStringToFile(path.string() + ".info",
                    "speech_seconds " + FormatDouble(fm.speech_seconds) + "\nwarp_window_shrunk " +
                        (fm.warp_window_shrunk ? "1" : "0") + "\n");
}

inline FeatureMatrix ReadFeatures(const std::filesystem::path &path) {
  const std::string bytes = ReadFileToString(path);
  const auto *p = reinterpret_cast<const unsigned char *>(bytes.data());
  auto fail = [&](const std::string &m) { throw Error(path.string() + ": " + m); };
  if (bytes.size() < 24 || bytes.compare(0, 8, "SPKRFEAT") != 0) fail("bad feature archive magic");
  if (detail::ReadLe32(p + 8) != kFeatureArchiveVersion) fail("unsupported archive version");
  const std::size_t mask_len = detail::ReadLe32(p + 12);
  const std::size_t rows = detail::ReadLe32(p + 16), cols = detail::ReadLe32(p + 20);
  if (bytes.size() != 24 + rows * cols * 8 + mask_len) fail("truncated feature archive");
  FeatureMatrix fm;
  fm.frames.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const unsigned char *q = p + 24;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c, q += 8)
      fm.frames(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = detail::GetF64(q);
  fm.speech_mask.assign(q, q + mask_len);

  std::istringstream info(ReadFileToString(path.string() + ".info"));
  std::string key;
  while (info >> key) {
    if (key == "speech_seconds") info >> fm.speech_seconds;
    else if (key == "warp_window_shrunk") { int v = 0; info >> v; fm.warp_window_shrunk = v != 0; }
  }
  return fm;
}

}  // namespace spkr

#endif  // SPKR_FRONTEND_HPP_
