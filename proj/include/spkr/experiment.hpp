// spkr/experiment.hpp

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

// Experiment orchestration.  Each stage reads the artefacts of the previous
// ones from a work directory and writes its own, so stages can be re-run
// individually:
//
//   corpus/<role>/manifest.tsv      synth-corpus (or external manifests)
//   features/<role>/sessions.tsv    frontend, one row per analysed utterance
//   models/ubm.gmm                  train-ubm
//   models/tv.txt                   train-tv
//   models/lda.txt, models/plda.txt train-backend
//   enroll/<role>/*.gmm, ivectors/  enroll
//   scores/<role>_raw.tsv, <role>.tsv (T-normed)            score
//   scores/<role>_input.tsv, models/fusion_*.txt, scores/test_fused.tsv  fuse
//   report.json, report/*.csv       eval
//
// Roles are "train" (UBM, T, LDA, PLDA), "dev" (fusion training) and
// "test" (reported numbers).

#ifndef SPKR_EXPERIMENT_HPP_
#define SPKR_EXPERIMENT_HPP_

#include <array>
#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spkr/common.hpp"
#include "spkr/corpus.hpp"
#include "spkr/embedding.hpp"
#include "spkr/eval.hpp"
#include "spkr/frontend.hpp"
#include "spkr/fusion.hpp"
#include "spkr/gmm.hpp"
#include "spkr/scoring.hpp"

namespace spkr {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline const std::array<std::string, 3> &Roles() {
  static const std::array<std::string, 3> roles{"train", "dev", "test"};
  return roles;
}

struct RoleCorpusConfig {
  int n_speakers = 0;
  int files_per_speaker = 0;
};

/// Additive Gaussian noise on the T-normed scores, with a per-subsystem
/// standard deviation that depends on the test-duration bin.
struct NoiseProfile {
  bool enabled = false;
  std::map<std::string, std::vector<double>> sigma;  // subsystem -> per grid point
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::vector<double> grid = DurationGrid().points();
  double session_seconds = 0.0;  // 0: the largest grid point
  std::size_t max_test_sessions = 50;

  bool synthesize = true;
  SynthConfig synth;
  std::map<std::string, RoleCorpusConfig> roles{
      {"train", {40, 4}}, {"dev", {30, 14}}, {"test", {30, 14}}};
  std::map<std::string, std::string> manifests;  // used when synthesize is false

  FrontendConfig frontend;

  int ubm_components = 1024;
  int ubm_iters = 5;
  GmmTrainConfig ubm;
  double map_relevance = 16.0;
  int top_c = 5;

  int tv_rank = 500;
  int tv_iters = 5;
  TvTrainConfig tv;

  int lda_rank = 150;
  int plda_rank = 75;
  int plda_iters = 10;
  PldaTrainConfig plda;

  DurationFusionConfig fusion;
  NoiseProfile noise;

  double SessionSeconds() const { return session_seconds > 0.0 ? session_seconds : grid.back(); }
};

// ---------------------------------------------------------------------------
// Configuration parsing.

namespace detail {

inline void CheckKeys(const Json &j, const std::string &where, std::initializer_list<const char *> keys) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto &[k, v] : j.items()) {
    bool ok = false;
    for (const char *key : keys) ok = ok || k == key;
    if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <typename T>
void GetOpt(const Json &j, const char *key, T &out, const std::string &where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline const Json &Section(const Json &j, const char *key) {
  static const Json empty = Json::object();
  return j.contains(key) ? j.at(key) : empty;
}

}  // namespace detail

inline ExperimentConfig ParseExperimentConfig(const Json &j) {
  using detail::GetOpt;
  ExperimentConfig c;
  detail::CheckKeys(j, "config", {"seed", "grid", "session_seconds", "max_test_sessions", "corpus",
                                  "frontend", "ubm", "map", "scoring", "tv", "lda", "plda", "fusion",
                                  "noise_profile"});
  GetOpt(j, "seed", c.seed, "config");
  GetOpt(j, "grid", c.grid, "config");
  GetOpt(j, "session_seconds", c.session_seconds, "config");
  GetOpt(j, "max_test_sessions", c.max_test_sessions, "config");
  try {
    DurationGrid check(c.grid);
  } catch (const Error &e) {
    throw ConfigError(std::string("config.grid: ") + e.what());
  }
  if (c.session_seconds < 0.0) throw ConfigError("config.session_seconds must be >= 0");

  const Json &corpus = detail::Section(j, "corpus");
  detail::CheckKeys(corpus, "corpus", {"synthesize", "sample_rate", "speech_median_seconds", "speech_sigma",
                                       "min_speech_seconds", "max_speech_seconds", "noise_level",
                                       "channel_tilt", "roles", "manifests"});
  GetOpt(corpus, "synthesize", c.synthesize, "corpus");
  GetOpt(corpus, "sample_rate", c.synth.sample_rate, "corpus");
  GetOpt(corpus, "speech_median_seconds", c.synth.speech_median_seconds, "corpus");
  GetOpt(corpus, "speech_sigma", c.synth.speech_sigma, "corpus");
  GetOpt(corpus, "min_speech_seconds", c.synth.min_speech_seconds, "corpus");
  GetOpt(corpus, "max_speech_seconds", c.synth.max_speech_seconds, "corpus");
  GetOpt(corpus, "noise_level", c.synth.noise_level, "corpus");
  GetOpt(corpus, "channel_tilt", c.synth.channel_tilt, "corpus");
  const Json &roles = detail::Section(corpus, "roles");
  detail::CheckKeys(roles, "corpus.roles", {"train", "dev", "test"});
  for (const auto &role : Roles()) {
    const Json &r = detail::Section(roles, role.c_str());
    const std::string where = "corpus.roles." + role;
    detail::CheckKeys(r, where, {"n_speakers", "files_per_speaker"});
    GetOpt(r, "n_speakers", c.roles[role].n_speakers, where);
    GetOpt(r, "files_per_speaker", c.roles[role].files_per_speaker, where);
  }
  GetOpt(corpus, "manifests", c.manifests, "corpus");
  if (!c.synthesize)
    for (const auto &role : Roles())
      if (!c.manifests.count(role)) throw ConfigError("corpus.manifests: missing role '" + role + "'");

  const Json &fe = detail::Section(j, "frontend");
  detail::CheckKeys(fe, "frontend", {"frame_length_ms", "frame_shift_ms", "n_cepstra", "n_mel_filters",
                                     "fft_size", "preemphasis", "low_freq", "high_freq", "energy_floor",
                                     "include_log_energy_for_vad", "warp_window", "delta_context",
                                     "deltas_after_warping"});
  auto &f = c.frontend;
  GetOpt(fe, "frame_length_ms", f.frame_length_ms, "frontend");
  GetOpt(fe, "frame_shift_ms", f.frame_shift_ms, "frontend");
  GetOpt(fe, "n_cepstra", f.n_cepstra, "frontend");
  GetOpt(fe, "n_mel_filters", f.n_mel_filters, "frontend");
  GetOpt(fe, "fft_size", f.fft_size, "frontend");
  GetOpt(fe, "preemphasis", f.preemphasis, "frontend");
  GetOpt(fe, "low_freq", f.low_freq, "frontend");
  GetOpt(fe, "high_freq", f.high_freq, "frontend");
  GetOpt(fe, "energy_floor", f.energy_floor, "frontend");
  GetOpt(fe, "include_log_energy_for_vad", f.include_log_energy_for_vad, "frontend");
  GetOpt(fe, "warp_window", f.warp_window, "frontend");
  GetOpt(fe, "delta_context", f.delta_context, "frontend");
  GetOpt(fe, "deltas_after_warping", f.deltas_after_warping, "frontend");
  f.Validate();

  const Json &ubm = detail::Section(j, "ubm");
  detail::CheckKeys(ubm, "ubm", {"components", "iters", "split_iters", "variance_floor", "max_frames"});
  GetOpt(ubm, "components", c.ubm_components, "ubm");
  GetOpt(ubm, "iters", c.ubm_iters, "ubm");
  GetOpt(ubm, "split_iters", c.ubm.split_iters, "ubm");
  GetOpt(ubm, "variance_floor", c.ubm.variance_floor, "ubm");
  GetOpt(ubm, "max_frames", c.ubm.max_frames, "ubm");
  if (c.ubm_components < 1 || c.ubm_iters < 0) throw ConfigError("ubm: components >= 1, iters >= 0");

  const Json &map = detail::Section(j, "map");
  detail::CheckKeys(map, "map", {"relevance"});
  GetOpt(map, "relevance", c.map_relevance, "map");
  if (!(c.map_relevance > 0.0)) throw ConfigError("map.relevance must be positive");
  const Json &sc = detail::Section(j, "scoring");
  detail::CheckKeys(sc, "scoring", {"top_c"});
  GetOpt(sc, "top_c", c.top_c, "scoring");
  if (c.top_c < 1) throw ConfigError("scoring.top_c must be >= 1");

  const Json &tv = detail::Section(j, "tv");
  detail::CheckKeys(tv, "tv", {"rank", "iters", "init_scale"});
  GetOpt(tv, "rank", c.tv_rank, "tv");
  GetOpt(tv, "iters", c.tv_iters, "tv");
  GetOpt(tv, "init_scale", c.tv.init_scale, "tv");
  const Json &lda = detail::Section(j, "lda");
  detail::CheckKeys(lda, "lda", {"rank"});
  GetOpt(lda, "rank", c.lda_rank, "lda");
  const Json &plda = detail::Section(j, "plda");
  detail::CheckKeys(plda, "plda", {"rank", "iters"});
  GetOpt(plda, "rank", c.plda_rank, "plda");
  GetOpt(plda, "iters", c.plda_iters, "plda");
  if (c.tv_rank < 1 || c.lda_rank < 1 || c.plda_rank < 1 || c.lda_rank > c.tv_rank ||
      c.plda_rank > c.lda_rank)
    throw ConfigError("ranks must satisfy 1 <= plda.rank <= lda.rank <= tv.rank");

  const Json &fu = detail::Section(j, "fusion");
  detail::CheckKeys(fu, "fusion", {"target_prior", "min_per_bin", "nn_epochs", "nn_learning_rate"});
  double prior = 0.5;
  GetOpt(fu, "target_prior", prior, "fusion");
  if (!(prior > 0.0 && prior < 1.0)) throw ConfigError("fusion.target_prior must be in (0, 1)");
  c.fusion.lr.target_prior = c.fusion.nn.target_prior = prior;
  GetOpt(fu, "min_per_bin", c.fusion.min_per_bin, "fusion");
  GetOpt(fu, "nn_epochs", c.fusion.nn.epochs, "fusion");
  GetOpt(fu, "nn_learning_rate", c.fusion.nn.learning_rate, "fusion");

  const Json &nz = detail::Section(j, "noise_profile");
  detail::CheckKeys(nz, "noise_profile", {"enabled", "sigma"});
  GetOpt(nz, "enabled", c.noise.enabled, "noise_profile");
  GetOpt(nz, "sigma", c.noise.sigma, "noise_profile");
  for (const auto &[name, s] : c.noise.sigma) {
    if (std::find(DefaultSubsystems().begin(), DefaultSubsystems().end(), name) == DefaultSubsystems().end())
      throw ConfigError("noise_profile.sigma: unknown subsystem '" + name + "'");
    if (s.size() != c.grid.size())
      throw ConfigError("noise_profile.sigma." + name + ": need one value per grid point");
    for (double v : s)
      if (!(v >= 0.0)) throw ConfigError("noise_profile.sigma." + name + ": values must be >= 0");
  }
  return c;
}

inline ExperimentConfig LoadExperimentConfig(const fs::path &path) {
  Json j;
  try {
    j = Json::parse(ReadFileToString(path));
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const Error &e) {
    throw ConfigError(e.what());
  }
  return ParseExperimentConfig(j);
}

// ---------------------------------------------------------------------------
// Work-directory helpers.

namespace detail {

inline std::string RolePrefix(const std::string &role) {
  if (role == "train") return "trn";
  if (role == "dev") return "dev";
  return "tst";
}

inline void MakeDirs(const fs::path &p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error("cannot create " + p.string() + ": " + ec.message());
}

inline void Log(const std::string &msg) { std::cerr << msg << '\n'; }

inline std::string FormatSessionRecords(const std::vector<SessionRecord> &recs) {
  std::ostringstream os;
  os << "speaker_id\tparent_id\tsession_id\tcondition_seconds\tspeech_seconds\tpath\n";
  for (const auto &r : recs)
    os << r.speaker_id << '\t' << r.parent_id << '\t' << r.session_id << '\t'
       << FormatDouble(r.condition_seconds) << '\t' << FormatDouble(r.speech_seconds) << '\t' << r.path
       << '\n';
  return os.str();
}

inline std::vector<SessionRecord> ReadSessionRecords(const fs::path &path) {
  std::istringstream is(ReadFileToString(path));
  std::string line;
  std::getline(is, line);
  std::vector<SessionRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = SplitTabs(line);
    if (f.size() != 6) throw Error(path.string() + ": malformed session record");
    out.push_back({f[0], f[1], f[2], std::strtod(f[3].c_str(), nullptr), std::strtod(f[4].c_str(), nullptr), f[5]});
  }
  return out;
}

/// session_id followed by the vector, one utterance per line.
inline std::string FormatVectors(const std::vector<std::string> &ids, const std::vector<Vector> &vecs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    os << ids[i];
    for (Eigen::Index k = 0; k < vecs[i].size(); ++k) os << ' ' << FormatDouble(vecs[i](k));
    os << '\n';
  }
  return os.str();
}

inline std::map<std::string, Vector> ReadVectors(const fs::path &path) {
  std::istringstream is(ReadFileToString(path));
  std::string line;
  std::map<std::string, Vector> out;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string id;
    if (!(ls >> id)) continue;
    std::vector<double> v;
    double x;
    while (ls >> x) v.push_back(x);
    out[id] = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  return out;
}

inline std::string EnrollModelPath(const std::string &role, const std::string &session_id) {
  return "enroll/" + role + "/" + session_id + ".gmm";
}

}  // namespace detail

inline std::vector<SessionRecord> LoadSessionRecords(const fs::path &work, const std::string &role) {
  return detail::ReadSessionRecords(work / "features" / role / "sessions.tsv");
}

// ---------------------------------------------------------------------------
// Stages.

inline void StageSynthCorpus(const ExperimentConfig &cfg, const fs::path &work) {
  if (!cfg.synthesize) {
    detail::Log("synth-corpus: corpus.synthesize is false; nothing to do");
    return;
  }
  for (const auto &role : Roles()) {
    SynthConfig sc = cfg.synth;
    sc.n_speakers = cfg.roles.at(role).n_speakers;
    sc.sessions_per_speaker = cfg.roles.at(role).files_per_speaker;
    sc.speaker_prefix = detail::RolePrefix(role);
    const auto m = SynthCorpus(sc, MixSeed(cfg.seed, HashString("corpus")), work / "corpus" / role);
    detail::Log("synth-corpus: " + role + ": " + std::to_string(m.size()) + " files");
  }
}

/// Sessions of SessionSeconds() of speech, each sliced to the grid; dev and
/// test speakers keep only the sessions the trial list can use.
inline void StageFrontend(const ExperimentConfig &cfg, const fs::path &work) {
  const DurationGrid grid(cfg.grid);
  const SpeechMaskFn mask_fn = MakeSpeechMaskFn(cfg.frontend);
  for (const auto &role : Roles()) {
    const fs::path manifest = cfg.synthesize ? work / "corpus" / role / "manifest.tsv"
                                             : fs::path(cfg.manifests.at(role));
    const auto entries = ReadManifest(manifest);
    std::vector<std::string> speakers;
    std::map<std::string, std::vector<AudioSignal>> audio;
    for (const auto &e : entries) {
      if (!audio.count(e.speaker_id)) speakers.push_back(e.speaker_id);
      audio[e.speaker_id].push_back(ReadWav(e.path));
    }
    const fs::path dir = work / "features" / role;
    detail::MakeDirs(dir);
    std::vector<SessionRecord> records;
    const std::size_t keep = role == "train" ? std::numeric_limits<std::size_t>::max() : cfg.max_test_sessions + 1;
    for (const auto &spk : speakers) {
      auto sessions = BuildSessions(audio[spk], spk, cfg.SessionSeconds(), mask_fn);
      if (sessions.size() > keep) sessions.resize(keep);
      for (const auto &s : sessions) {
        for (const auto &sub : SliceSubsessions(s, grid, MixSeed(cfg.seed, HashString("slice")))) {
          const FeatureMatrix fm = FrontendPipeline(sub.audio, cfg.frontend, &sub.mask);
          const std::string rel = "features/" + role + "/" + sub.session_id + ".feat";
          WriteFeatures(work / rel, fm);
          records.push_back({spk, s.session_id, sub.session_id, sub.condition_seconds, fm.speech_seconds, rel});
        }
      }
    }
    WriteStringToFile(dir / "sessions.tsv", detail::FormatSessionRecords(records));
    detail::Log("frontend: " + role + ": " + std::to_string(speakers.size()) + " speakers, " +
                std::to_string(records.size()) + " utterances");
  }
}

inline void StageTrainUbm(const ExperimentConfig &cfg, const fs::path &work) {
  std::vector<RowMatrix> parts;
  Eigen::Index rows = 0;
  for (const auto &r : LoadSessionRecords(work, "train")) {
    if (r.parent_id != r.session_id) continue;  // slices repeat their parent's frames
    parts.push_back(ReadFeatures(work / r.path).frames);
    rows += parts.back().rows();
  }
  if (parts.empty()) throw Error("no training sessions");
  RowMatrix x(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto &p : parts) {
    x.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  parts.clear();
  const auto res = TrainGmmEm(x, cfg.ubm_components, cfg.ubm_iters, MixSeed(cfg.seed, HashString("ubm")), cfg.ubm);
  detail::MakeDirs(work / "models");
  WriteGmm(work / "models" / "ubm.gmm", res.gmm);
  detail::Log("train-ubm: K=" + std::to_string(cfg.ubm_components) + " on " + std::to_string(rows) +
              " frames, final avg loglike " + FormatDouble(res.loglike_history.back(), 8));
}

namespace detail {
inline std::vector<BaumWelchStats> StatsFor(const std::vector<SessionRecord> &recs, const DiagonalGmm &ubm,
                                            const fs::path &work) {
  std::vector<BaumWelchStats> out;
  out.reserve(recs.size());
  for (const auto &r : recs) out.push_back(AccumulateBwStats(ubm, ReadFeatures(work / r.path).frames));
  return out;
}
}  // namespace detail

inline void StageTrainTv(const ExperimentConfig &cfg, const fs::path &work) {
  const DiagonalGmm ubm = ReadGmm(work / "models" / "ubm.gmm");
  const auto recs = LoadSessionRecords(work, "train");
  const auto stats = detail::StatsFor(recs, ubm, work);
  const auto res = TrainTotalVariability(stats, ubm, cfg.tv_rank, cfg.tv_iters,
                                         MixSeed(cfg.seed, HashString("tv")), cfg.tv);
  WriteStringToFile(work / "models" / "tv.txt", FormatExtractor(res.extractor));
  detail::Log("train-tv: rank " + std::to_string(cfg.tv_rank) + " on " + std::to_string(stats.size()) +
              " utterances, objective " + FormatDouble(res.objective_history.front(), 8) + " -> " +
              FormatDouble(res.objective_history.back(), 8));
}

namespace detail {
inline std::vector<Vector> ExtractAll(const std::vector<SessionRecord> &recs, const fs::path &work) {
  const DiagonalGmm ubm = ReadGmm(work / "models" / "ubm.gmm");
  const IVectorExtractor ex = ReadExtractor(work / "models" / "tv.txt");
  const IVectorComputer comp(ex, ubm);
  std::vector<Vector> out;
  out.reserve(recs.size());
  for (const auto &r : recs)
    out.push_back(comp.Extract(AccumulateBwStats(ubm, ReadFeatures(work / r.path).frames)).mean);
  return out;
}

/// LDA projection followed by length normalisation: the PLDA input space.
/// Cosine scoring uses the same projection without the normalisation, which
/// it does not need.
inline Vector PldaSpace(const LdaTransform &lda, const Vector &iv) { return LengthNormalize(lda.Apply(iv)); }
}  // namespace detail

inline void StageTrainBackend(const ExperimentConfig &cfg, const fs::path &work) {
  const auto recs = LoadSessionRecords(work, "train");
  const auto ivs = detail::ExtractAll(recs, work);
  std::vector<std::string> ids, labels;
  Matrix x(static_cast<Eigen::Index>(ivs.size()), ivs.empty() ? 0 : ivs.front().size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    ids.push_back(recs[i].session_id);
    labels.push_back(recs[i].speaker_id);
    x.row(static_cast<Eigen::Index>(i)) = ivs[i].transpose();
  }
  detail::MakeDirs(work / "ivectors");
  WriteStringToFile(work / "ivectors" / "train.txt", detail::FormatVectors(ids, ivs));
  const LdaTransform lda = TrainLda(x, labels, cfg.lda_rank);
  Matrix y(x.rows(), cfg.lda_rank);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i) = detail::PldaSpace(lda, x.row(i).transpose()).transpose();
  const auto plda = TrainPlda(y, labels, cfg.plda_rank, cfg.plda_iters, MixSeed(cfg.seed, HashString("plda")), cfg.plda);
  WriteStringToFile(work / "models" / "lda.txt", FormatLda(lda));
  WriteStringToFile(work / "models" / "plda.txt", FormatPlda(plda.model));
  detail::Log("train-backend: LDA " + std::to_string(cfg.lda_rank) + ", PLDA " + std::to_string(cfg.plda_rank) +
              ", PLDA loglike " + FormatDouble(plda.loglike_history.front(), 8) + " -> " +
              FormatDouble(plda.loglike_history.back(), 8));
}

inline TrialList RoleTrials(const ExperimentConfig &cfg, const fs::path &work, const std::string &role) {
  return MakeTrials(LoadSessionRecords(work, role), cfg.max_test_sessions);
}

/// MAP models for the enrolment utterances and i-vectors for every dev/test
/// utterance.
inline void StageEnroll(const ExperimentConfig &cfg, const fs::path &work) {
  const DiagonalGmm ubm = ReadGmm(work / "models" / "ubm.gmm");
  for (const std::string role : {"dev", "test"}) {
    const TrialList list = RoleTrials(cfg, work, role);
    detail::MakeDirs(work / "enroll" / role);
    for (const auto &r : list.enroll)
      WriteGmm(work / detail::EnrollModelPath(role, r.session_id),
               MapAdaptMeans(ubm, ReadFeatures(work / r.path).frames, cfg.map_relevance));
    std::vector<SessionRecord> all = list.enroll;
    all.insert(all.end(), list.test.begin(), list.test.end());
    const auto ivs = detail::ExtractAll(all, work);
    std::vector<std::string> ids;
    for (const auto &r : all) ids.push_back(r.session_id);
    detail::MakeDirs(work / "ivectors");
    WriteStringToFile(work / "ivectors" / (role + ".txt"), detail::FormatVectors(ids, ivs));
    detail::MakeDirs(work / "trials");
    WriteStringToFile(work / "trials" / (role + ".tsv"), FormatTrials(list));
    detail::Log("enroll: " + role + ": " + std::to_string(list.enroll.size()) + " models, " +
                std::to_string(list.test.size()) + " test utterances");
  }
}

inline std::map<std::string, std::string> ModelSpeakers(const TrialList &list) {
  std::map<std::string, std::string> m;
  for (const auto &r : list.enroll) m[r.session_id] = r.speaker_id;
  return m;
}

/// Raw subsystem scores for every trial, then T-norm.  Both i-vector
/// backends work in the centred LDA space.
inline void StageScore(const ExperimentConfig &cfg, const fs::path &work) {
  const DiagonalGmm ubm = ReadGmm(work / "models" / "ubm.gmm");
  const LdaTransform lda = ReadLda(work / "models" / "lda.txt");
  const PldaScorer plda(ReadPlda(work / "models" / "plda.txt"), "models/plda.txt");
  detail::MakeDirs(work / "scores");
  for (const std::string role : {"dev", "test"}) {
    const TrialList list = RoleTrials(cfg, work, role);
    const auto ivs = detail::ReadVectors(work / "ivectors" / (role + ".txt"));
    auto iv = [&](const std::string &id) -> const Vector & {
      auto it = ivs.find(id);
      if (it == ivs.end()) throw Error("no i-vector for " + id + "; re-run enroll");
      return it->second;
    };
    std::vector<DiagonalGmm> models;
    std::vector<Vector> enroll_lda;
    for (const auto &r : list.enroll) {
      models.push_back(ReadGmm(work / detail::EnrollModelPath(role, r.session_id)));
      enroll_lda.push_back(lda.Apply(iv(r.session_id)));
    }
    std::map<std::string, Vector> test_lda;
    for (const auto &r : list.test) test_lda[r.session_id] = lda.Apply(iv(r.session_id));
    const std::size_t ne = list.enroll.size(), nt = list.test.size();
    std::vector<double> gmm(ne * nt);
    for (std::size_t t = 0; t < nt; ++t) {
      const RowMatrix x = ReadFeatures(work / list.test[t].path).frames;
      const GaussianShortlist sl = SelectShortlist(ubm, x, cfg.top_c);
      for (std::size_t e = 0; e < ne; ++e) gmm[e * nt + t] = ScoreLlr(sl, models[e], x);
    }
    ScoreTable raw;
    for (const auto &tr : list.trials) {
      const auto &er = list.enroll[tr.enroll], &tr_rec = list.test[tr.test];
      const Vector &le = enroll_lda[tr.enroll], &lt = test_lda.at(tr_rec.session_id);
      TrialScore ts;
      ts.enroll_id = er.session_id;
      ts.test_id = tr_rec.session_id;
      ts.d_enroll = er.condition_seconds;
      ts.d_test = tr_rec.condition_seconds;
      ts.scores = {gmm[tr.enroll * nt + tr.test], CosineScore(le, lt),
                   plda.Score(LengthNormalize(le), LengthNormalize(lt))};
      ts.is_target = tr.is_target;
      raw.trials.push_back(std::move(ts));
    }
    WriteStringToFile(work / "scores" / (role + "_raw.tsv"), FormatScores(raw));
    ScoreTable norm = raw;
    norm.trials = ApplyTNorm(raw.trials, ModelSpeakers(list));
    WriteStringToFile(work / "scores" / (role + ".tsv"), FormatScores(norm));
    detail::Log("score: " + role + ": " + std::to_string(raw.trials.size()) + " trials");
  }
}

/// Adds profile noise to each trial; the draw depends only on the seed, the
/// role and the trial identity.
inline ScoreTable ApplyNoiseProfile(const ScoreTable &in, const NoiseProfile &noise, const DurationGrid &grid,
                                    std::uint64_t seed, const std::string &role) {
  ScoreTable out = in;
  if (!noise.enabled) return out;
  const std::uint64_t base = MixSeed(seed, HashString("noise:" + role));
  for (auto &t : out.trials) {
    Rng rng(MixSeed(base, HashString(t.enroll_id + "|" + t.test_id)));
    const std::size_t bin = AssignBinIndex(t.d_test, grid);
    for (std::size_t s = 0; s < out.subsystems.size(); ++s) {
      const double z = rng.Normal();
      auto it = noise.sigma.find(out.subsystems[s]);
      if (it != noise.sigma.end()) t.scores[s] += it->second[bin] * z;
    }
  }
  return out;
}

inline const std::vector<std::string> &FusedSystems() {
  static const std::vector<std::string> names{"mean", "lr", "nn", "duration_lr", "duration_nn"};
  return names;
}

inline void StageFuse(const ExperimentConfig &cfg, const fs::path &work) {
  const DurationGrid grid(cfg.grid);
  const ScoreTable dev = ApplyNoiseProfile(ReadScores(work / "scores" / "dev.tsv"), cfg.noise, grid, cfg.seed, "dev");
  const ScoreTable test = ApplyNoiseProfile(ReadScores(work / "scores" / "test.tsv"), cfg.noise, grid, cfg.seed, "test");
  WriteStringToFile(work / "scores" / "dev_input.tsv", FormatScores(dev));
  WriteStringToFile(work / "scores" / "test_input.tsv", FormatScores(test));

  DurationFusionConfig fc = cfg.fusion;
  fc.seed = MixSeed(cfg.seed, HashString("fusion"));
  const DurationFusion lr = TrainDurationFusion(dev.trials, grid, FusionKind::kLr, fc);
  const DurationFusion nn = TrainDurationFusion(dev.trials, grid, FusionKind::kNn, fc);
  WriteStringToFile(work / "models" / "fusion_lr.txt", FormatDurationFusion(lr));
  WriteStringToFile(work / "models" / "fusion_nn.txt", FormatDurationFusion(nn));

  ScoreTable fused = test;
  for (const auto &n : FusedSystems()) fused.subsystems.push_back(n);
  for (auto &t : fused.trials) {
    const std::vector<double> s = t.scores;
    t.scores.push_back(FuseMean(s));
    t.scores.push_back(ApplyFusion(lr.overall, s));
    t.scores.push_back(ApplyFusion(nn.overall, s));
    t.scores.push_back(lr.Apply(s, t.d_enroll, t.d_test));
    t.scores.push_back(nn.Apply(s, t.d_enroll, t.d_test));
  }
  WriteStringToFile(work / "scores" / "test_fused.tsv", FormatScores(fused));
  detail::Log("fuse: LR cells trained " + std::to_string(lr.NumTrainedCells()) + "/" +
              std::to_string(lr.cells.size()) + ", NN cells trained " + std::to_string(nn.NumTrainedCells()) +
              "/" + std::to_string(nn.cells.size()) + (cfg.noise.enabled ? " (noise profile on)" : ""));
}

namespace detail {
inline Json CellsJson(const CellMatrix &cells) {
  Json j = Json::array();
  for (const auto &row : cells) {
    Json r = Json::array();
    for (const auto &c : row) r.push_back(c ? Json(*c) : Json(nullptr));
    j.push_back(r);
  }
  return j;
}
}  // namespace detail

inline const std::vector<std::pair<std::string, std::string>> &ReportRerPairs() {
  static const std::vector<std::pair<std::string, std::string>> pairs{
      {"gmm", "tvs_cosine"}, {"tvs_cosine", "tvs_plda"}, {"lr", "duration_lr"}, {"nn", "duration_nn"}};
  return pairs;
}

inline Json ReportToJson(const ConditionReport &rep) {
  Json j;
  j["grid"] = rep.grid;
  j["trials"] = rep.trials;
  j["identification_tests"] = rep.id_tests;
  j["trial_counts"] = rep.trial_counts;
  j["identification_test_counts"] = rep.id_test_counts;
  Json systems = Json::object();
  for (const auto &s : rep.systems) {
    Json sj;
    sj["identification_error"] = s.id_error;
    sj["identification_error_ci"] = s.id_error_ci;
    sj["eer"] = s.eer;
    sj["eer_ci"] = s.eer_ci;
    sj["identification_error_cells"] = detail::CellsJson(s.id_error_cells);
    sj["eer_cells"] = detail::CellsJson(s.eer_cells);
    systems[s.name] = sj;
  }
  j["systems"] = systems;
  Json rer = Json::array();
  for (const auto &r : rep.rer) {
    Json rj;
    rj["base"] = r.base;
    rj["new"] = r.updated;
    rj["identification_error"] = r.id_error ? Json(*r.id_error) : Json(nullptr);
    rj["eer"] = r.eer ? Json(*r.eer) : Json(nullptr);
    rj["identification_error_cells"] = detail::CellsJson(r.id_error_cells);
    rer.push_back(rj);
  }
  j["relative_error_reduction"] = rer;
  return j;
}

inline void StageEval(const ExperimentConfig &cfg, const fs::path &work) {
  const DurationGrid grid(cfg.grid);
  const ScoreTable fused = ReadScores(work / "scores" / "test_fused.tsv");
  const ConditionReport rep = BuildConditionReport(fused, grid, ReportRerPairs());
  Json j = ReportToJson(rep);

  // Test sessions per speaker, for the protocol check.
  const TrialList list = RoleTrials(cfg, work, "test");
  std::map<std::string, std::set<std::string>> per_speaker;
  for (const auto &r : list.test) per_speaker[r.speaker_id].insert(r.parent_id);
  std::size_t min_tests = std::numeric_limits<std::size_t>::max();
  for (const auto &[spk, s] : per_speaker) min_tests = std::min(min_tests, s.size());
  j["test_speakers"] = per_speaker.size();
  j["min_test_sessions_per_speaker"] = per_speaker.empty() ? 0 : min_tests;
  j["noise_profile_enabled"] = cfg.noise.enabled;

  // Normalised LR weights per duration cell.
  const DurationFusion lr = ReadDurationFusion(work / "models" / "fusion_lr.txt");
  Json weights = Json::array();
  for (std::size_t e = 0; e < grid.size(); ++e) {
    Json row = Json::array();
    for (std::size_t t = 0; t < grid.size(); ++t) {
      const Vector w = DurationWeights(lr, grid[e], grid[t]);
      row.push_back(std::vector<double>(w.data(), w.data() + w.size()));
    }
    weights.push_back(row);
  }
  j["duration_lr_weights"] = weights;

  WriteStringToFile(work / "report.json", j.dump(2) + "\n");
  detail::MakeDirs(work / "report");
  for (const auto &s : rep.systems) {
    WriteStringToFile(work / "report" / (s.name + "_id_error.csv"), FormatCellCsv(s.id_error_cells, rep.grid));
    WriteStringToFile(work / "report" / (s.name + "_eer.csv"), FormatCellCsv(s.eer_cells, rep.grid));
  }
  for (const auto &r : rep.rer)
    WriteStringToFile(work / "report" / ("rer_" + r.base + "_vs_" + r.updated + "_id_error.csv"),
                      FormatCellCsv(r.id_error_cells, rep.grid));
  std::ostringstream os;
  os << "eval:";
  for (const auto &s : rep.systems)
    os << ' ' << s.name << " id=" << FormatDouble(s.id_error, 4) << "% eer=" << FormatDouble(s.eer, 4) << '%';
  detail::Log(os.str());
}

struct Stage {
  const char *name;
  void (*run)(const ExperimentConfig &, const fs::path &);
};

inline const std::vector<Stage> &Stages() {
  static const std::vector<Stage> stages{
      {"synth-corpus", StageSynthCorpus}, {"frontend", StageFrontend},     {"train-ubm", StageTrainUbm},
      {"train-tv", StageTrainTv},         {"train-backend", StageTrainBackend}, {"enroll", StageEnroll},
      {"score", StageScore},              {"fuse", StageFuse},             {"eval", StageEval}};
  return stages;
}

/// Runs one stage, prefixing any failure with the stage name.  Artefacts
/// written before the failure are left in place.
inline void RunStage(const std::string &name, const ExperimentConfig &cfg, const fs::path &work) {
  for (const auto &s : Stages()) {
    if (name != s.name) continue;
    detail::MakeDirs(work);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      s.run(cfg, work);
    } catch (const ConfigError &e) {
      throw ConfigError(name + ": " + e.what());
    } catch (const std::exception &e) {
      throw Error(name + ": " + e.what());
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::Log("[" + name + "] done in " + FormatDouble(sec, 3) + " s");
    return;
  }
  throw Error("unknown stage '" + name + "'");
}

inline void RunExperiment(const ExperimentConfig &cfg, const fs::path &work) {
  for (const auto &s : Stages()) RunStage(s.name, cfg, work);
}

}  // namespace spkr

#endif  // SPKR_EXPERIMENT_HPP_
