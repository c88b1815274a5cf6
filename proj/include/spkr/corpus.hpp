// spkr/corpus.hpp

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

// Audio ingestion, session construction, duration slicing and the synthetic
// corpus generator.

#ifndef SPKR_CORPUS_HPP_
#define SPKR_CORPUS_HPP_

#include <algorithm>
#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "spkr/common.hpp"
#include "spkr/textio.hpp"

namespace spkr {

struct AudioSignal {
  std::vector<double> samples;
  int sample_rate = 16000;
  std::string source_id;

  double Duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

/// Per-frame speech flags with the framing that produced them.  Frame f
/// covers samples [f * frame_shift, f * frame_shift + frame_length).
struct SpeechMask {
  std::vector<std::uint8_t> speech;
  std::size_t frame_length = 400;
  std::size_t frame_shift = 160;

  std::size_t NumSpeechFrames() const {
    return static_cast<std::size_t>(std::count(speech.begin(), speech.end(), 1));
  }
  double ShiftSeconds(int sample_rate) const {
    return static_cast<double>(frame_shift) / sample_rate;
  }
};

using SpeechMaskFn = std::function<SpeechMask(const AudioSignal &)>;

struct Session {
  std::string speaker_id;
  std::string session_id;
  AudioSignal audio;
  double speech_seconds = 0.0;
  /// Duration condition this session represents: the grid point for a
  /// subsession, its own speech duration for a full session.
  double condition_seconds = 0.0;
  /// Speech flags aligned with the framing of `audio`.
  SpeechMask mask;
};

class DurationGrid {
 public:
  DurationGrid() : DurationGrid(std::vector<double>{0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50}) {}

  explicit DurationGrid(std::vector<double> points) : points_(std::move(points)) {
    if (points_.empty()) throw ConfigError("duration grid is empty");
    for (std::size_t i = 0; i < points_.size(); ++i) {
      if (!(points_[i] > 0.0) || !std::isfinite(points_[i]))
        throw ConfigError("duration grid points must be positive");
      if (i > 0 && !(points_[i] > points_[i - 1]))
        throw ConfigError("duration grid must be strictly increasing");
    }
  }

  const std::vector<double> &points() const { return points_; }
  std::size_t size() const { return points_.size(); }
  double operator[](std::size_t i) const { return points_[i]; }
  double Max() const { return points_.back(); }

  /// Index of `d` if it is (numerically) a grid point, else -1.
  int IndexOf(double d) const {
    for (std::size_t i = 0; i < points_.size(); ++i)
      if (std::abs(points_[i] - d) <= 1e-9 * std::max(1.0, d)) return static_cast<int>(i);
    return -1;
  }

 private:
  std::vector<double> points_;
};

// ---------------------------------------------------------------------------
// WAV I/O: RIFF/WAVE, PCM, 16-bit, mono.

namespace detail {
inline std::uint32_t ReadLe32(const unsigned char *p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t ReadLe16(const unsigned char *p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void PutLe32(std::string &s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void PutLe16(std::string &s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}
}  // namespace detail

inline AudioSignal ParseWav(const std::string &bytes, const std::string &source_id) {
  const auto *p = reinterpret_cast<const unsigned char *>(bytes.data());
  const std::size_t n = bytes.size();
  auto fail = [&](const std::string &msg) -> AudioSignal {
    throw Error(source_id + ": " + msg);
  };
  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    return fail("not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const std::string id(bytes.data() + pos, 4);
    const std::uint32_t size = detail::ReadLe32(p + pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (size < 16 || body + 16 > n) return fail("truncated fmt chunk");
      format = detail::ReadLe16(p + body);
      channels = detail::ReadLe16(p + body + 2);
      rate = detail::ReadLe32(p + body + 4);
      bits = detail::ReadLe16(p + body + 14);
      if (format != 1) return fail("audio_format=" + std::to_string(format) + " unsupported");
      if (channels != 1) return fail("channels=" + std::to_string(channels) + " unsupported");
      if (bits != 16) return fail("bits_per_sample=" + std::to_string(bits) + " unsupported");
      if (rate == 0) return fail("sample_rate=0 unsupported");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) return fail("data chunk before fmt chunk");
      const std::size_t avail = std::min<std::size_t>(size, n - body);
      AudioSignal sig;
      sig.sample_rate = static_cast<int>(rate);
      sig.source_id = source_id;
      sig.samples.resize(avail / 2);
      for (std::size_t i = 0; i < sig.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(detail::ReadLe16(p + body + 2 * i));
        sig.samples[i] = v / 32768.0;
      }
      return sig;
    }
    pos = body + size + (size & 1u);
  }
  return fail(have_fmt ? "missing data chunk" : "missing fmt chunk");
}

inline AudioSignal ReadWav(const std::filesystem::path &path) {
  return ParseWav(ReadFileToString(path), path.string());
}

inline std::string EncodeWav(const AudioSignal &sig) {
  if (sig.sample_rate <= 0) throw Error("sample_rate must be positive");
  const auto data_bytes = static_cast<std::uint32_t>(sig.samples.size() * 2);
  std::string s;
  s.reserve(44 + data_bytes);
  s += "RIFF";
  detail::PutLe32(s, 36 + data_bytes);
  s += "WAVEfmt ";
  detail::PutLe32(s, 16);
  detail::PutLe16(s, 1);
  detail::PutLe16(s, 1);
  detail::PutLe32(s, static_cast<std::uint32_t>(sig.sample_rate));
  detail::PutLe32(s, static_cast<std::uint32_t>(sig.sample_rate) * 2);
  detail::PutLe16(s, 2);
  detail::PutLe16(s, 16);
  s += "data";
  detail::PutLe32(s, data_bytes);
  for (double x : sig.samples) {
    if (!std::isfinite(x)) throw Error(sig.source_id + ": non-finite sample");
    const double q = std::clamp(std::nearbyint(x * 32768.0), -32768.0, 32767.0);
    detail::PutLe16(s, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return s;
}

inline void WriteWav(const std::filesystem::path &path, const AudioSignal &sig) {
  WriteStringToFile(path, EncodeWav(sig));
}

// ---------------------------------------------------------------------------
// Session construction.

namespace detail {
inline AudioSignal SampleSpan(const AudioSignal &a, std::size_t begin, std::size_t end,
                              std::string source_id) {
  AudioSignal out;
  out.sample_rate = a.sample_rate;
  out.source_id = std::move(source_id);
  end = std::min(end, a.samples.size());
  out.samples.assign(a.samples.begin() + static_cast<std::ptrdiff_t>(begin),
                     a.samples.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

/// Audio covering frames [f0, f1) of a framing.
inline std::pair<std::size_t, std::size_t> FrameSpanSamples(const SpeechMask &m, std::size_t f0,
                                                            std::size_t f1) {
  return {f0 * m.frame_shift, (f1 - 1) * m.frame_shift + m.frame_length};
}

inline std::string FormatSeconds(double d) {
  std::ostringstream os;
  os << d;
  return os.str();
}
}  // namespace detail

/// Concatenates one speaker's audio and cuts it into sessions of exactly
/// `target_speech` seconds of speech.  Non-speech following a session's last
/// speech frame stays with that session; a trailing remainder with less than
/// the target amount of speech is dropped.
inline std::vector<Session> BuildSessions(const std::vector<AudioSignal> &speaker_audio,
                                          const std::string &speaker_id, double target_speech,
                                          const SpeechMaskFn &speech_mask_fn) {
  if (!(target_speech > 0.0)) throw Error("build_sessions: target_speech must be positive");
  if (speaker_audio.empty()) return {};
  AudioSignal all;
  all.sample_rate = speaker_audio.front().sample_rate;
  all.source_id = speaker_id;
  for (const auto &a : speaker_audio) {
    if (a.sample_rate != all.sample_rate)
      throw Error("build_sessions: mixed sample rates for speaker " + speaker_id);
    all.samples.insert(all.samples.end(), a.samples.begin(), a.samples.end());
  }
  const SpeechMask mask = speech_mask_fn(all);
  const double shift_s = mask.ShiftSeconds(all.sample_rate);
  const auto per_session =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(target_speech / shift_s)));

  std::vector<std::size_t> speech_frames;
  for (std::size_t f = 0; f < mask.speech.size(); ++f)
    if (mask.speech[f]) speech_frames.push_back(f);
  const std::size_t n_sessions = speech_frames.size() / per_session;

  std::vector<Session> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < n_sessions; ++i) {
    const std::size_t next = (i + 1) * per_session;
    const std::size_t end = next < speech_frames.size() ? speech_frames[next] : mask.speech.size();
    Session s;
    s.speaker_id = speaker_id;
    std::ostringstream id;
    id << speaker_id << "-s" << std::setw(3) << std::setfill('0') << i;
    s.session_id = id.str();
    const auto [b, e] = detail::FrameSpanSamples(mask, start, end);
    s.audio = detail::SampleSpan(all, b, e, s.session_id);
    s.mask.frame_length = mask.frame_length;
    s.mask.frame_shift = mask.frame_shift;
    s.mask.speech.assign(mask.speech.begin() + static_cast<std::ptrdiff_t>(start),
                         mask.speech.begin() + static_cast<std::ptrdiff_t>(end));
    s.speech_seconds = static_cast<double>(per_session) * shift_s;
    s.condition_seconds = s.speech_seconds;
    out.push_back(std::move(s));
    start = end;
  }
  return out;
}

/// Cuts one contiguous span per grid point shorter than the session, holding
/// exactly round(d / frame_shift) speech frames, and appends the session
/// itself as the longest condition.
inline std::vector<Session> SliceSubsessions(const Session &session, const DurationGrid &grid,
                                             std::uint64_t seed) {
  const SpeechMask &m = session.mask;
  const double shift_s = m.ShiftSeconds(session.audio.sample_rate);
  std::vector<std::size_t> speech_frames;
  for (std::size_t f = 0; f < m.speech.size(); ++f)
    if (m.speech[f]) speech_frames.push_back(f);

  std::vector<Session> out;
  for (double d : grid.points()) {
    if (d >= session.speech_seconds - 0.5 * shift_s) continue;
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(d / shift_s)));
    if (n > speech_frames.size()) continue;
    std::uint64_t dbits;
    std::memcpy(&dbits, &d, sizeof d);
    Rng rng(MixSeed(MixSeed(seed, HashString(session.session_id)), dbits));
    const std::size_t j = rng.Below(speech_frames.size() - n + 1);
    const std::size_t f0 = speech_frames[j];
    const std::size_t f1 = speech_frames[j + n - 1] + 1;

    Session sub;
    sub.speaker_id = session.speaker_id;
    sub.session_id = session.session_id + "@" + detail::FormatSeconds(d);
    const auto [b, e] = detail::FrameSpanSamples(m, f0, f1);
    sub.audio = detail::SampleSpan(session.audio, b, e, sub.session_id);
    sub.mask.frame_length = m.frame_length;
    sub.mask.frame_shift = m.frame_shift;
    sub.mask.speech.assign(m.speech.begin() + static_cast<std::ptrdiff_t>(f0),
                           m.speech.begin() + static_cast<std::ptrdiff_t>(f1));
    sub.speech_seconds = static_cast<double>(n) * shift_s;
    sub.condition_seconds = d;
    out.push_back(std::move(sub));
  }
  out.push_back(session);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: TSV with header speaker_id, session_id, path, speech_seconds.

struct ManifestEntry {
  std::string speaker_id;
  std::string session_id;
  std::string path;
  double speech_seconds = 0.0;
};

inline std::string FormatManifest(const std::vector<ManifestEntry> &entries) {
  std::ostringstream os;
  os << "speaker_id\tsession_id\tpath\tspeech_seconds\n";
  for (const auto &e : entries) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", e.speech_seconds);
    os << e.speaker_id << '\t' << e.session_id << '\t' << e.path << '\t' << buf << '\n';
  }
  return os.str();
}

/// Relative paths are resolved against the manifest's directory.
inline std::vector<ManifestEntry> ReadManifest(const std::filesystem::path &path) {
  std::istringstream is(ReadFileToString(path));
  std::string line;
  if (!std::getline(is, line) || line != "speaker_id\tsession_id\tpath\tspeech_seconds")
    throw Error(path.string() + ": bad manifest header");
  std::vector<ManifestEntry> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = SplitTabs(line);
    if (f.size() != 4)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
    ManifestEntry e{f[0], f[1], f[2], std::strtod(f[3].c_str(), nullptr)};
    if (std::filesystem::path(e.path).is_relative())
      e.path = (path.parent_path() / e.path).string();
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus.  Each speaker is a cascade of three resonators whose
// centre frequencies follow a shared vowel inventory scaled by a speaker
// vocal-tract factor and shifted by per-vowel speaker offsets, excited by a jittered pulse train at the speaker's
// pitch plus aspiration noise.  Each file adds its own channel (gain and
// spectral tilt) and background noise, with pauses between speech runs.

struct SynthConfig {
  int n_speakers = 30;
  int sessions_per_speaker = 3;
  int sample_rate = 8000;
  double speech_median_seconds = 8.0;  // log-normal per-file speech duration
  double speech_sigma = 0.5;
  double min_speech_seconds = 1.0;
  double max_speech_seconds = 60.0;
  double noise_level = 0.002;          // background noise standard deviation
  double channel_tilt = 0.4;           // per-file first-order tilt drawn from +-channel_tilt
  std::string speaker_prefix = "spk";
};

struct SpeakerVoice {
  double f0 = 120.0;
  double tract_scale = 1.0;
  std::array<double, 3> formant_offset{};
  std::array<std::array<double, 3>, 6> vowel_offset{};  // per-vowel idiosyncrasy
  std::array<double, 3> bandwidth{};
  double breathiness = 0.1;
  double fricative_centre = 2500.0;
};

namespace detail {

// Shared vowel inventory (F1, F2, F3) in Hz.
inline constexpr std::array<std::array<double, 3>, 6> kVowels{{
    {270, 2290, 3010}, {530, 1840, 2480}, {730, 1090, 2440},
    {570, 840, 2410},  {300, 870, 2240},  {660, 1720, 2410},
}};

struct Resonator {
  double a1 = 0, a2 = 0, y1 = 0, y2 = 0;
  void Set(double freq, double bw, int rate) {
    const double r = std::exp(-std::numbers::pi * bw / rate);
    a1 = 2.0 * r * std::cos(2.0 * std::numbers::pi * freq / rate);
    a2 = -r * r;
  }
  double Step(double x) {
    const double y = x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

inline SpeakerVoice DrawVoice(Rng &rng) {
  SpeakerVoice v;
  v.f0 = rng.Uniform(85.0, 230.0);
  v.tract_scale = rng.Uniform(0.82, 1.12);
  for (int i = 0; i < 3; ++i) {
    v.formant_offset[i] = rng.Normal(0.0, 0.06);
    v.bandwidth[i] = (60.0 + 40.0 * i) * rng.Uniform(0.7, 1.4);
  }
  for (auto &vowel : v.vowel_offset)
    for (auto &o : vowel) o = rng.Normal(0.0, 0.04);
  v.breathiness = rng.Uniform(0.03, 0.3);
  v.fricative_centre = rng.Uniform(1800.0, 3300.0);
  return v;
}

/// Appends `seconds` of speech normalised to a fixed RMS.
inline void SynthSpeechRun(const SpeakerVoice &v, double seconds, int rate, Rng &rng,
                           std::vector<double> &out) {
  const auto total = static_cast<std::size_t>(seconds * rate);
  std::vector<double> run;
  run.reserve(total);
  std::array<Resonator, 3> res;
  double phase = 0.0;
  const double intonation_rate = rng.Uniform(0.5, 2.0);
  const double nyquist_guard = 0.45 * rate;
  while (run.size() < total) {
    const auto len = std::min<std::size_t>(
        total - run.size(), static_cast<std::size_t>(rng.Uniform(0.06, 0.2) * rate));
    const bool unvoiced = rng.Uniform() < 0.15;
    const std::size_t which = rng.Below(kVowels.size());
    const auto &vowel = kVowels[which];
    for (int i = 0; i < 3; ++i) {
      double f = vowel[i] * v.tract_scale * (1.0 + v.formant_offset[i] + v.vowel_offset[which][i]);
      if (unvoiced && i == 2) f = v.fricative_centre;
      res[i].Set(std::min(f, nyquist_guard), unvoiced ? 3.0 * v.bandwidth[i] : v.bandwidth[i],
                 rate);
    }
    for (std::size_t k = 0; k < len; ++k) {
      const double t = static_cast<double>(run.size()) / rate;
      const double f0 = v.f0 * (1.0 + 0.08 * std::sin(2.0 * std::numbers::pi * intonation_rate * t));
      double exc = 0.0;
      if (!unvoiced) {
        phase += f0 / rate;
        if (phase >= 1.0) {
          phase -= 1.0;
          exc = 1.0 + 0.05 * rng.Normal();
        }
        exc += v.breathiness * 0.3 * rng.Normal();
      } else {
        exc = 0.3 * rng.Normal();
      }
      double y = exc;
      for (auto &r : res) y = r.Step(y);
      run.push_back(y);
    }
  }
  double energy = 0.0;
  for (double x : run) energy += x * x;
  const double rms = std::sqrt(energy / std::max<std::size_t>(1, run.size()));
  const double scale = rms > 0 ? 0.08 / rms : 0.0;
  for (double x : run) out.push_back(x * scale);
}

}  // namespace detail

/// Generates one speaker's voice parameters for (seed, speaker_id).
inline SpeakerVoice SynthVoice(std::uint64_t seed, const std::string &speaker_id) {
  Rng rng(MixSeed(seed, HashString("voice:" + speaker_id)));
  return detail::DrawVoice(rng);
}

/// Renders one file containing about `speech_seconds` of speech.
inline AudioSignal SynthUtterance(const SpeakerVoice &voice, double speech_seconds,
                                  const SynthConfig &cfg, Rng &rng, std::string source_id) {
  const int rate = cfg.sample_rate;
  std::vector<double> x;
  auto silence = [&](double sec) { x.insert(x.end(), static_cast<std::size_t>(sec * rate), 0.0); };
  silence(rng.Uniform(0.2, 0.5));
  double left = speech_seconds;
  while (left > 1e-9) {
    const double run = std::min(left, rng.Uniform(0.8, 3.0));
    detail::SynthSpeechRun(voice, run, rate, rng, x);
    left -= run;
    silence(left > 1e-9 ? rng.Uniform(0.15, 0.8) : rng.Uniform(0.2, 0.5));
  }
  // Channel: gain plus first-order tilt, then additive background noise.
  const double gain = rng.Uniform(0.5, 1.0);
  const double tilt = rng.Uniform(-cfg.channel_tilt, cfg.channel_tilt);
  double prev = 0.0;
  AudioSignal sig;
  sig.sample_rate = rate;
  sig.source_id = std::move(source_id);
  sig.samples.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double y = gain * (x[i] + tilt * prev);
    prev = x[i];
    sig.samples[i] = std::clamp(y + cfg.noise_level * rng.Normal(), -1.0, 1.0);
  }
  return sig;
}

/// Writes `<out_dir>/wav/*.wav` and `<out_dir>/manifest.tsv`; identical
/// (config, seed) give byte-identical output.
inline std::vector<ManifestEntry> SynthCorpus(const SynthConfig &cfg, std::uint64_t seed,
                                              const std::filesystem::path &out_dir) {
  if (cfg.n_speakers < 2) throw ConfigError("synth: n_speakers must be >= 2");
  if (cfg.sessions_per_speaker < 1) throw ConfigError("synth: sessions_per_speaker must be >= 1");
  if (cfg.sample_rate <= 0) throw ConfigError("synth: sample_rate must be positive");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "wav", ec);
  if (ec) throw Error("cannot create " + (out_dir / "wav").string() + ": " + ec.message());

  std::vector<ManifestEntry> manifest;
  for (int s = 0; s < cfg.n_speakers; ++s) {
    std::ostringstream sid;
    sid << cfg.speaker_prefix << std::setw(3) << std::setfill('0') << s;
    const SpeakerVoice voice = SynthVoice(seed, sid.str());
    for (int k = 0; k < cfg.sessions_per_speaker; ++k) {
      std::ostringstream uid;
      uid << sid.str() << "-u" << std::setw(2) << std::setfill('0') << k;
      Rng rng(MixSeed(seed, HashString("utt:" + uid.str())));
      const double speech = std::clamp(
          std::exp(std::log(cfg.speech_median_seconds) + cfg.speech_sigma * rng.Normal()),
          cfg.min_speech_seconds, cfg.max_speech_seconds);
      const AudioSignal sig = SynthUtterance(voice, speech, cfg, rng, uid.str());
      const std::string rel = "wav/" + uid.str() + ".wav";
      WriteWav(out_dir / rel, sig);
      manifest.push_back({sid.str(), uid.str(), rel, speech});
    }
  }
  WriteStringToFile(out_dir / "manifest.tsv", FormatManifest(manifest));
  return manifest;
}

}  // namespace spkr

#endif  // SPKR_CORPUS_HPP_
