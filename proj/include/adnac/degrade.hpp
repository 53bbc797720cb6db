#pragma once

// Degradations (noise, reverb, "noise-cancellation" artifacts), the one-or-two
// degradation chain applied to each clean chunk, and paired-dataset
// generation with a JSONL manifest.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unsupported/Eigen/FFT>
#include <vector>

#include "adnac/audio_io.hpp"
#include "adnac/error.hpp"
#include "adnac/rng.hpp"
#include "json.hpp"

namespace adnac {

enum class DegradationKind { WhiteNoise, ExternalNoise, SyntheticReverb, RirReverb, NcArtifact };

inline const char* kind_name(DegradationKind k) {
  switch (k) {
    case DegradationKind::WhiteNoise: return "white_noise";
    case DegradationKind::ExternalNoise: return "external_noise";
    case DegradationKind::SyntheticReverb: return "synthetic_reverb";
    case DegradationKind::RirReverb: return "rir_reverb";
    case DegradationKind::NcArtifact: return "nc_artifact";
  }
  return "?";
}

inline DegradationKind parse_kind(const std::string& s) {
  for (auto k : {DegradationKind::WhiteNoise, DegradationKind::ExternalNoise, DegradationKind::SyntheticReverb,
                 DegradationKind::RirReverb, DegradationKind::NcArtifact})
    if (s == kind_name(k)) return k;
  throw ConfigError("unknown degradation kind: " + s);
}

inline bool is_additive(DegradationKind k) {
  return k == DegradationKind::WhiteNoise || k == DegradationKind::ExternalNoise;
}

struct DegradationRecord {
  DegradationKind kind = DegradationKind::WhiteNoise;
  std::map<std::string, double> params;
  std::optional<std::string> source;  // noise or RIR file

  double param(const std::string& key) const {
    auto it = params.find(key);
    if (it == params.end()) throw FormatError(std::string(kind_name(kind)) + " record is missing param " + key);
    return it->second;
  }
  bool operator==(const DegradationRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Primitive degradations

inline Waveform white_noise(std::uint64_t seed, std::size_t n, int sample_rate = kDefaultSampleRate) {
  if (n == 0) throw UsageError("white_noise: n must be positive");
  Rng rng = make_rng(stable_hash(seed, std::string_view("white-noise")));
  std::normal_distribution<double> nd(0.0, 1.0);
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(n);
  for (float& v : w.samples) v = static_cast<float>(nd(rng));
  return w;
}

inline double mean_power(std::span<const float> x) {
  double s = 0;
  for (float v : x) s += static_cast<double>(v) * v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

// Repeats (or crops) `noise` to length n starting at `offset`.
inline std::vector<float> tile_to(std::span<const float> noise, std::size_t n, std::size_t offset = 0) {
  if (noise.empty()) throw DegenerateInputError("tile_to: empty noise");
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = noise[(offset + i) % noise.size()];
  return out;
}

struct MixResult {
  Waveform mix;
  double gain = 0;  // applied to the noise
};

// clean + g * noise with g chosen so that P_clean / P(g * noise) hits snr_db.
inline MixResult mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db) {
  if (!std::isfinite(snr_db)) throw UsageError("mix_at_snr: non-finite SNR");
  const std::vector<float> n = noise.size() == clean.size() ? noise.samples : tile_to(noise.span(), clean.size());
  const double pc = mean_power(clean.span());
  const double pn = mean_power(n);
  if (!(pc > 0)) throw DegenerateInputError("mix_at_snr: clean signal is silent");
  if (!(pn > 0)) throw DegenerateInputError("mix_at_snr: noise signal is silent");
  MixResult r;
  r.gain = std::sqrt(pc / (pn * std::pow(10.0, snr_db / 10.0)));
  r.mix.sample_rate = clean.sample_rate;
  r.mix.samples.resize(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i)
    r.mix.samples[i] = static_cast<float>(static_cast<double>(clean.samples[i]) + r.gain * n[i]);
  return r;
}

struct SynthRirOptions {
  double drr_db = 6.0;      // direct-to-reverberant energy ratio
  double predelay_s = 0.0;  // gap between the direct path and the diffuse tail
};

// Statistical RIR: unit direct path followed by exponentially decaying
// Gaussian noise whose amplitude falls 60 dB over rt60_s. The tail scale
// sigma is set from the expected tail energy so the DRR is as requested.
inline Waveform synth_rir(std::uint64_t seed, double rt60_s, int sample_rate = kDefaultSampleRate,
                          SynthRirOptions opt = {}, double* sigma_out = nullptr) {
  if (!(rt60_s >= 0.1 && rt60_s <= 3.0)) throw UsageError("synth_rir: rt60_s must be in [0.1, 3.0]");
  if (sample_rate <= 0) throw UsageError("synth_rir: sample rate must be positive");
  const auto len = static_cast<std::size_t>(std::llround(1.5 * rt60_s * sample_rate));
  const auto predelay = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(opt.predelay_s * sample_rate)));
  const double decay = 6.908 / (rt60_s * sample_rate);  // ln(1000) per rt60
  double tail_energy = 0;
  for (std::size_t n = predelay; n < len; ++n) tail_energy += std::exp(-2.0 * decay * static_cast<double>(n));
  const double sigma = tail_energy > 0 ? std::sqrt(std::pow(10.0, -opt.drr_db / 10.0) / tail_energy) : 0.0;
  if (sigma_out) *sigma_out = sigma;

  Rng rng = make_rng(stable_hash(seed, std::string_view("synth-rir")));
  std::normal_distribution<double> nd(0.0, 1.0);
  Waveform h;
  h.sample_rate = sample_rate;
  h.samples.assign(len, 0.0f);
  h.samples[0] = 1.0f;
  for (std::size_t n = predelay; n < len; ++n)
    h.samples[n] = static_cast<float>(sigma * nd(rng) * std::exp(-decay * static_cast<double>(n)));
  return h;
}

// Full linear convolution (FFT based), first `keep` samples.
inline std::vector<double> fft_convolve(std::span<const float> a, std::span<const float> b, std::size_t keep) {
  const std::size_t full = a.size() + b.size() - 1;
  std::size_t n = 1;
  while (n < full) n <<= 1;
  std::vector<double> pa(n, 0.0), pb(n, 0.0);
  std::copy(a.begin(), a.end(), pa.begin());
  std::copy(b.begin(), b.end(), pb.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fa, fb;
  fft.fwd(fa, pa);
  fft.fwd(fb, pb);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  std::vector<double> out;
  fft.inv(out, fa);
  out.resize(std::min(keep, full));
  return out;
}

inline Waveform apply_reverb(const Waveform& wave, const Waveform& rir) {
  if (wave.samples.empty() || rir.samples.empty()) throw UsageError("apply_reverb: empty input");
  if (wave.sample_rate != rir.sample_rate) throw UsageError("apply_reverb: sample rates differ");
  std::vector<double> y;
  if (wave.size() * rir.size() <= 1u << 16) {
    y.assign(wave.size(), 0.0);
    for (std::size_t i = 0; i < wave.size(); ++i)
      for (std::size_t j = 0; j < rir.size() && j <= i; ++j)
        y[i] += static_cast<double>(wave.samples[i - j]) * rir.samples[j];
  } else {
    y = fft_convolve(wave.span(), rir.span(), wave.size());
  }
  double peak = 0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  const double scale = peak > 0.999 ? 0.999 / peak : 1.0;
  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out.samples[i] = static_cast<float>(y[i] * scale);
  return out;
}

// ---------------------------------------------------------------------------
// NC artifacts: partial time-segment attenuation + spectral band suppression

struct NcSegment {
  double start_s, len_s, gain;
};
struct NcBand {
  double center_hz, width_oct, atten_db;
};
struct NcParams {
  std::vector<NcSegment> segments;
  std::vector<NcBand> bands;
};

inline constexpr double kNcCrossfadeS = 0.010;
inline constexpr std::size_t kNcFft = 1024;
inline constexpr std::size_t kNcHop = 256;

inline NcParams draw_nc_params(std::uint64_t seed, std::size_t n, int sample_rate) {
  Rng rng = make_rng(stable_hash(seed, std::string_view("nc-artifacts")));
  NcParams p;
  const double dur = static_cast<double>(n) / sample_rate;
  const int k = uniform_int(rng, 1, 4);
  for (int i = 0; i < k; ++i) {
    NcSegment s{};
    s.len_s = std::min(uniform(rng, 0.05, 0.40), dur);
    s.start_s = uniform(rng, 0.0, std::max(0.0, dur - s.len_s));
    s.gain = uniform(rng, 0.1, 0.7);
    p.segments.push_back(s);
  }
  const int m = uniform_int(rng, 1, 3);
  const double f_hi = std::min(16000.0, 0.45 * sample_rate);
  for (int i = 0; i < m; ++i) {
    NcBand b{};
    b.center_hz = std::exp(uniform(rng, std::log(200.0), std::log(f_hi)));
    b.width_oct = uniform(rng, 1.0 / 3.0, 1.0);
    b.atten_db = uniform(rng, 20.0, 40.0);
    p.bands.push_back(b);
  }
  return p;
}

namespace detail {

// Multiplies x by a per-bin gain curve via STFT (periodic Hann, hop n/4)
// and weighted overlap-add resynthesis. Phase is untouched.
inline std::vector<double> stft_mask(const std::vector<double>& x, const std::vector<double>& bin_gain) {
  const std::size_t N = kNcFft, H = kNcHop, pad = N / 2;
  const std::size_t padded = x.size() + 2 * pad;
  const std::size_t frames = padded >= N ? 1 + (padded - N + H - 1) / H : 1;
  const std::size_t total = (frames - 1) * H + N;
  std::vector<double> xp(total, 0.0), y(total, 0.0), wsum(total, 0.0), win(N), frame(N), back;
  std::copy(x.begin(), x.end(), xp.begin() + static_cast<std::ptrdiff_t>(pad));
  for (std::size_t i = 0; i < N; ++i) win[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / N));
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t o = f * H;
    for (std::size_t i = 0; i < N; ++i) frame[i] = win[i] * xp[o + i];
    fft.fwd(spec, frame);
    for (std::size_t k = 0; k < N; ++k) spec[k] *= bin_gain[std::min(k, N - k)];
    fft.inv(back, spec);
    for (std::size_t i = 0; i < N; ++i) {
      y[o + i] += win[i] * back[i];
      wsum[o + i] += win[i] * win[i];
    }
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double ws = wsum[i + pad];
    out[i] = ws > 1e-8 ? y[i + pad] / ws : 0.0;
  }
  return out;
}

}  // namespace detail

inline Waveform apply_nc(const Waveform& wave, const NcParams& p) {
  if (wave.samples.empty()) throw UsageError("nc_artifacts: empty input");
  const double sr = wave.sample_rate;
  const std::size_t n = wave.size();
  std::vector<double> env(n, 1.0);
  const double fade = kNcCrossfadeS * sr;
  for (const NcSegment& s : p.segments) {
    const double a = s.start_s * sr, b = (s.start_s + s.len_s) * sr;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i);
      if (t < a - fade || t > b + fade) continue;
      // linear ramps of `fade` samples on both sides, full depth inside [a, b]
      double depth = 1.0;
      if (t < a) depth = 1.0 - (a - t) / fade;
      if (t > b) depth = 1.0 - (t - b) / fade;
      env[i] *= 1.0 - depth * (1.0 - s.gain);
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = wave.samples[i] * env[i];

  if (!p.bands.empty()) {
    std::vector<double> gain(kNcFft / 2 + 1, 1.0);
    for (const NcBand& b : p.bands) {
      const double lo = b.center_hz * std::pow(2.0, -b.width_oct / 2), hi = b.center_hz * std::pow(2.0, b.width_oct / 2);
      const double g = std::pow(10.0, -b.atten_db / 20.0);
      for (std::size_t k = 0; k < gain.size(); ++k) {
        const double f = k * sr / kNcFft;
        if (f >= lo && f <= hi) gain[k] = std::min(gain[k], g);
      }
    }
    x = detail::stft_mask(x, gain);
  }
  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.samples[i] = static_cast<float>(x[i]);
  return out;
}

inline Waveform nc_artifacts(const Waveform& wave, std::uint64_t seed, NcParams* drawn = nullptr) {
  if (wave.samples.empty()) throw UsageError("nc_artifacts: empty input");
  NcParams p = draw_nc_params(seed, wave.size(), wave.sample_rate);
  if (drawn) *drawn = p;
  return apply_nc(wave, p);
}

inline std::map<std::string, double> nc_to_params(const NcParams& p) {
  std::map<std::string, double> m;
  m["n_segments"] = static_cast<double>(p.segments.size());
  for (std::size_t i = 0; i < p.segments.size(); ++i) {
    const std::string k = "seg" + std::to_string(i) + "_";
    m[k + "start_s"] = p.segments[i].start_s;
    m[k + "len_s"] = p.segments[i].len_s;
    m[k + "gain"] = p.segments[i].gain;
  }
  m["n_bands"] = static_cast<double>(p.bands.size());
  for (std::size_t i = 0; i < p.bands.size(); ++i) {
    const std::string k = "band" + std::to_string(i) + "_";
    m[k + "center_hz"] = p.bands[i].center_hz;
    m[k + "width_oct"] = p.bands[i].width_oct;
    m[k + "atten_db"] = p.bands[i].atten_db;
  }
  return m;
}

inline NcParams nc_from_record(const DegradationRecord& r) {
  NcParams p;
  const auto ns = static_cast<std::size_t>(r.param("n_segments"));
  for (std::size_t i = 0; i < ns; ++i) {
    const std::string k = "seg" + std::to_string(i) + "_";
    p.segments.push_back({r.param(k + "start_s"), r.param(k + "len_s"), r.param(k + "gain")});
  }
  const auto nb = static_cast<std::size_t>(r.param("n_bands"));
  for (std::size_t i = 0; i < nb; ++i) {
    const std::string k = "band" + std::to_string(i) + "_";
    p.bands.push_back({r.param(k + "center_hz"), r.param(k + "width_oct"), r.param(k + "atten_db")});
  }
  return p;
}

// ---------------------------------------------------------------------------
// Dataset configuration and the degradation chain

struct DatasetConfig {
  std::vector<std::string> clean_dirs;
  std::vector<std::string> noise_dirs;
  std::vector<std::string> rir_dirs;
  std::vector<DegradationKind> kinds{DegradationKind::WhiteNoise, DegradationKind::ExternalNoise,
                                     DegradationKind::SyntheticReverb, DegradationKind::RirReverb,
                                     DegradationKind::NcArtifact};
  int variants_per_chunk = 3;
  double snr_min_db = 0.0;
  double snr_max_db = 15.0;
  double rt60_min_s = 0.2;
  double rt60_max_s = 1.2;
  double drr_min_db = 3.0;
  double drr_max_db = 12.0;
  double predelay_max_s = 0.02;
  std::uint64_t global_seed = 0;
  std::array<double, 3> splits{0.8, 0.1, 0.1};
  int sample_rate = kDefaultSampleRate;
  std::size_t chunk_len = kDefaultChunkLen;
  std::string out_dir = "dataset";
  int threads = 1;

  void validate() const {
    if (variants_per_chunk < 1) throw ConfigError("dataset: variants_per_chunk must be >= 1");
    if (std::abs(splits[0] + splits[1] + splits[2] - 1.0) > 1e-9 || *std::min_element(splits.begin(), splits.end()) < 0)
      throw ConfigError("dataset: splits must be non-negative and sum to 1");
    if (!(snr_min_db <= snr_max_db)) throw ConfigError("dataset: snr range is empty");
    if (!(rt60_min_s >= 0.1 && rt60_max_s <= 3.0 && rt60_min_s <= rt60_max_s))
      throw ConfigError("dataset: rt60 range must lie within [0.1, 3.0] s");
    if (kinds.empty()) throw ConfigError("dataset: no degradation kinds enabled");
    if (chunk_len == 0 || sample_rate <= 0) throw ConfigError("dataset: chunk_len and sample_rate must be positive");
  }
};

inline std::vector<std::filesystem::path> list_wavs(const std::vector<std::string>& dirs) {
  std::vector<std::filesystem::path> out;
  for (const auto& d : dirs) {
    std::error_code ec;
    if (!std::filesystem::is_directory(d, ec)) throw ConfigError("not a directory: " + d);
    for (auto it = std::filesystem::recursive_directory_iterator(d, ec); it != std::filesystem::recursive_directory_iterator();
         it.increment(ec)) {
      if (ec) break;
      if (!it->is_regular_file()) continue;
      std::string ext = it->path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (ext == ".wav") out.push_back(it->path());
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Resolved noise/RIR files plus a thread-safe cache of their decoded audio.
class DegradationPool {
 public:
  DegradationPool() = default;
  explicit DegradationPool(const DatasetConfig& cfg)
      : noise_files_(cfg.noise_dirs.empty() ? std::vector<std::filesystem::path>{} : list_wavs(cfg.noise_dirs)),
        rir_files_(cfg.rir_dirs.empty() ? std::vector<std::filesystem::path>{} : list_wavs(cfg.rir_dirs)),
        sample_rate_(cfg.sample_rate) {}

  const std::vector<std::filesystem::path>& noise_files() const { return noise_files_; }
  const std::vector<std::filesystem::path>& rir_files() const { return rir_files_; }

  // Kinds that can actually run: external noise without files becomes white
  // noise, RIR reverb without files becomes synthetic reverb.
  std::vector<DegradationKind> effective_kinds(const std::vector<DegradationKind>& kinds) const {
    std::vector<DegradationKind> out;
    for (DegradationKind k : kinds) {
      if (k == DegradationKind::ExternalNoise && noise_files_.empty()) k = DegradationKind::WhiteNoise;
      if (k == DegradationKind::RirReverb && rir_files_.empty()) k = DegradationKind::SyntheticReverb;
      if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
    }
    return out;
  }

  const Waveform& load(const std::string& path, bool normalize_peak) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    Waveform w = read_wav(path);
    if (w.sample_rate != sample_rate_) w = resample(w, sample_rate_);
    if (normalize_peak) {
      float peak = 0;
      for (float v : w.samples) peak = std::max(peak, std::abs(v));
      if (peak > 0)
        for (float& v : w.samples) v /= peak;
    }
    return cache_.emplace(path, std::move(w)).first->second;
  }

 private:
  std::vector<std::filesystem::path> noise_files_, rir_files_;
  int sample_rate_ = kDefaultSampleRate;
  std::mutex mu_;
  std::map<std::string, Waveform> cache_;
};

struct DegradeResult {
  Waveform noisy;
  std::vector<DegradationRecord> records;
  std::optional<double> snr_db;
};

inline std::uint64_t stage_seed(std::uint64_t seed, std::size_t stage) {
  return stable_hash(seed, std::string_view("stage"), static_cast<std::uint64_t>(stage));
}

// Applies one record to `x`. Everything random is either stored in the
// record or derived from the stage seed, so this is also the replay path.
inline Waveform apply_record(const Waveform& x, const DegradationRecord& r, std::uint64_t seed,
                             DegradationPool& pool) {
  switch (r.kind) {
    case DegradationKind::WhiteNoise: {
      auto noise = white_noise(seed, x.size(), x.sample_rate);
      return mix_at_snr(x, noise, r.param("snr_db")).mix;
    }
    case DegradationKind::ExternalNoise: {
      if (!r.source) throw FormatError("external_noise record without a source file");
      const Waveform& src = pool.load(*r.source, false);
      Waveform noise;
      noise.sample_rate = x.sample_rate;
      noise.samples = tile_to(src.span(), x.size(), static_cast<std::size_t>(r.param("offset_samples")));
      return mix_at_snr(x, noise, r.param("snr_db")).mix;
    }
    case DegradationKind::SyntheticReverb: {
      SynthRirOptions o{r.param("drr_db"), r.param("predelay_s")};
      return apply_reverb(x, synth_rir(seed, r.param("rt60_s"), x.sample_rate, o));
    }
    case DegradationKind::RirReverb: {
      if (!r.source) throw FormatError("rir_reverb record without a source file");
      return apply_reverb(x, pool.load(*r.source, true));
    }
    case DegradationKind::NcArtifact:
      return apply_nc(x, nc_from_record(r));
  }
  throw FormatError("unknown degradation kind");
}

// One or two distinct degradations (at most one additive), additive last.
inline DegradeResult degrade_chunk(const AudioChunk& chunk, std::uint64_t seed, const DatasetConfig& cfg,
                                   DegradationPool& pool) {
  if (chunk.wave.samples.empty()) throw UsageError("degrade_chunk: empty chunk");
  const std::vector<DegradationKind> pool_kinds = pool.effective_kinds(cfg.kinds);
  Rng rng = make_rng(stable_hash(seed, std::string_view("degrade-chain")));
  const bool two = uniform(rng, 0.0, 1.0) < 0.5;

  std::vector<DegradationKind> chosen;
  std::vector<DegradationKind> avail = pool_kinds;
  chosen.push_back(avail[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(avail.size()) - 1))]);
  if (two) {
    std::vector<DegradationKind> rest;
    for (DegradationKind k : avail)
      if (k != chosen[0] && !(is_additive(k) && is_additive(chosen[0]))) rest.push_back(k);
    if (!rest.empty()) chosen.push_back(rest[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(rest.size()) - 1))]);
  }
  std::stable_partition(chosen.begin(), chosen.end(), [](DegradationKind k) { return !is_additive(k); });

  DegradeResult res;
  for (DegradationKind k : chosen) {
    DegradationRecord r;
    r.kind = k;
    switch (k) {
      case DegradationKind::WhiteNoise:
        r.params["snr_db"] = uniform(rng, cfg.snr_min_db, cfg.snr_max_db);
        break;
      case DegradationKind::ExternalNoise: {
        // never use the chunk's own source file as its noise
        std::vector<std::filesystem::path> files;
        for (const auto& f : pool.noise_files())
          if (f.string() != chunk.source_file) files.push_back(f);
        const double snr = uniform(rng, cfg.snr_min_db, cfg.snr_max_db);
        if (files.empty()) {
          r.kind = DegradationKind::WhiteNoise;
        } else {
          r.source = files[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(files.size()) - 1))].string();
          const Waveform& src = pool.load(*r.source, false);
          if (src.samples.empty()) throw FormatError("empty noise file: " + *r.source);
          r.params["offset_samples"] = static_cast<double>(
              std::uniform_int_distribution<std::size_t>(0, src.size() - 1)(rng));
        }
        r.params["snr_db"] = snr;
        break;
      }
      case DegradationKind::SyntheticReverb:
        r.params["rt60_s"] = uniform(rng, cfg.rt60_min_s, cfg.rt60_max_s);
        r.params["drr_db"] = uniform(rng, cfg.drr_min_db, cfg.drr_max_db);
        r.params["predelay_s"] = uniform(rng, 0.0, cfg.predelay_max_s);
        break;
      case DegradationKind::RirReverb:
        r.source = pool.rir_files()[static_cast<std::size_t>(
                                        uniform_int(rng, 0, static_cast<int>(pool.rir_files().size()) - 1))]
                       .string();
        break;
      case DegradationKind::NcArtifact:
        r.params = nc_to_params(draw_nc_params(stable_hash(seed, std::string_view("nc")), chunk.wave.size(),
                                               chunk.wave.sample_rate));
        break;
    }
    if (is_additive(r.kind)) res.snr_db = r.params.at("snr_db");
    res.records.push_back(std::move(r));
  }
  res.noisy = chunk.wave;
  for (std::size_t i = 0; i < res.records.size(); ++i)
    res.noisy = apply_record(res.noisy, res.records[i], stage_seed(seed, i), pool);
  return res;
}

// Replays a recorded chain on the clean chunk.
inline Waveform replay_degradations(const Waveform& clean, const std::vector<DegradationRecord>& records,
                                    std::uint64_t seed, DegradationPool& pool) {
  Waveform x = clean;
  for (std::size_t i = 0; i < records.size(); ++i) x = apply_record(x, records[i], stage_seed(seed, i), pool);
  return x;
}

// ---------------------------------------------------------------------------
// File-level splits

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split: " + s);
}

struct FileSplit {
  std::vector<std::string> train, val, test;
};

// Seeded Fisher-Yates shuffle, then contiguous 80/10/10-style partition.
// Counts use largest remainders; with >= 3 files every split gets one.
inline FileSplit split_files(std::vector<std::string> files, std::array<double, 3> fractions, std::uint64_t seed) {
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
    throw ConfigError("split_files: fractions must sum to 1");
  if (files.size() < 3) throw ConfigError("split_files: need at least 3 files, got " + std::to_string(files.size()));
  std::sort(files.begin(), files.end());
  Rng rng = make_rng(stable_hash(seed, std::string_view("file-split")));
  for (std::size_t i = files.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(files[i], files[j]);
  }
  const std::size_t n = files.size();
  std::array<std::size_t, 3> cnt{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    cnt[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(cnt[i]);
    used += cnt[i];
  }
  while (used < n) {
    const auto i = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++cnt[i];
    rem[i] = -1;
    ++used;
  }
  for (int i = 0; i < 3; ++i) {
    if (cnt[i] == 0 && fractions[i] > 0) {
      auto big = static_cast<std::size_t>(std::max_element(cnt.begin(), cnt.end()) - cnt.begin());
      --cnt[big];
      ++cnt[i];
    }
  }
  FileSplit s;
  s.train.assign(files.begin(), files.begin() + static_cast<std::ptrdiff_t>(cnt[0]));
  s.val.assign(files.begin() + static_cast<std::ptrdiff_t>(cnt[0]),
               files.begin() + static_cast<std::ptrdiff_t>(cnt[0] + cnt[1]));
  s.test.assign(files.begin() + static_cast<std::ptrdiff_t>(cnt[0] + cnt[1]), files.end());
  return s;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string id;
  std::string clean;  // paths relative to the manifest's directory
  std::string noisy;
  Split split = Split::Train;
  std::vector<DegradationRecord> degradations;
  std::optional<double> snr_db;
  std::uint64_t seed = 0;
  int sample_rate = kDefaultSampleRate;
  std::size_t chunk_len = kDefaultChunkLen;

  bool operator==(const ManifestEntry&) const = default;
};

inline nlohmann::ordered_json to_json(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["clean"] = e.clean;
  j["noisy"] = e.noisy;
  j["split"] = split_name(e.split);
  auto degs = nlohmann::ordered_json::array();
  for (const auto& r : e.degradations) {
    nlohmann::ordered_json d;
    d["kind"] = kind_name(r.kind);
    d["params"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.params) d["params"][k] = v;
    d["source"] = r.source ? nlohmann::ordered_json(*r.source) : nlohmann::ordered_json(nullptr);
    degs.push_back(std::move(d));
  }
  j["degradations"] = std::move(degs);
  j["snr_db"] = e.snr_db ? nlohmann::ordered_json(*e.snr_db) : nlohmann::ordered_json(nullptr);
  j["seed"] = e.seed;
  j["sample_rate"] = e.sample_rate;
  j["chunk_len"] = e.chunk_len;
  return j;
}

inline ManifestEntry entry_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys{"id", "clean", "noisy", "split", "degradations",
                                          "snr_db", "seed", "sample_rate", "chunk_len"};
  if (!j.is_object()) throw FormatError("manifest line is not an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!keys.count(it.key())) throw FormatError("manifest: unexpected key " + it.key());
  for (const auto& k : keys)
    if (!j.contains(k)) throw FormatError("manifest: missing key " + k);
  try {
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.clean = j.at("clean").get<std::string>();
    e.noisy = j.at("noisy").get<std::string>();
    e.split = parse_split(j.at("split").get<std::string>());
    for (const auto& d : j.at("degradations")) {
      DegradationRecord r;
      try {
        r.kind = parse_kind(d.at("kind").get<std::string>());
      } catch (const ConfigError& ex) {
        throw FormatError(ex.what());
      }
      for (auto it = d.at("params").begin(); it != d.at("params").end(); ++it) r.params[it.key()] = it.value().get<double>();
      if (!d.at("source").is_null()) r.source = d.at("source").get<std::string>();
      e.degradations.push_back(std::move(r));
    }
    if (!j.at("snr_db").is_null()) e.snr_db = j.at("snr_db").get<double>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.sample_rate = j.at("sample_rate").get<int>();
    e.chunk_len = j.at("chunk_len").get<std::size_t>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest: ") + ex.what());
  }
}

inline std::string manifest_to_jsonl(const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) out += to_json(e).dump() + "\n";
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write manifest " + path.string());
  const std::string s = manifest_to_jsonl(entries);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    out.push_back(entry_from_json(j));
  }
  return out;
}

inline std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& m, Split s) {
  std::vector<ManifestEntry> out;
  for (const auto& e : m)
    if (e.split == s) out.push_back(e);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset generation

struct DatasetSummary {
  std::size_t source_files = 0;
  std::size_t clean_chunks = 0;
  std::size_t skipped_silent = 0;
  std::map<std::string, std::size_t> per_split;
  std::map<std::string, std::size_t> per_kind;
};

inline DatasetSummary summarize(const std::vector<ManifestEntry>& m) {
  DatasetSummary s;
  std::set<std::string> cleans;
  for (const auto& e : m) {
    ++s.per_split[split_name(e.split)];
    for (const auto& r : e.degradations) ++s.per_kind[kind_name(r.kind)];
    cleans.insert(e.clean);
  }
  s.clean_chunks = cleans.size();
  return s;
}

// Writes out_dir/clean/*.wav, out_dir/noisy/*.wav, out_dir/manifest.jsonl
// and out_dir/sources.json (per-file split and original sample rate).
inline std::vector<ManifestEntry> build_dataset(const DatasetConfig& cfg, DatasetSummary* summary = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (cfg.clean_dirs.empty()) throw ConfigError("dataset: no clean_dirs given");
  const std::vector<fs::path> files = list_wavs(cfg.clean_dirs);
  if (files.empty()) throw ConfigError("dataset: no .wav files found in clean_dirs");
  if (files.size() < 3) throw ConfigError("dataset: need at least 3 clean files for a file-level split");
  DegradationPool pool(cfg);
  if (std::find(cfg.kinds.begin(), cfg.kinds.end(), DegradationKind::RirReverb) != cfg.kinds.end() &&
      !cfg.rir_dirs.empty() && pool.rir_files().empty())
    throw ConfigError("dataset: rir_dirs contain no .wav files");

  std::vector<std::string> names;
  for (const auto& f : files) names.push_back(f.string());
  const FileSplit fsplit = split_files(names, cfg.splits, cfg.global_seed);
  std::map<std::string, Split> split_of;
  for (const auto& f : fsplit.train) split_of[f] = Split::Train;
  for (const auto& f : fsplit.val) split_of[f] = Split::Val;
  for (const auto& f : fsplit.test) split_of[f] = Split::Test;

  const fs::path out(cfg.out_dir);
  fs::create_directories(out / "clean");
  fs::create_directories(out / "noisy");

  struct Job {
    std::size_t file_index;
    AudioChunk chunk;
  };
  std::vector<Job> jobs;
  nlohmann::ordered_json sources = nlohmann::ordered_json::array();
  DatasetSummary sum;
  sum.source_files = files.size();
  for (std::size_t fi = 0; fi < files.size(); ++fi) {
    Waveform w = read_wav(files[fi]);
    const int orig_rate = w.sample_rate;
    if (w.sample_rate != cfg.sample_rate) w = resample(w, cfg.sample_rate);
    sources.push_back({{"path", files[fi].string()}, {"split", split_name(split_of.at(files[fi].string()))},
                       {"original_sample_rate", orig_rate}});
    for (auto& c : chunk(w, cfg.chunk_len, cfg.chunk_len, files[fi].string())) {
      if (mean_power(c.wave.span()) < 1e-12) {
        ++sum.skipped_silent;
        continue;
      }
      jobs.push_back({fi, std::move(c)});
    }
  }

  std::vector<std::vector<ManifestEntry>> results(jobs.size());
  auto work = [&](std::size_t j) {
    const Job& job = jobs[j];
    char buf[64];
    std::snprintf(buf, sizeof buf, "f%05zu_o%09zu", job.file_index, job.chunk.offset_samples);
    const std::string chunk_id = buf;
    const std::string clean_rel = "clean/" + chunk_id + ".wav";
    write_wav(out / clean_rel, job.chunk.wave);
    for (int v = 0; v < cfg.variants_per_chunk; ++v) {
      const std::uint64_t seed = stable_hash(cfg.global_seed, std::string_view(job.chunk.source_file),
                                             static_cast<std::uint64_t>(job.chunk.offset_samples),
                                             static_cast<std::uint64_t>(v));
      DegradeResult d = degrade_chunk(job.chunk, seed, cfg, pool);
      ManifestEntry e;
      e.id = chunk_id + "_v" + std::to_string(v);
      e.clean = clean_rel;
      e.noisy = "noisy/" + e.id + ".wav";
      e.split = split_of.at(job.chunk.source_file);
      e.degradations = std::move(d.records);
      e.snr_db = d.snr_db;
      e.seed = seed;
      e.sample_rate = cfg.sample_rate;
      e.chunk_len = cfg.chunk_len;
      write_wav(out / e.noisy, d.noisy);
      results[j].push_back(std::move(e));
    }
  };
  const std::size_t nthreads = static_cast<std::size_t>(std::max(1, cfg.threads));
  if (nthreads == 1 || jobs.size() < 2) {
    for (std::size_t j = 0; j < jobs.size(); ++j) work(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(nthreads);
    std::vector<std::thread> pool_threads;
    for (std::size_t t = 0; t < nthreads; ++t) {
      pool_threads.emplace_back([&, t] {
        try {
          for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) work(j);
        } catch (...) {
          errors[t] = std::current_exception();
          next = jobs.size();
        }
      });
    }
    for (auto& th : pool_threads) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<ManifestEntry> manifest;
  for (auto& r : results)
    for (auto& e : r) manifest.push_back(std::move(e));
  std::sort(manifest.begin(), manifest.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  write_manifest(out / "manifest.jsonl", manifest);
  {
    std::ofstream sf(out / "sources.json", std::ios::binary | std::ios::trunc);
    sf << sources.dump(2) << "\n";
    if (!sf) throw IoError("cannot write sources.json");
  }
  if (summary) {
    const DatasetSummary s = summarize(manifest);
    summary->source_files = sum.source_files;
    summary->skipped_silent = sum.skipped_silent;
    summary->clean_chunks = s.clean_chunks;
    summary->per_split = s.per_split;
    summary->per_kind = s.per_kind;
  }
  return manifest;
}

// Writes n tone-mix sources of `duration_s` seconds as float32 WAVs.
inline std::vector<std::filesystem::path> write_tone_mix_corpus(const std::filesystem::path& dir, std::size_t n,
                                                                double duration_s, std::uint64_t seed,
                                                                int sample_rate = kDefaultSampleRate) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "tone_%05zu.wav", i);
    const auto p = dir / name;
    write_wav(p, synth_tone_mix(stable_hash(seed, static_cast<std::uint64_t>(i)), duration_s, sample_rate));
    out.push_back(p);
  }
  return out;
}

}  // namespace adnac
