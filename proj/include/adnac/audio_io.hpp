#pragma once

// Mono waveforms, RIFF/WAVE I/O, chunking, resampling and synthetic sources.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "adnac/error.hpp"
#include "adnac/rng.hpp"

namespace adnac {

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 44100;

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
  std::span<const float> span() const { return samples; }
};

inline constexpr int kDefaultSampleRate = 44100;
inline constexpr std::size_t kDefaultChunkLen = 88200;  // 2 s at 44.1 kHz

struct AudioChunk {
  Waveform wave;
  std::string source_file;
  std::size_t offset_samples = 0;
};

enum class WavFormat { Float32, Pcm16 };

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

// Decodes an in-memory RIFF/WAVE image. Multichannel input is averaged down
// to mono; integer PCM maps to [-1, 1) by dividing by 2^(bits-1).
inline Waveform decode_wav(std::span<const unsigned char> bytes, const std::string& what = "<memory>") {
  using detail::read_u16;
  using detail::read_u32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw FormatError(what + ": not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t tag = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* h = bytes.data() + pos;
    const std::uint32_t len = read_u32(h + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(h, "fmt ", 4) == 0) {
      if (len < 16 || body + len > bytes.size()) throw FormatError(what + ": truncated fmt chunk");
      tag = read_u16(h + 8);
      channels = read_u16(h + 10);
      rate = read_u32(h + 12);
      block_align = read_u16(h + 20);
      bits = read_u16(h + 22);
      if (tag == 0xFFFE) {
        if (len < 40) throw FormatError(what + ": truncated WAVE_FORMAT_EXTENSIBLE header");
        tag = read_u16(h + 8 + 24);  // first two bytes of the subformat GUID
      }
      have_fmt = true;
    } else if (std::memcmp(h, "data", 4) == 0) {
      data = h + 8;
      // tolerate writers that leave the data size unset or overlong
      data_len = std::min<std::size_t>(len, bytes.size() - body);
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt) throw FormatError(what + ": missing fmt chunk");
  if (data == nullptr) throw FormatError(what + ": missing data chunk");
  if (channels == 0 || rate == 0) throw FormatError(what + ": zero channels or sample rate");

  const bool is_pcm = tag == 1 && (bits == 16 || bits == 24 || bits == 32);
  const bool is_float = tag == 3 && bits == 32;
  if (!is_pcm && !is_float)
    throw UnsupportedError(what + ": unsupported encoding (format tag " + std::to_string(tag) + ", " +
                           std::to_string(bits) + " bits)");
  const std::size_t bps = bits / 8;
  if (block_align != bps * channels) throw FormatError(what + ": inconsistent block alignment");

  const std::size_t frames = data_len / block_align;
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(frames);
  const double scale = 1.0 / std::ldexp(1.0, bits - 1);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + f * block_align + c * bps;
      double v;
      if (is_float) {
        float x;
        std::memcpy(&x, p, 4);
        v = x;
      } else if (bits == 16) {
        v = static_cast<std::int16_t>(read_u16(p)) * scale;
      } else if (bits == 24) {
        std::int32_t x = std::int32_t(p[0]) | (std::int32_t(p[1]) << 8) | (std::int32_t(p[2]) << 16);
        if (x & 0x800000) x -= 0x1000000;
        v = x * scale;
      } else {
        v = static_cast<std::int32_t>(read_u32(p)) * scale;
      }
      acc = c == 0 ? v : acc + v;
    }
    w.samples[f] = channels == 1 ? static_cast<float>(acc) : static_cast<float>(acc / channels);
  }
  for (float s : w.samples)
    if (!std::isfinite(s)) throw FormatError(what + ": non-finite sample");
  return w;
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path.string());
}

inline std::int16_t to_pcm16(float x) {
  const double c = std::clamp(static_cast<double>(x), -1.0, 32767.0 / 32768.0);
  return static_cast<std::int16_t>(std::lround(c * 32768.0));  // lround: half away from zero
}

inline std::string encode_wav(const Waveform& w, WavFormat fmt = WavFormat::Float32) {
  using detail::put_u16;
  using detail::put_u32;
  for (float s : w.samples)
    if (!std::isfinite(s)) throw NumericError("write_wav: non-finite sample");
  const std::uint16_t bits = fmt == WavFormat::Float32 ? 32 : 16;
  const std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * (bits / 8));
  std::string s;
  s.reserve(44 + data_len);
  s += "RIFF";
  put_u32(s, 36 + data_len);
  s += "WAVEfmt ";
  put_u32(s, 16);
  put_u16(s, fmt == WavFormat::Float32 ? 3 : 1);
  put_u16(s, 1);
  put_u32(s, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(s, static_cast<std::uint32_t>(w.sample_rate) * (bits / 8));
  put_u16(s, bits / 8);
  put_u16(s, bits);
  s += "data";
  put_u32(s, data_len);
  for (float x : w.samples) {
    if (fmt == WavFormat::Float32) {
      std::uint32_t u;
      std::memcpy(&u, &x, 4);
      put_u32(s, u);
    } else {
      put_u16(s, static_cast<std::uint16_t>(to_pcm16(x)));
    }
  }
  return s;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w, WavFormat fmt = WavFormat::Float32) {
  const std::string bytes = encode_wav(w, fmt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

// Fixed-length windows; a trailing remainder shorter than chunk_len is dropped.
inline std::vector<AudioChunk> chunk(const Waveform& w, std::size_t chunk_len, std::size_t hop = 0,
                                     const std::string& source_file = {}) {
  if (chunk_len == 0) throw UsageError("chunk: chunk_len must be positive");
  if (hop == 0) hop = chunk_len;
  std::vector<AudioChunk> out;
  for (std::size_t off = 0; off + chunk_len <= w.size(); off += hop) {
    AudioChunk c;
    c.wave.sample_rate = w.sample_rate;
    c.wave.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(off),
                          w.samples.begin() + static_cast<std::ptrdiff_t>(off + chunk_len));
    c.source_file = source_file;
    c.offset_samples = off;
    out.push_back(std::move(c));
  }
  return out;
}

struct ResampleOptions {
  int taps_per_side = 64;
  double kaiser_beta = 8.6;
};

// Kaiser-windowed sinc resampler, evaluated polyphase. Each phase's taps are
// normalized to unit sum so DC passes exactly.
inline Waveform resample(const Waveform& w, int target_rate, ResampleOptions opt = {}) {
  if (target_rate <= 0 || w.sample_rate <= 0) throw UsageError("resample: rates must be positive");
  if (target_rate == w.sample_rate) return w;
  const std::int64_t g = std::gcd(static_cast<std::int64_t>(target_rate), static_cast<std::int64_t>(w.sample_rate));
  const std::int64_t up = target_rate / g;
  const std::int64_t down = w.sample_rate / g;
  const double scale = std::min(1.0, static_cast<double>(target_rate) / w.sample_rate);
  const int half = static_cast<int>(std::ceil(opt.taps_per_side / scale));
  const double i0_beta = std::cyl_bessel_i(0.0, opt.kaiser_beta);

  auto phase_taps = [&](std::int64_t phase, std::vector<double>& taps) {
    const double frac = static_cast<double>(phase) / static_cast<double>(up);
    taps.resize(2 * static_cast<std::size_t>(half));
    double total = 0;
    for (int j = -half + 1; j <= half; ++j) {
      const double x = j - frac;
      const double u = x / half;
      double h = 0;
      if (std::abs(u) <= 1.0) {
        const double arg = std::numbers::pi * scale * x;
        const double sinc = x == 0.0 ? 1.0 : std::sin(arg) / arg;
        h = scale * sinc * std::cyl_bessel_i(0.0, opt.kaiser_beta * std::sqrt(1.0 - u * u)) / i0_beta;
      }
      taps[static_cast<std::size_t>(j + half - 1)] = h;
      total += h;
    }
    for (double& t : taps) t /= total;
  };

  const bool tabulate = up <= 2048;
  std::vector<std::vector<double>> table;
  if (tabulate) {
    table.resize(static_cast<std::size_t>(up));
    for (std::int64_t p = 0; p < up; ++p) phase_taps(p, table[static_cast<std::size_t>(p)]);
  }

  const std::int64_t n_in = static_cast<std::int64_t>(w.size());
  const std::int64_t n_out = (n_in * up + down / 2) / down;
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<std::size_t>(n_out));
  std::vector<double> scratch;
  for (std::int64_t n = 0; n < n_out; ++n) {
    const std::int64_t num = n * down;
    const std::int64_t base = num / up;
    const std::int64_t phase = num % up;
    const std::vector<double>* taps;
    if (tabulate) {
      taps = &table[static_cast<std::size_t>(phase)];
    } else {
      phase_taps(phase, scratch);
      taps = &scratch;
    }
    double acc = 0;
    for (int j = -half + 1; j <= half; ++j) {
      const std::int64_t i = base + j;
      if (i < 0 || i >= n_in) continue;
      acc += (*taps)[static_cast<std::size_t>(j + half - 1)] * w.samples[static_cast<std::size_t>(i)];
    }
    out.samples[static_cast<std::size_t>(n)] = static_cast<float>(acc);
  }
  return out;
}

struct ToneMixInfo {
  double f0_hz = 0;
  std::vector<int> harmonics;
};

// Deterministic stand-in for a clean music source: 3-6 consecutive
// harmonics of a random fundamental in [110, 880] Hz, each with its own
// 2-8 Hz amplitude modulation, peak-normalized to 0.7.
inline Waveform synth_tone_mix(std::uint64_t seed, double duration_s, int sample_rate = kDefaultSampleRate,
                               ToneMixInfo* info = nullptr) {
  if (!(duration_s > 0)) throw UsageError("synth_tone_mix: duration must be positive");
  if (sample_rate <= 0) throw UsageError("synth_tone_mix: sample rate must be positive");
  Rng rng = make_rng(stable_hash(seed, std::string_view("tone-mix")));
  const double f0 = uniform(rng, 110.0, 880.0);
  const int n_harm = uniform_int(rng, 3, 6);
  struct Partial {
    double freq, amp, phase, am_rate, am_depth, am_phase;
  };
  std::vector<Partial> partials;
  ToneMixInfo local;
  local.f0_hz = f0;
  for (int k = 1; k <= n_harm; ++k) {
    Partial p{};
    p.freq = k * f0;
    p.amp = uniform(rng, 0.3, 1.0) / k;
    p.phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    p.am_rate = uniform(rng, 2.0, 8.0);
    p.am_depth = uniform(rng, 0.2, 0.8);
    p.am_phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    if (p.freq < 0.45 * sample_rate) {
      partials.push_back(p);
      local.harmonics.push_back(k);
    }
  }
  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));
  std::vector<double> buf(n, 0.0);
  for (const Partial& p : partials) {
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / sample_rate;
      const double env = 1.0 + p.am_depth * std::sin(2 * std::numbers::pi * p.am_rate * t + p.am_phase);
      buf[i] += p.amp * env * std::sin(2 * std::numbers::pi * p.freq * t + p.phase);
    }
  }
  double peak = 0;
  for (double v : buf) peak = std::max(peak, std::abs(v));
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(n);
  const double g = peak > 0 ? 0.7 / peak : 0.0;
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = static_cast<float>(buf[i] * g);
  if (info) *info = local;
  return w;
}

}  // namespace adnac
