#include <catch_amalgamated.hpp>

#include <complex>
#include <cstring>
#include <filesystem>
#include <numbers>

#include "adnac/audio_io.hpp"

using namespace adnac;
using Catch::Approx;

namespace {

std::filesystem::path temp_dir() {
  auto d = std::filesystem::temp_directory_path() / "adnac_test_audio_io";
  std::filesystem::create_directories(d);
  return d;
}

// Minimal PCM16 writer so decode is checked against bytes we build by hand.
std::string pcm16_wav(const std::vector<std::int16_t>& s, int channels, int rate) {
  std::string b = "RIFF";
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xFF));
  };
  auto u16 = [&](std::uint16_t v) {
    b.push_back(char(v & 0xFF));
    b.push_back(char(v >> 8));
  };
  u32(36 + static_cast<std::uint32_t>(s.size() * 2));
  b += "WAVEfmt ";
  u32(16);
  u16(1);
  u16(static_cast<std::uint16_t>(channels));
  u32(static_cast<std::uint32_t>(rate));
  u32(static_cast<std::uint32_t>(rate * channels * 2));
  u16(static_cast<std::uint16_t>(channels * 2));
  u16(16);
  b += "data";
  u32(static_cast<std::uint32_t>(s.size() * 2));
  for (auto v : s) u16(static_cast<std::uint16_t>(v));
  return b;
}

Waveform decode_str(const std::string& s) {
  return decode_wav(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

// Magnitude DFT at integer bin k (direct sum, the oracle). Optional Hann
// taper keeps leakage from strong partials out of the noise-floor estimate.
double dft_mag(const std::vector<float>& x, std::size_t k, bool hann = false) {
  std::complex<double> acc = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = hann ? 0.5 * (1 - std::cos(2 * std::numbers::pi * i / n)) : 1.0;
    acc += w * static_cast<double>(x[i]) * std::polar(1.0, -2 * std::numbers::pi * k * i / n);
  }
  return std::abs(acc);
}

}  // namespace

TEST_CASE("pcm16 decode maps integers to [-1, 1)") {
  auto w = decode_str(pcm16_wav({16384, -32768, 0, 32767}, 1, 22050));
  REQUIRE(w.sample_rate == 22050);
  REQUIRE(w.size() == 4);
  CHECK(w.samples[0] == 0.5f);
  CHECK(w.samples[1] == -1.0f);
  CHECK(w.samples[2] == 0.0f);
  CHECK(w.samples[3] == Approx(32767.0 / 32768.0));
}

TEST_CASE("multichannel input is averaged to mono") {
  auto w = decode_str(pcm16_wav({16384, 0, -16384, -16384}, 2, 44100));
  REQUIRE(w.size() == 2);
  CHECK(w.samples[0] == 0.25f);
  CHECK(w.samples[1] == -0.5f);
}

TEST_CASE("pcm16 encode rounds and saturates") {
  CHECK(to_pcm16(0.5f) == 16384);
  CHECK(to_pcm16(1.5f) == 32767);
  CHECK(to_pcm16(-1.5f) == -32768);
  CHECK(to_pcm16(-1.0f) == -32768);
  // half-away-from-zero: 0.5/32768 -> 1
  CHECK(to_pcm16(static_cast<float>(0.5 / 32768.0)) == 1);
  CHECK(to_pcm16(static_cast<float>(-0.5 / 32768.0)) == -1);
}

TEST_CASE("float32 wav round trip is bit identical") {
  Waveform w;
  w.sample_rate = 44100;
  for (int i = 0; i < 4410; ++i) w.samples.push_back(static_cast<float>(0.8 * std::sin(2 * std::numbers::pi * 440 * i / 44100.0)));
  w.samples.push_back(1e-38f);
  w.samples.push_back(-0.0f);
  auto path = temp_dir() / "tone.wav";
  write_wav(path, w);
  auto r = read_wav(path);
  REQUIRE(r.sample_rate == 44100);
  REQUIRE(r.size() == w.size());
  CHECK(std::memcmp(r.samples.data(), w.samples.data(), w.size() * sizeof(float)) == 0);
}

TEST_CASE("pcm16 write then read is within one quantization step") {
  Waveform w;
  for (int i = 0; i < 1000; ++i) w.samples.push_back(static_cast<float>(std::sin(i * 0.01) * 0.9));
  auto path = temp_dir() / "pcm.wav";
  write_wav(path, w, WavFormat::Pcm16);
  auto r = read_wav(path);
  REQUIRE(r.size() == w.size());
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(r.samples[i] - w.samples[i]) <= 0.5 / 32768.0 + 1e-9);
}

TEST_CASE("malformed and unsupported wavs are rejected") {
  CHECK_THROWS_AS(decode_str("RIFF1234WAVE"), FormatError);
  CHECK_THROWS_AS(decode_str("not a wav file at all, not even close"), FormatError);
  std::string adpcm = pcm16_wav({1, 2}, 1, 8000);
  adpcm[20] = 2;  // format tag: MS ADPCM
  CHECK_THROWS_AS(decode_str(adpcm), UnsupportedError);
  std::string truncated = pcm16_wav({1, 2, 3, 4}, 1, 8000);
  truncated.resize(30);
  CHECK_THROWS_AS(decode_str(truncated), FormatError);
  CHECK_THROWS_AS(read_wav(temp_dir() / "does_not_exist.wav"), IoError);
  CHECK_THROWS_AS(write_wav(temp_dir() / "no_such_dir" / "x.wav", Waveform{{0.f}, 44100}), IoError);
}

TEST_CASE("chunking keeps full windows only") {
  auto make = [](std::size_t n) {
    Waveform w;
    w.samples.assign(n, 0.f);
    return w;
  };
  auto c = chunk(make(220500), kDefaultChunkLen);
  REQUIRE(c.size() == 2);
  CHECK(c[0].offset_samples == 0);
  CHECK(c[1].offset_samples == 88200);
  CHECK(c[1].wave.size() == kDefaultChunkLen);
  CHECK(chunk(make(88200), kDefaultChunkLen).size() == 1);
  CHECK(chunk(make(88199), kDefaultChunkLen).empty());
  CHECK_THROWS_AS(chunk(make(10), 0), UsageError);
}

TEST_CASE("chunk count property") {
  Rng rng = make_rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t len = static_cast<std::size_t>(uniform_int(rng, 0, 500));
    const std::size_t cl = static_cast<std::size_t>(uniform_int(rng, 1, 120));
    const std::size_t hop = static_cast<std::size_t>(uniform_int(rng, 1, 120));
    Waveform w;
    w.samples.assign(len, 0.f);
    const std::size_t expect = len >= cl ? (len - cl) / hop + 1 : 0;
    REQUIRE(chunk(w, cl, hop).size() == expect);
  }
}

TEST_CASE("resample identity, DC and length") {
  Waveform w = synth_tone_mix(5, 0.1);
  auto same = resample(w, w.sample_rate);
  CHECK(std::memcmp(same.samples.data(), w.samples.data(), w.size() * sizeof(float)) == 0);

  Waveform dc;
  dc.samples.assign(44100, 1.0f);
  auto r = resample(dc, 10000);
  REQUIRE(r.size() == 10000);
  CHECK(r.sample_rate == 10000);
  for (std::size_t i = 200; i + 200 < r.size(); ++i) REQUIRE(std::abs(r.samples[i] - 1.0f) < 1e-3);

  Waveform odd;
  odd.samples.assign(12345, 0.f);
  CHECK(resample(odd, 16000).size() == static_cast<std::size_t>(std::llround(12345.0 * 16000 / 44100)));
}

TEST_CASE("resampled 1 kHz tone keeps its spectral peak") {
  Waveform w;
  for (int i = 0; i < 44100; ++i) w.samples.push_back(static_cast<float>(std::sin(2 * std::numbers::pi * 1000 * i / 44100.0)));
  auto r = resample(w, 10000);
  REQUIRE(r.size() == 10000);
  // 1 s at 10 kHz: bin k is k Hz; search up to 5 kHz in 10 Hz steps then refine
  std::size_t best = 0;
  double bv = -1;
  for (std::size_t k = 10; k < 5000; k += 10) {
    const double m = dft_mag(r.samples, k);
    if (m > bv) bv = m, best = k;
  }
  for (std::size_t k = best - 10; k <= best + 10; ++k) {
    const double m = dft_mag(r.samples, k);
    if (m > bv) bv = m, best = k;
  }
  CHECK(std::abs(static_cast<double>(best) - 1000.0) <= 1.0);
}

TEST_CASE("resample round trip on band-limited signal") {
  Waveform w;
  w.sample_rate = 44100;
  for (int i = 0; i < 44100; ++i) {
    const double t = i / 44100.0;
    w.samples.push_back(static_cast<float>(0.5 * std::sin(2 * std::numbers::pi * 440 * t) +
                                           0.3 * std::sin(2 * std::numbers::pi * 1234 * t + 1.0) +
                                           0.1 * std::sin(2 * std::numbers::pi * 3100 * t)));
  }
  auto back = resample(resample(w, 10000), 44100);
  REQUIRE(back.size() == w.size());
  const std::size_t edge = 2000;
  double num = 0, den = 0;
  for (std::size_t i = edge; i + edge < w.size(); ++i) {
    const double d = back.samples[i] - w.samples[i];
    num += d * d;
    den += static_cast<double>(w.samples[i]) * w.samples[i];
  }
  CHECK(std::sqrt(num / den) < 1e-2);
}

TEST_CASE("tone mix is deterministic, peak normalized and harmonic") {
  ToneMixInfo info;
  auto a = synth_tone_mix(42, 1.0, 44100, &info);
  auto b = synth_tone_mix(42, 1.0, 44100);
  REQUIRE(a.samples == b.samples);
  CHECK(synth_tone_mix(43, 1.0).samples != a.samples);
  float peak = 0;
  for (float v : a.samples) peak = std::max(peak, std::abs(v));
  CHECK(std::abs(peak - 0.7f) <= 1e-6f);
  CHECK(info.f0_hz >= 110.0);
  CHECK(info.f0_hz <= 880.0);
  CHECK(info.harmonics.size() >= 3);
  CHECK(info.harmonics.size() <= 6);

  // 1 s signal: bin k is k Hz. Harmonic bins must tower over the floor
  // measured away from every harmonic (and its AM sidebands).
  const std::size_t n_bins = 6000;
  std::vector<double> mag(n_bins);
  for (std::size_t k = 0; k < n_bins; ++k) mag[k] = dft_mag(a.samples, k, true);
  auto near_harmonic = [&](double f, double tol) {
    for (int h = 1; h <= 6; ++h)
      if (std::abs(f - h * info.f0_hz) <= tol) return true;
    return false;
  };
  double floor = 0;
  for (std::size_t k = 20; k < n_bins; ++k)
    if (!near_harmonic(static_cast<double>(k), 30.0)) floor = std::max(floor, mag[k]);
  for (int h : info.harmonics) {
    const auto c = static_cast<std::size_t>(std::llround(h * info.f0_hz));
    double peak_h = 0;
    for (std::size_t k = c - 1; k <= c + 1; ++k) peak_h = std::max(peak_h, mag[k]);
    CHECK(20 * std::log10(peak_h / floor) >= 40.0);
  }
}
