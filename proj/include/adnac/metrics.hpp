#pragma once

// Objective metrics (SNR, SI-SDR, STOI) and the evaluation runner that scores
// a uniform random subset of test pairs before and after denoising.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "adnac/audio_io.hpp"
#include "adnac/degrade.hpp"
#include "adnac/losses.hpp"
#include "adnac/rng.hpp"
#include "adnac/spectral.hpp"
#include "json.hpp"

namespace adnac {

inline constexpr double kMetricEps = 1e-12;

template <typename A, typename B>
double snr_db(std::span<const A> clean, std::span<const B> test) {
  if (clean.size() != test.size()) throw ShapeError("snr: length mismatch");
  double ps = 0, pn = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double c = static_cast<double>(clean[i]), d = static_cast<double>(test[i]) - c;
    ps += c * c;
    pn += d * d;
  }
  if (!(ps > 0)) throw DegenerateInputError("snr: clean signal has zero power");
  const double n = static_cast<double>(clean.size());
  return std::clamp(10.0 * std::log10((ps / n + kMetricEps) / (pn / n + kMetricEps)), -kDbClamp, kDbClamp);
}

template <typename T>
double snr_db(const std::vector<T>& clean, const std::vector<T>& test) {
  return snr_db(std::span<const T>(clean), std::span<const T>(test));
}

// ---- STOI -----------------------------------------------------------------

struct StoiConfig {
  ThirdOctaveConfig tob;        // 10 kHz, 256-sample frames, hop 128, 512-point FFT, 15 bands from 150 Hz
  std::size_t segment = 30;     // frames per intermediate intelligibility segment
  double beta_db = -15.0;       // lower SDR bound for clipping
  double dyn_range_db = 40.0;   // silent-frame threshold below the loudest frame
};

namespace detail {

inline constexpr double kStoiEps = std::numeric_limits<double>::epsilon();

// Frame starts 0, K, 2K, ... strictly below len - N, as in the reference
// implementation: a frame ending exactly at the last sample is not used.
inline std::size_t reference_frame_count(std::size_t len, std::size_t N, std::size_t K) {
  return len > N ? (len - N + K - 1) / K : 0;
}

// Drops frames whose clean energy is more than dyn_range below the loudest
// frame, then overlap-adds the surviving windowed frames of both signals.
inline std::pair<std::vector<double>, std::vector<double>> remove_silent_frames(const std::vector<double>& x,
                                                                                 const std::vector<double>& y,
                                                                                 const StoiConfig& cfg) {
  const std::size_t N = cfg.tob.frame_len, K = cfg.tob.hop;
  const auto w = stoi_window(N);
  const std::size_t frames = reference_frame_count(x.size(), N, K);
  std::vector<double> energy(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double s = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const double v = w[n] * x[f * K + n];
      s += v * v;
    }
    energy[f] = 20.0 * std::log10(std::sqrt(s) + kStoiEps);
  }
  const double peak = frames ? *std::max_element(energy.begin(), energy.end()) : 0.0;
  std::vector<std::size_t> keep;
  for (std::size_t f = 0; f < frames; ++f)
    if (energy[f] > peak - cfg.dyn_range_db) keep.push_back(f);
  const std::size_t out_len = keep.empty() ? 0 : (keep.size() - 1) * K + N;
  std::vector<double> xs(out_len, 0.0), ys(out_len, 0.0);
  for (std::size_t i = 0; i < keep.size(); ++i)
    for (std::size_t n = 0; n < N; ++n) {
      xs[i * K + n] += w[n] * x[keep[i] * K + n];
      ys[i * K + n] += w[n] * y[keep[i] * K + n];
    }
  return {xs, ys};
}

}  // namespace detail

// Short-time objective intelligibility of `test` against `clean`.
template <typename A, typename B>
double stoi(std::span<const A> clean, std::span<const B> test, int sample_rate, const StoiConfig& cfg = {}) {
  if (clean.size() != test.size()) throw ShapeError("stoi: length mismatch");
  auto to10k = [&](auto sig) {
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(sig.begin(), sig.end());
    if (sample_rate != cfg.tob.sample_rate) w = resample(w, cfg.tob.sample_rate);
    return std::vector<double>(w.samples.begin(), w.samples.end());
  };
  std::vector<double> x, y;
  if (sample_rate == cfg.tob.sample_rate) {
    x.assign(clean.begin(), clean.end());
    y.assign(test.begin(), test.end());
  } else {
    x = to10k(clean);
    y = to10k(test);
  }
  const double min_len = 0.384 * cfg.tob.sample_rate;
  if (static_cast<double>(x.size()) < min_len) throw DegenerateInputError("stoi: signals shorter than 384 ms");
  auto [xs, ys] = detail::remove_silent_frames(x, y, cfg);
  const std::size_t n_frames = detail::reference_frame_count(xs.size(), cfg.tob.frame_len, cfg.tob.hop);
  if (n_frames < cfg.segment)
    throw DegenerateInputError("stoi: fewer than " + std::to_string(cfg.segment) + " non-silent frames");
  const std::size_t used = cfg.tob.frame_len + (n_frames - 1) * cfg.tob.hop;
  const auto bands = third_octave_bands(cfg.tob);
  const Eigen::MatrixXd X = third_octave_energies(std::span<const double>(xs.data(), used), cfg.tob, &bands);
  const Eigen::MatrixXd Y = third_octave_energies(std::span<const double>(ys.data(), used), cfg.tob, &bands);
  const Eigen::Index J = X.rows(), M = X.cols(), S = static_cast<Eigen::Index>(cfg.segment);
  const double clip = 1.0 + std::pow(10.0, -cfg.beta_db / 20.0);
  const double eps = detail::kStoiEps;
  double total = 0;
  std::size_t count = 0;
  for (Eigen::Index m = S; m <= M; ++m) {
    for (Eigen::Index j = 0; j < J; ++j) {
      Eigen::VectorXd xv = X.row(j).segment(m - S, S).transpose();
      Eigen::VectorXd yv = Y.row(j).segment(m - S, S).transpose();
      const double alpha = xv.norm() / (yv.norm() + eps);
      Eigen::VectorXd yp = (yv * alpha).cwiseMin(xv * clip);
      yp.array() -= yp.mean();
      xv.array() -= xv.mean();
      yp /= yp.norm() + eps;
      xv /= xv.norm() + eps;
      total += yp.dot(xv);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

template <typename T>
double stoi(const std::vector<T>& clean, const std::vector<T>& test, int sample_rate, const StoiConfig& cfg = {}) {
  return stoi(std::span<const T>(clean), std::span<const T>(test), sample_rate, cfg);
}

// ---- evaluation -----------------------------------------------------------

struct MetricValues {
  double snr_db = 0;
  double si_sdr_db = 0;
  double stoi = 0;
};

struct MetricRow {
  std::string id;
  MetricValues noisy;
  MetricValues denoised;
};

struct MetricReport {
  std::vector<MetricRow> rows;  // sorted by id
  MetricValues mean_noisy;
  MetricValues mean_denoised;
  std::size_t n_requested = 0;
  std::size_t n_available = 0;
  std::size_t n_selected = 0;
  std::size_t n_errors = 0;
  std::vector<std::string> errors;
  std::uint64_t subset_seed = 0;
};

struct EvalPair {
  Waveform clean;
  Waveform noisy;
};

using PairLoader = std::function<EvalPair(const ManifestEntry&)>;
using DenoiseFn = std::function<Waveform(const Waveform&)>;

inline PairLoader manifest_pair_loader(const std::filesystem::path& dir) {
  return [dir](const ManifestEntry& e) { return EvalPair{read_wav(dir / e.clean), read_wav(dir / e.noisy)}; };
}

// Uniform subset without replacement: a seeded partial Fisher-Yates shuffle.
inline std::vector<std::size_t> select_subset(std::size_t available, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t k = std::min(n, available);
  Rng rng = make_rng(stable_hash(seed, std::string_view("eval-subset")));
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, available - 1)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline MetricValues score(const Waveform& clean, const Waveform& test) {
  if (clean.sample_rate != test.sample_rate) throw ShapeError("score: sample rates differ");
  MetricValues v;
  v.snr_db = snr_db(clean.span(), test.span());
  v.si_sdr_db = si_sdr_db(test.span(), clean.span());
  v.stoi = stoi(clean.span(), test.span(), clean.sample_rate);
  return v;
}

inline MetricReport evaluate(const std::vector<ManifestEntry>& test_entries, const PairLoader& load,
                             const DenoiseFn& denoise, std::size_t n, std::uint64_t seed) {
  if (test_entries.empty()) throw ConfigError("evaluate: test split is empty");
  MetricReport rep;
  rep.n_requested = n;
  rep.n_available = test_entries.size();
  rep.subset_seed = seed;
  const auto subset = select_subset(test_entries.size(), n, seed);
  rep.n_selected = subset.size();
  for (std::size_t i : subset) {
    const auto& e = test_entries[i];
    try {
      EvalPair p = load(e);
      if (p.clean.samples.size() != p.noisy.samples.size()) throw ShapeError("clean/noisy length mismatch");
      Waveform d = denoise(p.noisy);
      rep.rows.push_back({e.id, score(p.clean, p.noisy), score(p.clean, d)});
    } catch (const Error& err) {
      rep.errors.push_back(e.id + ": " + err.what());
    }
  }
  rep.n_errors = rep.errors.size();
  std::sort(rep.rows.begin(), rep.rows.end(), [](const MetricRow& a, const MetricRow& b) { return a.id < b.id; });
  if (rep.rows.empty()) throw DegenerateInputError("evaluate: every selected pair failed; first: " + rep.errors.front());
  const double k = static_cast<double>(rep.rows.size());
  for (const auto& r : rep.rows) {
    rep.mean_noisy.snr_db += r.noisy.snr_db / k;
    rep.mean_noisy.si_sdr_db += r.noisy.si_sdr_db / k;
    rep.mean_noisy.stoi += r.noisy.stoi / k;
    rep.mean_denoised.snr_db += r.denoised.snr_db / k;
    rep.mean_denoised.si_sdr_db += r.denoised.si_sdr_db / k;
    rep.mean_denoised.stoi += r.denoised.stoi / k;
  }
  return rep;
}

inline nlohmann::ordered_json report_json(const MetricReport& r) {
  auto mv = [](const MetricValues& v) {
    return nlohmann::ordered_json{{"snr_db", v.snr_db}, {"si_sdr_db", v.si_sdr_db}, {"stoi", v.stoi}};
  };
  nlohmann::ordered_json j;
  j["n_requested"] = r.n_requested;
  j["n_available"] = r.n_available;
  j["n_selected"] = r.n_selected;
  j["n_files"] = r.rows.size();
  j["n_errors"] = r.n_errors;
  j["errors"] = r.errors;
  j["subset_seed"] = r.subset_seed;
  j["mean"] = {{"noisy", mv(r.mean_noisy)}, {"denoised", mv(r.mean_denoised)}};
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) rows.push_back({{"id", row.id}, {"noisy", mv(row.noisy)}, {"denoised", mv(row.denoised)}});
  j["rows"] = rows;
  return j;
}

// Aligned text table in the layout of the usual objective-results table.
// SI-SDR stands in for PESQ, which is not implemented.
inline std::string report_table(const MetricReport& r) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-14s %12s %8s %9s\n", "Method", "SI-SDR [dB]*", "STOI", "SNR [dB]");
  out += buf;
  auto row = [&](const char* name, const MetricValues& v) {
    std::snprintf(buf, sizeof buf, "%-14s %12.2f %8.3f %9.2f\n", name, v.si_sdr_db, v.stoi, v.snr_db);
    out += buf;
  };
  row("Noisy Input", r.mean_noisy);
  row("Proposed", r.mean_denoised);
  std::snprintf(buf, sizeof buf, "n = %zu of %zu test pairs (seed %llu), arithmetic means\n", r.rows.size(),
                r.n_available, static_cast<unsigned long long>(r.subset_seed));
  out += buf;
  out += "* SI-SDR is reported in place of PESQ\n";
  if (r.n_errors) out += std::to_string(r.n_errors) + " pair(s) skipped because of errors\n";
  return out;
}

}  // namespace adnac
