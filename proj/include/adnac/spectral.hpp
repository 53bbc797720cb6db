#pragma once

// STFT, mel filterbank / mel-spectrogram (plain and differentiable) and the
// one-third-octave analysis used by STOI.

#include <Eigen/Core>
#include <unsupported/Eigen/FFT>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include "adnac/audio_io.hpp"
#include "adnac/autodiff.hpp"
#include "adnac/error.hpp"

namespace adnac {

struct StftConfig {
  std::size_t n_fft = 1024;
  std::size_t hop = 256;
  bool center = true;  // reflect-pad n_fft/2 on both sides

  void validate() const {
    if (n_fft < 2 || (n_fft & (n_fft - 1)) != 0) throw ConfigError("stft: n_fft must be a power of two >= 2");
    if (hop == 0 || hop > n_fft) throw ConfigError("stft: hop must be in [1, n_fft]");
  }
  std::size_t bins() const { return n_fft / 2 + 1; }
};

struct MelConfig {
  StftConfig stft;
  std::size_t n_mels = 80;
  double f_min = 0.0;
  double f_max = -1.0;  // <= 0 means sample_rate / 2
  int sample_rate = kDefaultSampleRate;
  bool log_mel = false;
  double log_eps = 1e-5;

  double fmax_hz() const { return f_max > 0 ? f_max : sample_rate / 2.0; }
  void validate() const {
    stft.validate();
    if (n_mels < 1) throw ConfigError("mel: n_mels must be >= 1");
    if (sample_rate <= 0) throw ConfigError("mel: sample rate must be positive");
    if (!(f_min >= 0 && f_min < fmax_hz() && fmax_hz() <= sample_rate / 2.0))
      throw ConfigError("mel: need 0 <= f_min < f_max <= sample_rate/2");
  }
};

struct MelSpec {
  Eigen::MatrixXd values;  // n_mels x frames
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Symmetric Hann window, w[n] = 0.5 (1 - cos(2 pi n / (N - 1))).
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / (n - 1.0)));
  return w;
}

// Index into a signal extended by mirror reflection (no edge repeat),
// bouncing as often as needed so any length >= 1 works.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t len) {
  if (len == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (len - 1));
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(len) ? m : period - m);
}

inline std::size_t stft_frame_count(std::size_t len, const StftConfig& cfg) {
  const std::size_t padded = cfg.center ? len + cfg.n_fft : len;
  if (padded < cfg.n_fft) return 0;
  return 1 + (padded - cfg.n_fft) / cfg.hop;
}

namespace detail {

// Windowed frame `f` of the (optionally padded) signal.
template <typename Sample>
void load_frame(std::span<const Sample> x, const StftConfig& cfg, const std::vector<double>& win, std::size_t f,
                std::vector<double>& out) {
  const std::ptrdiff_t pad = cfg.center ? static_cast<std::ptrdiff_t>(cfg.n_fft / 2) : 0;
  const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f * cfg.hop) - pad;
  out.resize(cfg.n_fft);
  for (std::size_t n = 0; n < cfg.n_fft; ++n) {
    const std::ptrdiff_t i = start + static_cast<std::ptrdiff_t>(n);
    const double v = cfg.center ? static_cast<double>(x[reflect_index(i, x.size())]) : static_cast<double>(x[i]);
    out[n] = win[n] * v;
  }
}

}  // namespace detail

// Complex spectrum, bins x frames.
template <typename Sample>
Eigen::MatrixXcd stft(std::span<const Sample> x, const StftConfig& cfg) {
  cfg.validate();
  if (x.empty()) throw UsageError("stft: empty signal");
  const std::size_t frames = stft_frame_count(x.size(), cfg);
  const std::size_t bins = cfg.bins();
  Eigen::MatrixXcd out(static_cast<Eigen::Index>(bins), static_cast<Eigen::Index>(frames));
  const std::vector<double> win = hann_window(cfg.n_fft);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame;
  std::vector<std::complex<double>> spec(cfg.n_fft);
  for (std::size_t f = 0; f < frames; ++f) {
    detail::load_frame(x, cfg, win, f, frame);
    fft.fwd(spec.data(), frame.data(), static_cast<Eigen::Index>(cfg.n_fft));
    for (std::size_t k = 0; k < bins; ++k) out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f)) = spec[k];
  }
  return out;
}

inline Eigen::MatrixXcd stft(const Waveform& w, const StftConfig& cfg) { return stft(w.span(), cfg); }

// Triangular filters centred uniformly on the HTK mel scale.
inline Eigen::MatrixXd mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const std::size_t bins = cfg.stft.bins();
  const double m_lo = hz_to_mel(cfg.f_min);
  const double m_hi = hz_to_mel(cfg.fmax_hz());
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cfg.n_mels), static_cast<Eigen::Index>(bins));
  const double bin_hz = static_cast<double>(cfg.sample_rate) / static_cast<double>(cfg.stft.n_fft);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    double row_sum = 0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      const double v = std::max(0.0, std::min((f - lo) / (c - lo), (hi - f) / (hi - c)));
      fb(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) = v;
      row_sum += v;
    }
    if (!(row_sum > 0))
      throw ConfigError("mel_filterbank: filter " + std::to_string(m) +
                        " covers no FFT bin; n_mels is too large for n_fft " + std::to_string(cfg.stft.n_fft));
  }
  return fb;
}

inline std::vector<double> mel_center_frequencies(const MelConfig& cfg) {
  const double m_lo = hz_to_mel(cfg.f_min);
  const double m_hi = hz_to_mel(cfg.fmax_hz());
  std::vector<double> c(cfg.n_mels);
  for (std::size_t i = 0; i < cfg.n_mels; ++i)
    c[i] = mel_to_hz(m_lo + (m_hi - m_lo) * static_cast<double>(i + 1) / static_cast<double>(cfg.n_mels + 1));
  return c;
}

// Linear-magnitude mel spectrogram (log(mel + eps) when cfg.log_mel).
template <typename Sample>
MelSpec mel_spectrogram(std::span<const Sample> x, const MelConfig& cfg, const Eigen::MatrixXd* filterbank = nullptr) {
  Eigen::MatrixXd fb_local;
  if (filterbank == nullptr) {
    fb_local = mel_filterbank(cfg);
    filterbank = &fb_local;
  }
  const Eigen::MatrixXd mag = stft(x, cfg.stft).cwiseAbs();
  MelSpec out;
  out.values = (*filterbank) * mag;
  if (cfg.log_mel) out.values = (out.values.array() + cfg.log_eps).log().matrix();
  return out;
}

inline MelSpec mel_spectrogram(const Waveform& w, const MelConfig& cfg) { return mel_spectrogram(w.span(), cfg); }

namespace ad {

// Differentiable mel spectrogram of every row of x, which is (B, L) or
// (B, 1, L). Output is (B, n_mels, frames). The magnitude subgradient at
// an exactly zero bin is taken as zero.
template <typename T>
Var<T> mel_spectrogram(Var<T> x, const MelConfig& cfg, const Eigen::MatrixXd& fb) {
  Tape<T>& tape = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  detail::require((xv.rank() == 2) || (xv.rank() == 3 && xv.dim(1) == 1),
                  "mel_spectrogram: expected (B,L) or (B,1,L), got " + shape_str(xv.shape));
  cfg.stft.validate();
  detail::require(static_cast<std::size_t>(fb.cols()) == cfg.stft.bins() &&
                      static_cast<std::size_t>(fb.rows()) == cfg.n_mels,
                  "mel_spectrogram: filterbank does not match config");
  const std::size_t B = xv.dim(0);
  const std::size_t L = xv.shape.back();
  detail::require(L >= 1, "mel_spectrogram: empty signal");
  const std::size_t frames = stft_frame_count(L, cfg.stft);
  const std::size_t bins = cfg.stft.bins();
  const std::size_t M = cfg.n_mels;

  // per row: complex spectrum (bins x frames) saved for backward
  auto spectra = std::make_shared<std::vector<Eigen::MatrixXcd>>(B);
  auto mels = std::make_shared<std::vector<Eigen::MatrixXd>>(B);
  Tensor<T> out(Shape{B, M, frames});
  for (std::size_t b = 0; b < B; ++b) {
    std::span<const T> row(xv.ptr() + b * L, L);
    (*spectra)[b] = stft(row, cfg.stft);
    Eigen::MatrixXd mel = fb * (*spectra)[b].cwiseAbs();
    if (cfg.log_mel) (*mels)[b] = mel;
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t f = 0; f < frames; ++f) {
        const double v = mel(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(f));
        out.data[(b * M + m) * frames + f] = static_cast<T>(cfg.log_mel ? std::log(v + cfg.log_eps) : v);
      }
  }

  return tape.record(
      "mel_spectrogram", std::move(out), tape.requires_grad(x),
      [x, cfg, fb, spectra, mels, B, L, frames, bins, M](Tape<T>& tp, const Tensor<T>& g) {
        const std::size_t n_fft = cfg.stft.n_fft;
        const std::vector<double> win = hann_window(n_fft);
        const std::ptrdiff_t pad = cfg.stft.center ? static_cast<std::ptrdiff_t>(n_fft / 2) : 0;
        Eigen::FFT<double> fft;
        fft.SetFlag(Eigen::FFT<double>::Unscaled);
        std::vector<std::complex<double>> z(n_fft), u(n_fft);
        T* dx = tp.grad(x.id).ptr();
        for (std::size_t b = 0; b < B; ++b) {
          Eigen::MatrixXd gmel(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(frames));
          for (std::size_t m = 0; m < M; ++m)
            for (std::size_t f = 0; f < frames; ++f) {
              double gv = g.data[(b * M + m) * frames + f];
              if (cfg.log_mel)
                gv /= (*mels)[b](static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(f)) + cfg.log_eps;
              gmel(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(f)) = gv;
            }
          const Eigen::MatrixXd gmag = fb.transpose() * gmel;  // bins x frames
          const Eigen::MatrixXcd& X = (*spectra)[b];
          T* dxr = dx + b * L;
          for (std::size_t f = 0; f < frames; ++f) {
            std::fill(z.begin(), z.end(), std::complex<double>(0.0, 0.0));
            for (std::size_t k = 0; k < bins; ++k) {
              const std::complex<double> xk = X(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f));
              const double a = std::abs(xk);
              if (a > 0) z[k] = gmag(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f)) * xk / a;
            }
            // d|X_k|/du_n summed over the half spectrum = Re(sum_k Q_k e^{+2 pi i k n / N})
            fft.inv(u.data(), z.data(), static_cast<Eigen::Index>(n_fft));
            const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f * cfg.stft.hop) - pad;
            for (std::size_t n = 0; n < n_fft; ++n) {
              const double du = win[n] * u[n].real();
              const std::ptrdiff_t i = start + static_cast<std::ptrdiff_t>(n);
              const std::size_t src = cfg.stft.center ? reflect_index(i, L) : static_cast<std::size_t>(i);
              dxr[src] += static_cast<T>(du);
            }
          }
        }
      });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// One-third-octave analysis (STOI front end)

struct ThirdOctaveConfig {
  int sample_rate = 10000;
  std::size_t frame_len = 256;
  std::size_t hop = 128;
  std::size_t n_fft = 512;
  std::size_t n_bands = 15;
  double min_center_hz = 150.0;
};

struct ThirdOctaveBands {
  Eigen::MatrixXd matrix;  // n_bands x (n_fft/2 + 1), 0/1 bin membership
  std::vector<double> centers, lower, upper;
};

inline ThirdOctaveBands third_octave_bands(const ThirdOctaveConfig& cfg = {}) {
  const std::size_t bins = cfg.n_fft / 2 + 1;
  ThirdOctaveBands tb;
  tb.matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cfg.n_bands), static_cast<Eigen::Index>(bins));
  auto nearest_bin = [&](double hz) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t k = 0; k < bins; ++k) {
      const double d = std::abs(k * static_cast<double>(cfg.sample_rate) / cfg.n_fft - hz);
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    return best;
  };
  for (std::size_t i = 0; i < cfg.n_bands; ++i) {
    const double k = static_cast<double>(i);
    const double c = cfg.min_center_hz * std::pow(2.0, k / 3.0);
    const double lo = std::sqrt(c * cfg.min_center_hz * std::pow(2.0, (k - 1) / 3.0));
    const double hi = std::sqrt(c * cfg.min_center_hz * std::pow(2.0, (k + 1) / 3.0));
    tb.centers.push_back(c);
    tb.lower.push_back(lo);
    tb.upper.push_back(hi);
    const std::size_t a = nearest_bin(lo), e = nearest_bin(hi);
    for (std::size_t j = a; j < e; ++j) tb.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
  }
  return tb;
}

// STOI analysis window: Hann of length N+2 with the zero end points dropped.
inline std::vector<double> stoi_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * (i + 1.0) / (n + 1.0)));
  return w;
}

// Band amplitudes (n_bands x frames): sqrt of the summed squared magnitudes
// of each band's bins, frames of frame_len with hop, zero-padded to n_fft.
template <typename Sample>
Eigen::MatrixXd third_octave_energies(std::span<const Sample> x, const ThirdOctaveConfig& cfg = {},
                                      const ThirdOctaveBands* bands = nullptr) {
  if (x.size() < cfg.frame_len)
    throw DegenerateInputError("third_octave_energies: signal shorter than one analysis frame");
  ThirdOctaveBands local;
  if (bands == nullptr) {
    local = third_octave_bands(cfg);
    bands = &local;
  }
  const std::size_t frames = 1 + (x.size() - cfg.frame_len) / cfg.hop;
  const std::size_t bins = cfg.n_fft / 2 + 1;
  const std::vector<double> win = stoi_window(cfg.frame_len);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame(cfg.n_fft);
  std::vector<std::complex<double>> spec(cfg.n_fft);
  Eigen::MatrixXd power(static_cast<Eigen::Index>(bins), static_cast<Eigen::Index>(frames));
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(frame.begin(), frame.end(), 0.0);
    for (std::size_t n = 0; n < cfg.frame_len; ++n) frame[n] = win[n] * static_cast<double>(x[f * cfg.hop + n]);
    fft.fwd(spec.data(), frame.data(), static_cast<Eigen::Index>(cfg.n_fft));
    for (std::size_t k = 0; k < bins; ++k) power(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f)) = std::norm(spec[k]);
  }
  return (bands->matrix * power).cwiseSqrt();
}

}  // namespace adnac
