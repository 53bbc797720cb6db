#pragma once

// Waveform L1, mel-spectrogram distance, scale-invariant SDR, and the
// weighted combination with its epoch curriculum.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>

#include "adnac/autodiff.hpp"
#include "adnac/spectral.hpp"

namespace adnac {

inline constexpr double kSiSdrEps = 1e-8;
inline constexpr double kDbClamp = 60.0;

struct LossWeights {
  double l1 = 1.0;
  double mel = 1.0;
  double sisdr = 0.01;

  void validate() const {
    if (l1 < 0 || mel < 0 || sisdr < 0) throw ConfigError("loss weights must be non-negative");
    if (l1 == 0 && mel == 0 && sisdr == 0) throw ConfigError("at least one loss weight must be positive");
  }
};

struct CurriculumSchedule {
  int sisdr_start_epoch = 5;
  bool sisdr_active(int epoch) const { return epoch >= sisdr_start_epoch; }
};

struct MelLossConfig {
  MelConfig mel;
  bool l2 = false;  // mean squared instead of mean absolute difference
};

// Clamped SI-SDR in dB for one pair of equal-length signals.
template <typename A, typename B>
double si_sdr_db(std::span<const A> est, std::span<const B> ref, double eps = kSiSdrEps) {
  if (est.size() != ref.size()) throw ShapeError("si_sdr: length mismatch");
  double p = 0, yy = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double a = static_cast<double>(est[i]), b = static_cast<double>(ref[i]);
    p += a * b;
    yy += b * b;
  }
  if (!(yy > 0)) throw DegenerateInputError("si_sdr: reference has zero energy");
  const double alpha = p / (yy + eps);
  double noise = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = static_cast<double>(est[i]) - alpha * static_cast<double>(ref[i]);
    noise += d * d;
  }
  const double v = 10.0 * std::log10((alpha * alpha * yy + eps) / (noise + eps));
  return std::clamp(v, -kDbClamp, kDbClamp);
}

template <typename T>
double si_sdr_db(const std::vector<T>& est, const std::vector<T>& ref, double eps = kSiSdrEps) {
  return si_sdr_db(std::span<const T>(est), std::span<const T>(ref), eps);
}

namespace ad {

namespace detail_loss {
template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail_loss

template <typename T>
Var<T> l1_waveform(Var<T> est, Var<T> ref) {
  detail_loss::require_same_shape(est, ref, "l1_waveform");
  return mean_abs(sub(est, ref));
}

template <typename T>
Var<T> mel_loss(Var<T> est, Var<T> ref, const MelLossConfig& cfg, const Eigen::MatrixXd& fb) {
  detail_loss::require_same_shape(est, ref, "mel_loss");
  auto d = sub(mel_spectrogram(est, cfg.mel, fb), mel_spectrogram(ref, cfg.mel, fb));
  if (!cfg.l2) return mean_abs(d);
  return mul_scalar(sum_sq(d), 1.0 / static_cast<double>(d.value().size()));
}

// Mean over the batch of per-row clamped SI-SDR (dB). Rows are the leading
// dimension; the rest of each row is flattened. Gradient flows to `est`
// only (the reference is a target), and is zero where a row is clamped.
template <typename T>
Var<T> si_sdr_db(Var<T> est, Var<T> ref, double eps = kSiSdrEps) {
  detail_loss::require_same_shape(est, ref, "si_sdr");
  Tape<T>& tape = detail::tape_of(est);
  const Tensor<T>& ev = est.value();
  const Tensor<T>& rv = ref.value();
  const std::size_t B = ev.rank() == 0 ? 1 : ev.dim(0);
  const std::size_t L = ev.size() / B;
  struct Row {
    double alpha, yy, n, d;
    bool clamped;
  };
  std::vector<Row> rows(B);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* e = ev.ptr() + b * L;
    const T* r = rv.ptr() + b * L;
    double p = 0, yy = 0;
    for (std::size_t i = 0; i < L; ++i) {
      p += static_cast<double>(e[i]) * r[i];
      yy += static_cast<double>(r[i]) * r[i];
    }
    if (!(yy > 0)) throw DegenerateInputError("si_sdr: reference row " + std::to_string(b) + " has zero energy");
    const double alpha = p / (yy + eps);
    double noise = 0;
    for (std::size_t i = 0; i < L; ++i) {
      const double dv = static_cast<double>(e[i]) - alpha * r[i];
      noise += dv * dv;
    }
    const double n = alpha * alpha * yy + eps, d = noise + eps;
    const double v = 10.0 * std::log10(n / d);
    rows[b] = {alpha, yy, n, d, v <= -kDbClamp || v >= kDbClamp};
    total += std::clamp(v, -kDbClamp, kDbClamp);
  }
  return tape.record(
      "si_sdr_db", Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B))), tape.requires_grad(est),
      [est, ref, rows, B, L, eps](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& ev2 = est.value();
        const Tensor<T>& rv2 = ref.value();
        T* dx = tp.grad(est.id).ptr();
        const double k = 10.0 / std::numbers::ln10 * static_cast<double>(g.data[0]) / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
          const Row& row = rows[b];
          if (row.clamped) continue;
          const T* e = ev2.ptr() + b * L;
          const T* r = rv2.ptr() + b * L;
          // dN = 2 alpha yy/(yy+eps) y ; dD = 2 e_n - 2 <e_n, y>/(yy+eps) y
          double en_y = 0;
          for (std::size_t i = 0; i < L; ++i) en_y += (static_cast<double>(e[i]) - row.alpha * r[i]) * r[i];
          const double cy = 2.0 * row.alpha * row.yy / (row.yy + eps) / row.n + 2.0 * en_y / (row.yy + eps) / row.d;
          T* d = dx + b * L;
          for (std::size_t i = 0; i < L; ++i) {
            const double en = static_cast<double>(e[i]) - row.alpha * r[i];
            d[i] += static_cast<T>(k * (cy * r[i] - 2.0 * en / row.d));
          }
        }
      });
}

template <typename T>
Var<T> si_sdr_loss(Var<T> est, Var<T> ref, double eps = kSiSdrEps) {
  return mul_scalar(si_sdr_db(est, ref, eps), -1.0);
}

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double l1 = 0;
  double mel = 0;
  double sisdr_db = 0;
  double sisdr_weight = 0;  // weight actually applied this epoch
};

template <typename T>
LossBreakdown<T> combined_loss(Var<T> est, Var<T> ref, const LossWeights& w, int epoch,
                               const CurriculumSchedule& schedule, const MelLossConfig& mel_cfg,
                               const Eigen::MatrixXd& fb) {
  w.validate();
  LossBreakdown<T> out;
  auto l1 = l1_waveform(est, ref);
  auto mel = mel_loss(est, ref, mel_cfg, fb);
  auto sdr = si_sdr_db(est, ref);
  out.l1 = static_cast<double>(l1.value().item());
  out.mel = static_cast<double>(mel.value().item());
  out.sisdr_db = static_cast<double>(sdr.value().item());
  out.sisdr_weight = schedule.sisdr_active(epoch) ? w.sisdr : 0.0;
  Var<T> total = add(mul_scalar(l1, w.l1), mul_scalar(mel, w.mel));
  if (out.sisdr_weight != 0.0) total = add(total, mul_scalar(sdr, -out.sisdr_weight));
  out.total = total;
  return out;
}

}  // namespace ad
}  // namespace adnac
