#pragma once

// Frozen waveform <-> latent codecs. IdentityFrame reshapes hop-sample
// blocks into channels (exactly invertible); ToyConv is a small strided
// conv autoencoder trained once on clean audio and then frozen. Optional
// residual vector quantization operates on latent frame vectors.

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "adnac/audio_io.hpp"
#include "adnac/autodiff.hpp"
#include "adnac/denoiser.hpp"
#include "adnac/error.hpp"
#include "adnac/losses.hpp"
#include "adnac/optim.hpp"
#include "adnac/rng.hpp"
#include "adnac/spectral.hpp"

namespace adnac {

enum class CodecKind { IdentityFrame, ToyConv };

inline std::string codec_kind_name(CodecKind k) { return k == CodecKind::IdentityFrame ? "identity" : "toyconv"; }

inline CodecKind parse_codec_kind(const std::string& s) {
  if (s == "identity" || s == "identity_frame") return CodecKind::IdentityFrame;
  if (s == "toyconv" || s == "toy_conv") return CodecKind::ToyConv;
  throw ConfigError("unknown codec kind: " + s);
}

struct RvqSpec {
  std::size_t stages = 9;
  std::size_t codebook_size = 256;
};

struct CodecSpec {
  CodecKind kind = CodecKind::IdentityFrame;
  std::size_t c_lat = 256;
  std::size_t hop = 256;
  int sample_rate = kDefaultSampleRate;
  std::optional<RvqSpec> rvq;

  void validate() const {
    if (hop == 0) throw ConfigError("codec: hop must be >= 1");
    if (sample_rate <= 0) throw ConfigError("codec: sample_rate must be positive");
    if (kind == CodecKind::IdentityFrame && c_lat != hop)
      throw ConfigError("codec: identity codec needs c_lat == hop");
    if (kind == CodecKind::ToyConv && (hop != 64 || c_lat == 0))
      throw ConfigError("codec: toy codec has hop 64 and c_lat >= 1");
    if (rvq && (rvq->stages == 0 || rvq->codebook_size == 0)) throw ConfigError("codec: empty rvq spec");
  }
};

inline CodecSpec identity_codec_spec(std::size_t hop) {
  return CodecSpec{CodecKind::IdentityFrame, hop, hop, kDefaultSampleRate, std::nullopt};
}

inline CodecSpec toy_codec_spec(std::size_t c_lat = 32) {
  return CodecSpec{CodecKind::ToyConv, c_lat, 64, kDefaultSampleRate, std::nullopt};
}

struct Latent {
  Tensor<float> values;  // (C_lat, F)
  std::size_t hop = 0;
  std::size_t original_len = 0;

  std::size_t channels() const { return values.dim(0); }
  std::size_t frames() const { return values.dim(1); }
};

inline std::size_t frames_for(std::size_t len, std::size_t hop) { return (len + hop - 1) / hop; }

// ---- ToyConv layers ------------------------------------------------------

namespace toy {
inline constexpr std::size_t kKernel = 8;
inline constexpr std::size_t kStride = 4;
inline constexpr std::size_t kPad = 2;
inline constexpr std::size_t kLayers = 3;

inline std::vector<std::size_t> channels(std::size_t c_lat) { return {1, 16, 32, c_lat}; }
}  // namespace toy

template <typename T>
ParamStore<T> build_toy_codec_params(std::size_t c_lat, std::uint64_t seed) {
  ParamStore<T> ps;
  Rng rng = make_rng(stable_hash(seed, std::string_view("toy-codec-init")));
  const auto ch = toy::channels(c_lat);
  for (std::size_t i = 0; i < toy::kLayers; ++i)
    detail::add_conv(ps, rng, "codec.enc" + std::to_string(i), ch[i + 1], ch[i], toy::kKernel);
  for (std::size_t i = 0; i < toy::kLayers; ++i) {
    // decoder layer i undoes encoder layer (kLayers - 1 - i)
    const std::size_t j = toy::kLayers - 1 - i;
    detail::add_conv(ps, rng, "codec.dec" + std::to_string(i), ch[j], ch[j + 1], toy::kKernel, true, toy::kStride);
  }
  return ps;
}

// (B, 1, L) with L a multiple of hop -> (B, C_lat, L / hop)
template <typename T>
ad::Var<T> encode_var(ad::Var<T> wave, const CodecSpec& spec, ParamStore<T>* params) {
  using namespace ad;
  if (wave.value().rank() != 3 || wave.dim(1) != 1 || wave.dim(2) % spec.hop != 0)
    throw ShapeError("codec encode: expected (B,1,k*" + std::to_string(spec.hop) + "), got " + shape_str(wave.shape()));
  if (spec.kind == CodecKind::IdentityFrame) return frames_from_wave(wave, spec.hop);
  if (!params) throw UsageError("codec encode: toy codec requires parameters");
  Tape<T>& tp = *wave.tape;
  auto h = wave;
  for (std::size_t i = 0; i < toy::kLayers; ++i) {
    const std::string n = "codec.enc" + std::to_string(i);
    h = conv1d(h, tp.param(params->get(n + ".w")), tp.param(params->get(n + ".b")), toy::kStride, toy::kPad);
    if (i + 1 < toy::kLayers) h = silu(h);
  }
  return h;
}

// (B, C_lat, F) -> (B, 1, F * hop); callers crop to the original length.
template <typename T>
ad::Var<T> decode_var(ad::Var<T> z, const CodecSpec& spec, ParamStore<T>* params) {
  using namespace ad;
  if (z.value().rank() != 3 || z.dim(1) != spec.c_lat)
    throw ShapeError("codec decode: expected (B," + std::to_string(spec.c_lat) + ",F), got " + shape_str(z.shape()));
  if (spec.kind == CodecKind::IdentityFrame) return wave_from_frames(z);
  if (!params) throw UsageError("codec decode: toy codec requires parameters");
  Tape<T>& tp = *z.tape;
  auto h = z;
  for (std::size_t i = 0; i < toy::kLayers; ++i) {
    const std::string n = "codec.dec" + std::to_string(i);
    h = conv_transpose1d(h, tp.param(params->get(n + ".w")), tp.param(params->get(n + ".b")), toy::kStride,
                         toy::kPad);
    if (i + 1 < toy::kLayers) h = silu(h);
  }
  return h;
}

// ---- Codec object --------------------------------------------------------

struct Codec {
  CodecSpec spec;
  ParamStore<float> params;  // empty for IdentityFrame; always frozen once built

  ParamStore<float>* param_ptr() { return spec.kind == CodecKind::ToyConv ? &params : nullptr; }

  void check_rate(int sr) const {
    if (sr != spec.sample_rate)
      throw ConfigError("codec expects " + std::to_string(spec.sample_rate) + " Hz input, got " + std::to_string(sr));
  }

  Latent encode(const Waveform& w) {
    check_rate(w.sample_rate);
    return encode(std::span<const float>(w.samples));
  }

  Latent encode(std::span<const float> x) {
    if (x.empty()) throw DegenerateInputError("codec encode: empty waveform");
    const std::size_t F = frames_for(x.size(), spec.hop);
    Latent lat;
    lat.hop = spec.hop;
    lat.original_len = x.size();
    if (spec.kind == CodecKind::IdentityFrame) {
      lat.values = Tensor<float>(Shape{spec.hop, F});
      for (std::size_t i = 0; i < x.size(); ++i) lat.values.data[(i % spec.hop) * F + i / spec.hop] = x[i];
      return lat;
    }
    ad::Tape<float> tape;
    Tensor<float> in(Shape{1, 1, F * spec.hop});
    std::copy(x.begin(), x.end(), in.data.begin());
    auto z = encode_var(tape.constant(std::move(in)), spec, param_ptr());
    lat.values = Tensor<float>(Shape{spec.c_lat, F}, z.value().data);
    return lat;
  }

  Waveform decode(const Latent& lat) {
    validate_latent(lat);
    const std::size_t F = lat.frames();
    Waveform w;
    w.sample_rate = spec.sample_rate;
    w.samples.resize(lat.original_len);
    if (spec.kind == CodecKind::IdentityFrame) {
      for (std::size_t i = 0; i < lat.original_len; ++i) w.samples[i] = lat.values.data[(i % spec.hop) * F + i / spec.hop];
      return w;
    }
    ad::Tape<float> tape;
    auto y = decode_var(tape.constant(Tensor<float>(Shape{1, spec.c_lat, F}, lat.values.data)), spec, param_ptr());
    std::copy_n(y.value().data.begin(), lat.original_len, w.samples.begin());
    return w;
  }

  void validate_latent(const Latent& lat) const {
    if (lat.values.rank() != 2 || lat.channels() != spec.c_lat || lat.hop != spec.hop)
      throw ShapeError("latent " + shape_str(lat.values.shape) + " hop " + std::to_string(lat.hop) +
                       " does not match codec (" + std::to_string(spec.c_lat) + " channels, hop " +
                       std::to_string(spec.hop) + ")");
    if (lat.frames() != frames_for(lat.original_len, lat.hop) || lat.original_len == 0)
      throw ShapeError("latent frame count does not match its original length");
  }
};

inline Codec make_identity_codec(std::size_t hop) {
  Codec c;
  c.spec = identity_codec_spec(hop);
  c.spec.validate();
  return c;
}

// ---- Latent normalization -----------------------------------------------

inline constexpr double kMinLatentStd = 1e-5;

struct LatentStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::size_t clamped_channels = 0;  // channels whose std hit the floor

  std::size_t channels() const { return mean.size(); }
  std::vector<double> inv_std() const {
    std::vector<double> r(std.size());
    for (std::size_t c = 0; c < std.size(); ++c) r[c] = 1.0 / std[c];
    return r;
  }
  std::vector<double> neg_mean_over_std() const {
    std::vector<double> r(std.size());
    for (std::size_t c = 0; c < std.size(); ++c) r[c] = -mean[c] / std[c];
    return r;
  }
};

inline LatentStats fit_latent_stats(const std::vector<const Tensor<float>*>& latents) {
  if (latents.empty()) throw DegenerateInputError("fit_latent_stats: no latents");
  const std::size_t C = latents.front()->dim(0);
  std::vector<double> s(C, 0.0), n(C, 0.0);
  for (const auto* t : latents) {
    if (t->rank() != 2 || t->dim(0) != C) throw ShapeError("fit_latent_stats: inconsistent latent shapes");
    const std::size_t F = t->dim(1);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t f = 0; f < F; ++f) s[c] += t->data[c * F + f];
      n[c] += static_cast<double>(F);
    }
  }
  LatentStats st;
  st.mean.resize(C);
  st.std.resize(C);
  for (std::size_t c = 0; c < C; ++c) st.mean[c] = s[c] / n[c];
  // second pass for a stable variance
  std::vector<double> ss(C, 0.0);
  for (const auto* t : latents) {
    const std::size_t F = t->dim(1);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t f = 0; f < F; ++f) {
        const double d = t->data[c * F + f] - st.mean[c];
        ss[c] += d * d;
      }
  }
  for (std::size_t c = 0; c < C; ++c) {
    const double sd = std::sqrt(ss[c] / n[c]);
    if (!std::isfinite(sd) || !std::isfinite(st.mean[c])) throw NumericError("fit_latent_stats: non-finite statistics");
    if (sd < kMinLatentStd) ++st.clamped_channels;
    st.std[c] = std::max(sd, kMinLatentStd);
  }
  return st;
}

inline LatentStats fit_latent_stats(const std::vector<Latent>& latents) {
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& l : latents) ptrs.push_back(&l.values);
  return fit_latent_stats(ptrs);
}

inline Latent normalize(Latent lat, const LatentStats& st) {
  const std::size_t C = lat.channels(), F = lat.frames();
  if (C != st.channels()) throw ShapeError("normalize: channel count mismatch");
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t f = 0; f < F; ++f) {
      float& v = lat.values.data[c * F + f];
      v = static_cast<float>((v - st.mean[c]) / st.std[c]);
    }
  return lat;
}

inline Latent denormalize(Latent lat, const LatentStats& st) {
  const std::size_t C = lat.channels(), F = lat.frames();
  if (C != st.channels()) throw ShapeError("denormalize: channel count mismatch");
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t f = 0; f < F; ++f) {
      float& v = lat.values.data[c * F + f];
      v = static_cast<float>(v * st.std[c] + st.mean[c]);
    }
  return lat;
}

template <typename T>
ad::Var<T> normalize_var(ad::Var<T> z, const LatentStats& st) {
  return ad::affine_channels(z, st.inv_std(), st.neg_mean_over_std());
}

template <typename T>
ad::Var<T> denormalize_var(ad::Var<T> z, const LatentStats& st) {
  return ad::affine_channels(z, st.std, st.mean);
}

// ---- Residual vector quantization ---------------------------------------

// codebooks[s] is (codebook_size, dim), row-major.
struct RvqCodebooks {
  std::size_t dim = 0;
  std::vector<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> books;
};

struct RvqResult {
  std::vector<std::size_t> codes;
  std::vector<double> quantized;
  std::vector<double> residual_norms;  // before stage 0, after each stage
};

inline RvqResult rvq_quantize(std::span<const double> x, const RvqCodebooks& cb, std::size_t stages = 0) {
  if (cb.books.empty()) throw ConfigError("rvq: no codebooks");
  if (x.size() != cb.dim) throw ShapeError("rvq: vector dim " + std::to_string(x.size()) + " != " + std::to_string(cb.dim));
  const std::size_t S = stages == 0 ? cb.books.size() : std::min(stages, cb.books.size());
  Eigen::VectorXd r = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  Eigen::VectorXd q = Eigen::VectorXd::Zero(r.size());
  RvqResult out;
  out.residual_norms.push_back(r.norm());
  for (std::size_t s = 0; s < S; ++s) {
    const auto& B = cb.books[s];
    if (B.rows() == 0 || static_cast<std::size_t>(B.cols()) != cb.dim) throw ConfigError("rvq: malformed codebook");
    Eigen::Index best = 0;
    (B.rowwise() - r.transpose()).rowwise().squaredNorm().minCoeff(&best);
    out.codes.push_back(static_cast<std::size_t>(best));
    q += B.row(best).transpose();
    r -= B.row(best).transpose();
    out.residual_norms.push_back(r.norm());
  }
  out.quantized.assign(q.data(), q.data() + q.size());
  return out;
}

// Stage-wise k-means on the running residual of `vectors` (rows). Row 0 of
// every codebook is pinned to zero so a stage can never grow the residual.
inline RvqCodebooks fit_rvq(const Eigen::MatrixXd& vectors, const RvqSpec& spec, std::uint64_t seed,
                            std::size_t iterations = 20) {
  if (vectors.rows() == 0) throw DegenerateInputError("fit_rvq: no training vectors");
  RvqCodebooks cb;
  cb.dim = static_cast<std::size_t>(vectors.cols());
  Eigen::MatrixXd resid = vectors;
  const Eigen::Index N = resid.rows();
  const Eigen::Index K = static_cast<Eigen::Index>(std::min<std::size_t>(spec.codebook_size, static_cast<std::size_t>(N)));
  for (std::size_t s = 0; s < spec.stages; ++s) {
    Rng rng = make_rng(stable_hash(seed, std::string_view("rvq"), s));
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> C(K, resid.cols());
    C.row(0).setZero();
    for (Eigen::Index k = 1; k < K; ++k) C.row(k) = resid.row(idx[static_cast<std::size_t>(k)]);
    std::vector<Eigen::Index> assign(static_cast<std::size_t>(N), 0);
    for (std::size_t it = 0; it < iterations; ++it) {
      for (Eigen::Index i = 0; i < N; ++i)
        (C.rowwise() - resid.row(i)).rowwise().squaredNorm().minCoeff(&assign[static_cast<std::size_t>(i)]);
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(K, resid.cols());
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(K);
      for (Eigen::Index i = 0; i < N; ++i) {
        sums.row(assign[static_cast<std::size_t>(i)]) += resid.row(i);
        counts(assign[static_cast<std::size_t>(i)]) += 1;
      }
      for (Eigen::Index k = 1; k < K; ++k)
        if (counts(k) > 0) C.row(k) = sums.row(k) / counts(k);  // empty clusters keep their centre
    }
    for (Eigen::Index i = 0; i < N; ++i) {
      Eigen::Index best = 0;
      (C.rowwise() - resid.row(i)).rowwise().squaredNorm().minCoeff(&best);
      resid.row(i) -= C.row(best);
    }
    cb.books.push_back(std::move(C));
  }
  return cb;
}

// Quantizes every frame column of a latent.
inline Latent rvq_quantize_latent(const Latent& lat, const RvqCodebooks& cb) {
  Latent out = lat;
  const std::size_t C = lat.channels(), F = lat.frames();
  std::vector<double> col(C);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t c = 0; c < C; ++c) col[c] = lat.values.data[c * F + f];
    auto r = rvq_quantize(col, cb);
    for (std::size_t c = 0; c < C; ++c) out.values.data[c * F + f] = static_cast<float>(r.quantized[c]);
  }
  return out;
}

// ---- ToyConv pretraining -------------------------------------------------

struct ToyPretrainConfig {
  std::size_t c_lat = 32;
  std::size_t steps = 600;
  std::size_t batch = 8;
  std::size_t crop_len = 8192;  // multiple of 64
  double lr = 2e-3;
  double w_l1 = 1.0;
  double w_mel = 0.01;  // linear mel magnitudes dwarf the waveform L1
  std::size_t eval_chunks = 16;
  std::size_t min_chunks = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps == 0 || batch == 0) throw ConfigError("toy codec: steps and batch must be positive");
    if (crop_len == 0 || crop_len % 64 != 0) throw ConfigError("toy codec: crop_len must be a positive multiple of 64");
    if (!(lr > 0)) throw ConfigError("toy codec: lr must be positive");
    if (c_lat == 0) throw ConfigError("toy codec: c_lat must be positive");
  }
};

struct ToyPretrainResult {
  Codec codec;
  double initial_l1 = 0;
  double final_l1 = 0;
  std::vector<double> step_losses;
};

namespace detail {

inline double toy_eval_l1(Codec& codec, const std::vector<Tensor<float>>& eval) {
  double s = 0;
  for (const auto& x : eval) {
    auto y = codec.decode(codec.encode(std::span<const float>(x.data)));
    double a = 0;
    for (std::size_t i = 0; i < x.size(); ++i) a += std::abs(static_cast<double>(y.samples[i]) - x.data[i]);
    s += a / static_cast<double>(x.size());
  }
  return s / static_cast<double>(eval.size());
}

}  // namespace detail

// Trains the toy autoencoder on random crops of clean chunks, then freezes it.
// The last `eval_chunks` chunks are held out to measure reconstruction L1.
inline ToyPretrainResult pretrain_toy_codec(const std::vector<std::vector<float>>& chunks,
                                            const ToyPretrainConfig& cfg,
                                            const std::function<void(std::size_t, double)>& progress = {}) {
  cfg.validate();
  if (chunks.size() < cfg.min_chunks)
    throw DegenerateInputError("toy codec pretraining needs at least " + std::to_string(cfg.min_chunks) +
                               " clean chunks, got " + std::to_string(chunks.size()));
  for (const auto& c : chunks)
    if (c.size() < cfg.crop_len) throw DegenerateInputError("toy codec: chunk shorter than crop_len");
  const std::size_t n_eval = std::min(cfg.eval_chunks, chunks.size() / 5);
  const std::size_t n_train = chunks.size() - n_eval;

  ToyPretrainResult res;
  res.codec.spec = toy_codec_spec(cfg.c_lat);
  res.codec.params = build_toy_codec_params<float>(cfg.c_lat, cfg.seed);

  std::vector<Tensor<float>> eval;
  for (std::size_t i = n_train; i < chunks.size(); ++i)
    eval.emplace_back(Shape{cfg.crop_len}, std::vector<float>(chunks[i].begin(), chunks[i].begin() + cfg.crop_len));
  res.initial_l1 = detail::toy_eval_l1(res.codec, eval);

  MelLossConfig mel_cfg;
  const auto fb = mel_filterbank(mel_cfg.mel);
  AdamWState<float> opt;
  opt.config.lr = cfg.lr;
  opt.config.weight_decay = 0.0;
  Rng rng = make_rng(stable_hash(cfg.seed, std::string_view("toy-codec-batches")));
  auto& ps = res.codec.params;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tensor<float> batch(Shape{cfg.batch, 1, cfg.crop_len});
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& c = chunks[std::uniform_int_distribution<std::size_t>(0, n_train - 1)(rng)];
      const std::size_t off = std::uniform_int_distribution<std::size_t>(0, c.size() - cfg.crop_len)(rng);
      std::copy_n(c.begin() + static_cast<std::ptrdiff_t>(off), cfg.crop_len, batch.data.begin() + b * cfg.crop_len);
    }
    ps.zero_grad();
    ad::Tape<float> tape;
    auto x = tape.constant(batch);
    auto y = decode_var(encode_var(x, res.codec.spec, &ps), res.codec.spec, &ps);
    auto loss = ad::add(ad::mul_scalar(ad::l1_waveform(y, x), cfg.w_l1),
                        ad::mul_scalar(ad::mel_loss(y, x, mel_cfg, fb), cfg.w_mel));
    const double lv = static_cast<double>(loss.value().item());
    if (!std::isfinite(lv)) throw NumericError("toy codec pretraining diverged at step " + std::to_string(step));
    tape.backward(loss);
    // cosine decay keeps the late steps from bouncing around
    opt.config.lr = cfg.lr * 0.5 * (1 + std::cos(std::numbers::pi * static_cast<double>(step) / cfg.steps));
    adamw_step(ps, opt);
    res.step_losses.push_back(lv);
    if (progress) progress(step, lv);
  }
  ps.set_frozen(true);
  res.final_l1 = detail::toy_eval_l1(res.codec, eval);
  return res;
}

}  // namespace adnac
