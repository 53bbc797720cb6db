#pragma once

// The full finite-difference suite: every autodiff op, the training losses,
// the codec graphs, a residual block and a tiny U-Net, all in double
// precision. Shared by the gradcheck command and the test suites.

#include <functional>
#include <string>
#include <vector>

#include "adnac/autodiff.hpp"
#include "adnac/codec.hpp"
#include "adnac/denoiser.hpp"
#include "adnac/losses.hpp"
#include "adnac/rng.hpp"

namespace adnac {

struct GradCheckCase {
  std::string name;
  ad::GradCheckReport report;
};

struct GradCheckSuiteConfig {
  double h = 1e-4;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

namespace detail {

inline Tensor<double> gc_random(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data) v = d(rng);
  return t;
}

// small mel setup keeps the per-coordinate check cheap
inline MelLossConfig gc_mel() {
  MelLossConfig m;
  m.mel.stft.n_fft = 64;
  m.mel.stft.hop = 16;
  m.mel.stft.center = true;
  m.mel.n_mels = 8;
  m.mel.sample_rate = 8000;
  m.mel.f_max = 4000;
  return m;
}

}  // namespace detail

inline UNetConfig gradcheck_unet_config() {
  UNetConfig c;
  c.in_channels = 4;
  c.base_channels = 4;
  c.levels = 2;
  c.norm_groups = 2;
  return c;
}

inline std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteConfig& cfg = {},
                                                      const std::function<void(const GradCheckCase&)>& on_case = {}) {
  using namespace ad;
  using P = Parameter<double>;
  std::vector<GradCheckCase> out;
  Rng rng = make_rng(stable_hash(cfg.seed, std::string_view("gradcheck-suite")));
  auto check = [&](const std::string& name, auto&& build, std::vector<P*> ps) {
    out.push_back({name, grad_check(build, ps, cfg.h, cfg.tol, 0)});
    if (on_case) on_case(out.back());
  };

  const std::size_t B = 2, C = 4, T = 9;
  P x{"x", adnac::detail::gc_random({B, C, T}, rng), {}, false};
  P x2{"x2", adnac::detail::gc_random({B, C, T}, rng), {}, false};
  P w{"w", adnac::detail::gc_random({3, C, 3}, rng), {}, false};
  P wt{"wt", adnac::detail::gc_random({C, 3, 4}, rng), {}, false};
  P b{"b", adnac::detail::gc_random({3}, rng), {}, false};
  P gamma{"gamma", adnac::detail::gc_random({C}, rng, 0.5, 1.5), {}, false};
  P beta{"beta", adnac::detail::gc_random({C}, rng), {}, false};
  // fixed random projections turn tensor-valued ops into generic scalars
  auto proj = [&](Var<double> y, const Tensor<double>& r) { return dot(y, y.tape->constant(r)); };
  const auto r_same = adnac::detail::gc_random({B, C, T}, rng), r_cat = adnac::detail::gc_random({B, 2 * C, T}, rng);
  const auto r_conv = adnac::detail::gc_random({B, 3, (T + 2 - 3) / 2 + 1}, rng);
  const auto r_convt = adnac::detail::gc_random({B, 3, (T - 1) * 2 - 2 + 4}, rng);

  check("conv1d", [&](Tape<double>& t) { return proj(conv1d(t.param(x), t.param(w), t.param(b), 2, 1), r_conv); },
        {&x, &w, &b});
  check("conv_transpose1d",
        [&](Tape<double>& t) { return proj(conv_transpose1d(t.param(x), t.param(wt), t.param(b), 2, 1), r_convt); },
        {&x, &wt, &b});
  check("group_norm", [&](Tape<double>& t) { return proj(group_norm(t.param(x), 2, t.param(gamma), t.param(beta)), r_same); },
        {&x, &gamma, &beta});
  check("silu", [&](Tape<double>& t) { return proj(silu(t.param(x)), r_same); }, {&x});
  check("add", [&](Tape<double>& t) { return proj(add(t.param(x), t.param(x2)), r_same); }, {&x, &x2});
  check("sub", [&](Tape<double>& t) { return proj(sub(t.param(x), t.param(x2)), r_same); }, {&x, &x2});
  check("mul_scalar", [&](Tape<double>& t) { return proj(mul_scalar(t.param(x), -1.7), r_same); }, {&x});
  check("affine_channels",
        [&](Tape<double>& t) { return proj(affine_channels(t.param(x), {0.5, -2.0, 1.5, 3.0}, {1, 2, 3, 4}), r_same); },
        {&x});
  check("concat_channels", [&](Tape<double>& t) { return proj(concat_channels(t.param(x), t.param(x2)), r_cat); },
        {&x, &x2});
  check("pad_time+crop_time", [&](Tape<double>& t) { return sum_sq(crop_time(pad_time(t.param(x), 3), T - 2)); }, {&x});
  check("reshape", [&](Tape<double>& t) { return proj(reshape(t.param(x), Shape{B, C * T}), r_same); }, {&x});
  check("frames_from_wave+wave_from_frames",
        [&](Tape<double>& t) {
          auto fr = frames_from_wave(reshape(t.param(x), Shape{B, 1, C * T}), T);
          return proj(reshape(wave_from_frames(silu(fr)), Shape{B, C, T}), r_same);
        },
        {&x});
  check("sum", [&](Tape<double>& t) { return mul_scalar(sum(silu(t.param(x))), 0.3); }, {&x});
  check("mean", [&](Tape<double>& t) { return mean(silu(t.param(x))); }, {&x});
  check("mean_abs", [&](Tape<double>& t) { return mean_abs(t.param(x)); }, {&x});
  check("sum_sq", [&](Tape<double>& t) { return sum_sq(t.param(x)); }, {&x});
  check("dot", [&](Tape<double>& t) { return dot(t.param(x), t.param(x2)); }, {&x, &x2});
  check("log10_scalar", [&](Tape<double>& t) { return log10_scalar(sum_sq(t.param(x))); }, {&x});

  // losses on short waveforms
  const std::size_t L = 160;
  P est{"est", adnac::detail::gc_random({B, 1, L}, rng), {}, false};
  Tensor<double> ref = adnac::detail::gc_random({B, 1, L}, rng);
  for (std::size_t i = 0; i < ref.size(); ++i) est.value.data[i] = 0.7 * ref.data[i] + 0.5 * est.value.data[i];
  const MelLossConfig mel = adnac::detail::gc_mel();
  const Eigen::MatrixXd fb = mel_filterbank(mel.mel);
  check("l1_waveform", [&](Tape<double>& t) { return l1_waveform(t.param(est), t.constant(ref)); }, {&est});
  check("mel_loss", [&](Tape<double>& t) { return mel_loss(t.param(est), t.constant(ref), mel, fb); }, {&est});
  MelLossConfig mel_log = mel;
  mel_log.mel.log_mel = true;
  mel_log.l2 = true;
  check("mel_loss(log, l2)", [&](Tape<double>& t) { return mel_loss(t.param(est), t.constant(ref), mel_log, fb); },
        {&est});
  check("si_sdr_db", [&](Tape<double>& t) { return si_sdr_db(t.param(est), t.constant(ref)); }, {&est});

  // codec graphs
  {
    P wave{"wave", adnac::detail::gc_random({1, 1, 256}, rng), {}, false};
    auto toy = build_toy_codec_params<double>(4, cfg.seed + 1);
    const CodecSpec spec = toy_codec_spec(4);
    const auto r_lat = adnac::detail::gc_random({1, 4, 4}, rng);
    std::vector<P*> ps{&wave};
    for (auto* p : toy.pointers()) ps.push_back(p);
    check("toy_codec.encode", [&](Tape<double>& t) { return proj(encode_var(t.param(wave), spec, &toy), r_lat); }, ps);
    P lat{"lat", adnac::detail::gc_random({1, 4, 4}, rng), {}, false};
    const auto r_wave = adnac::detail::gc_random({1, 1, 256}, rng);
    std::vector<P*> ps2{&lat};
    for (auto* p : toy.pointers()) ps2.push_back(p);
    check("toy_codec.decode", [&](Tape<double>& t) { return proj(decode_var(t.param(lat), spec, &toy), r_wave); }, ps2);
  }

  // residual block with a 1x1 skip and the tiny U-Net
  {
    UNetConfig rc = gradcheck_unet_config();
    ParamStore<double> ps;
    Rng init = make_rng(stable_hash(cfg.seed, std::string_view("gradcheck-res")));
    adnac::detail::add_res_block(ps, init, "blk", 4, 8);
    for (auto* p : ps.pointers())
      if (p->name.ends_with(".b") || p->name.find("norm") != std::string::npos)
        for (double& v : p->value.data) v += 0.1 * std::normal_distribution<double>()(init);
    P xr{"x", adnac::detail::gc_random({2, 4, 7}, rng), {}, false};
    const auto r_res = adnac::detail::gc_random({2, 8, 7}, rng);
    std::vector<P*> all{&xr};
    for (auto* p : ps.pointers()) all.push_back(p);
    check("residual_block", [&](Tape<double>& t) { return proj(residual_block(t.param(xr), ps, "blk", rc), r_res); }, all);
  }
  {
    auto net = build_unet<double>(gradcheck_unet_config(), cfg.seed + 2);
    Rng jitter = make_rng(stable_hash(cfg.seed, std::string_view("gradcheck-unet")));
    // default biases and norm affines are 0/1; perturb so their gradients are generic
    for (auto* p : net.params.pointers())
      if (p->name.ends_with(".b") || p->name.find("norm") != std::string::npos)
        for (double& v : p->value.data) v += 0.1 * std::normal_distribution<double>()(jitter);
    P xu{"x", adnac::detail::gc_random({1, 4, 16}, rng), {}, false};
    const auto r_u = adnac::detail::gc_random({1, 4, 16}, rng);
    std::vector<P*> all{&xu};
    for (auto* p : net.params.pointers()) all.push_back(p);
    check("unet(base 4, levels 2, C_lat 4, F 16)",
          [&](Tape<double>& t) { return proj(unet_forward(t.param(xu), net), r_u); }, all);
  }
  return out;
}

inline bool gradcheck_suite_passed(const std::vector<GradCheckCase>& cases) {
  for (const auto& c : cases)
    if (!c.report.passed) return false;
  return !cases.empty();
}

}  // namespace adnac
