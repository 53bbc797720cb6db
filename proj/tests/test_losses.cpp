#include <catch_amalgamated.hpp>

#include <cmath>

#include "adnac/losses.hpp"
#include "adnac/rng.hpp"

using namespace adnac;

namespace {

Tensor<double> row_tensor(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>(Shape{1, 1, n}, std::move(v));
}

std::vector<double> gaussian(std::uint64_t seed, std::size_t n) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> x(n);
  for (double& v : x) v = nd(rng);
  return x;
}

MelLossConfig small_mel() {
  MelLossConfig cfg;
  cfg.mel.stft = {128, 32, true};
  cfg.mel.n_mels = 16;
  cfg.mel.sample_rate = 8000;
  return cfg;
}

}  // namespace

TEST_CASE("l1 waveform examples") {
  ad::Tape<double> tape;
  auto y = tape.constant(row_tensor({1, -1}));
  auto z = tape.constant(row_tensor({0, 0}));
  CHECK(ad::l1_waveform(z, y).value().item() == 1.0);
  CHECK(ad::l1_waveform(y, y).value().item() == 0.0);

  auto base = gaussian(1, 100);
  std::vector<double> off(base);
  for (double& v : off) v += 0.1;
  auto l = ad::l1_waveform(tape.constant(row_tensor(off)), tape.constant(row_tensor(base)));
  CHECK(std::abs(l.value().item() - 0.1) < 1e-12);

  CHECK_THROWS_AS(ad::l1_waveform(tape.constant(row_tensor({1, 2, 3})), y), ShapeError);
}

TEST_CASE("mel loss examples and gradient") {
  auto cfg = small_mel();
  auto fb = mel_filterbank(cfg.mel);
  auto y = gaussian(2, 512);
  std::vector<double> y2(y);
  for (double& v : y2) v *= 2;
  ad::Tape<double> tape;
  auto Y = tape.constant(row_tensor(y));
  CHECK(ad::mel_loss(Y, Y, cfg, fb).value().item() == 0.0);

  // |2M - M| = M
  auto l = ad::mel_loss(tape.constant(row_tensor(y2)), Y, cfg, fb).value().item();
  auto m = ad::mean(ad::mel_spectrogram(Y, cfg.mel, fb)).value().item();
  CHECK(std::abs(l - m) <= 1e-12 * m);

  Parameter<double> p{"yhat", row_tensor(gaussian(3, 512)), {}, false};
  for (bool l2 : {false, true}) {
    cfg.l2 = l2;
    auto build = [&](ad::Tape<double>& t) { return ad::mel_loss(t.param(p), t.constant(row_tensor(y)), cfg, fb); };
    auto rep = ad::grad_check(build, {&p}, 1e-6, 1e-4, 0);
    INFO("l2=" << l2 << " worst=" << rep.max_rel_error);
    CHECK(rep.passed);
  }
  CHECK_THROWS_AS(ad::mel_loss(tape.constant(row_tensor({1, 2})), Y, cfg, fb), ShapeError);
}

TEST_CASE("si-sdr hand example") {
  std::vector<double> y{1, 0, 0, 0}, yhat{1, 1, 0, 0};
  // alpha and the two energies carry a 1e-8 guard, leaving ~-8.7e-8 dB
  const double v = si_sdr_db(yhat, y);
  CHECK(std::abs(v) < 1e-6);
  const double alpha = 1.0 / (1.0 + kSiSdrEps);
  const double oracle =
      10 * std::log10((alpha * alpha + kSiSdrEps) / ((1 - alpha) * (1 - alpha) + 1 + kSiSdrEps));
  CHECK(std::abs(v - oracle) < 1e-15);

  ad::Tape<double> tape;
  auto a = tape.constant(row_tensor(yhat)), b = tape.constant(row_tensor(y));
  CHECK(std::abs(ad::si_sdr_db(a, b).value().item() - v) < 1e-15);
  CHECK(std::abs(ad::si_sdr_loss(a, b).value().item() + v) < 1e-15);
  CHECK(ad::si_sdr_db(b, b).value().item() == kDbClamp);
  CHECK(ad::si_sdr_loss(b, b).value().item() == -kDbClamp);
}

TEST_CASE("si-sdr scale invariance") {
  const std::size_t n = 16384;
  auto y = gaussian(10, n);
  auto e = gaussian(11, n);
  // residual energies stay well above eps here, so the guard moves results < 1e-9 dB
  for (double snr_mix : {0.5, 1.0, 2.0}) {
    std::vector<double> yhat(n);
    for (std::size_t i = 0; i < n; ++i) yhat[i] = y[i] + snr_mix * e[i];
    const double base = si_sdr_db(yhat, y);
    for (double alpha : {0.1, 1.0, 10.0}) {
      std::vector<double> s(yhat);
      for (double& v : s) v *= alpha;
      CHECK(std::abs(si_sdr_db(s, y) - base) <= 1e-9);
      std::vector<double> ry(y);
      for (double& v : ry) v *= alpha;
      CHECK(std::abs(si_sdr_db(yhat, ry) - base) <= 1e-9);
    }
  }
  // very clean estimate scaled down: eps matters, bounded by first-order terms
  {
    std::vector<double> yhat(n), s(n);
    double ee = 0;
    for (std::size_t i = 0; i < n; ++i) {
      yhat[i] = y[i] + 0.01 * e[i];
      s[i] = 0.1 * yhat[i];
      ee += 0.01 * 0.01 * e[i] * e[i];
    }
    const double bound = 10 / std::log(10.0) * kSiSdrEps / (0.01 * ee) * 1.1;
    CHECK(std::abs(si_sdr_db(s, y) - si_sdr_db(yhat, y)) <= bound);
  }
  // perfect reconstruction at any positive scale sits on the ceiling
  for (double alpha : {0.1, 3.0}) {
    std::vector<double> s(y);
    for (double& v : s) v *= alpha;
    CHECK(si_sdr_db(s, y) == kDbClamp);
  }
}

TEST_CASE("si-sdr degenerate and mismatched input") {
  std::vector<double> zero(8, 0.0), one(8, 1.0), short_sig(4, 1.0);
  CHECK_THROWS_AS(si_sdr_db(one, zero), DegenerateInputError);
  CHECK_THROWS_AS(si_sdr_db(one, short_sig), ShapeError);
  ad::Tape<double> tape;
  Tensor<double> t(Shape{2, 1, 8}, 1.0);
  for (std::size_t i = 8; i < 16; ++i) t.data[i] = 0.0;
  CHECK_THROWS_AS(ad::si_sdr_db(tape.constant(Tensor<double>(Shape{2, 1, 8}, 1.0)), tape.constant(t)),
                  DegenerateInputError);
}

TEST_CASE("batched si-sdr is the mean of rows") {
  const std::size_t B = 3, L = 200;
  auto y = gaussian(20, B * L), e = gaussian(21, B * L);
  std::vector<double> yhat(B * L);
  for (std::size_t i = 0; i < yhat.size(); ++i) yhat[i] = y[i] + 0.3 * (1 + i / L) * e[i];
  ad::Tape<double> tape;
  auto v = ad::si_sdr_db(tape.constant(Tensor<double>(Shape{B, 1, L}, yhat)),
                         tape.constant(Tensor<double>(Shape{B, 1, L}, y)))
               .value()
               .item();
  double mean = 0;
  for (std::size_t b = 0; b < B; ++b)
    mean += si_sdr_db(std::span<const double>(yhat.data() + b * L, L), std::span<const double>(y.data() + b * L, L));
  CHECK(std::abs(v - mean / B) < 1e-12);
}

TEST_CASE("si-sdr gradient matches finite differences") {
  const std::size_t B = 2, L = 64;
  auto y = gaussian(30, B * L);
  auto e = gaussian(31, B * L);
  Parameter<double> p{"yhat", Tensor<double>(Shape{B, 1, L}), {}, false};
  for (std::size_t i = 0; i < B * L; ++i) p.value.data[i] = 0.8 * y[i] + 0.5 * e[i];
  auto build = [&](ad::Tape<double>& t) {
    return ad::si_sdr_loss(t.param(p), t.constant(Tensor<double>(Shape{B, 1, L}, y)));
  };
  auto rep = ad::grad_check(build, {&p}, 1e-6, 1e-4, 0);
  INFO("worst=" << rep.max_rel_error);
  CHECK(rep.passed);

  // clamped rows contribute no gradient
  Parameter<double> q{"perfect", Tensor<double>(Shape{1, 1, L}, std::vector<double>(y.begin(), y.begin() + L)), {}, false};
  ad::Tape<double> tape;
  auto loss = ad::si_sdr_loss(tape.param(q), tape.constant(q.value));
  tape.backward(loss);
  for (double g : q.grad.data) CHECK(g == 0.0);
}

TEST_CASE("combined loss curriculum and weights") {
  auto cfg = small_mel();
  auto fb = mel_filterbank(cfg.mel);
  auto y = gaussian(40, 400), e = gaussian(41, 400);
  std::vector<double> yhat(400);
  for (std::size_t i = 0; i < 400; ++i) yhat[i] = y[i] + 0.4 * e[i];
  LossWeights w;
  CurriculumSchedule sched;

  ad::Tape<double> tape;
  auto Yh = tape.constant(row_tensor(yhat)), Y = tape.constant(row_tensor(y));
  for (int epoch = 0; epoch < 8; ++epoch) {
    auto br = ad::combined_loss(Yh, Y, w, epoch, sched, cfg, fb);
    CHECK(std::abs(br.sisdr_db - si_sdr_db(yhat, y)) < 1e-12);
    const double expect =
        br.l1 + br.mel - (epoch >= 5 ? w.sisdr * br.sisdr_db : 0.0);
    CHECK(std::abs(br.total.value().item() - expect) < 1e-12);
    if (epoch < 5) CHECK(br.sisdr_weight == 0.0);
    else CHECK(br.sisdr_weight > 0.0);
  }

  LossWeights only_l1{1.0, 0.0, 0.0};
  auto br = ad::combined_loss(Yh, Y, only_l1, 9, sched, cfg, fb);
  CHECK(br.total.value().item() == ad::l1_waveform(Yh, Y).value().item());

  CHECK_THROWS_AS(ad::combined_loss(Yh, Y, LossWeights{0, 0, 0}, 0, sched, cfg, fb), ConfigError);
  CHECK_THROWS_AS(ad::combined_loss(Yh, Y, LossWeights{-1, 1, 0}, 0, sched, cfg, fb), ConfigError);
}

TEST_CASE("combined loss is monotone in each term") {
  // total = w1*l1 + w2*mel - w3*sdr: raising one term with others fixed raises total
  auto cfg = small_mel();
  auto fb = mel_filterbank(cfg.mel);
  auto y = gaussian(50, 300), e = gaussian(51, 300);
  ad::Tape<double> tape;
  double prev_total = -1e300, prev_l1 = -1;
  for (double s : {0.1, 0.3, 0.9}) {
    std::vector<double> yhat(300);
    for (std::size_t i = 0; i < 300; ++i) yhat[i] = y[i] + s * e[i];
    auto br = ad::combined_loss(tape.constant(row_tensor(yhat)), tape.constant(row_tensor(y)), LossWeights{1, 0, 0}, 0,
                                CurriculumSchedule{}, cfg, fb);
    CHECK(br.l1 > prev_l1);
    CHECK(br.total.value().item() > prev_total);
    prev_l1 = br.l1;
    prev_total = br.total.value().item();
  }
}
