#include <catch_amalgamated.hpp>

#include <cstring>
#include <ranges>

#include "adnac/codec.hpp"

using namespace adnac;

namespace {

std::vector<float> noise(std::uint64_t seed, std::size_t n) {
  Rng rng = make_rng(seed);
  std::normal_distribution<float> nd;
  std::vector<float> x(n);
  for (float& v : x) v = nd(rng);
  return x;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("identity codec frame bookkeeping") {
  auto c = make_identity_codec(64);
  auto x = noise(1, 88200);
  auto lat = c.encode(std::span<const float>(x));
  CHECK(lat.frames() == 1379);
  CHECK(lat.channels() == 64);
  CHECK(c.encode(std::span<const float>(x.data(), 64)).frames() == 1);
  CHECK(c.encode(std::span<const float>(x.data(), 65)).frames() == 2);
  // channel k of frame f is sample f*hop + k
  CHECK(lat.values.data[5 * lat.frames() + 3] == x[3 * 64 + 5]);
}

TEST_CASE("identity codec round trip is bitwise lossless for every length") {
  auto c = make_identity_codec(64);
  auto x = noise(2, 10000);
  x[17] = -0.0f;
  x[18] = std::numeric_limits<float>::denorm_min();
  for (std::size_t len = 1; len <= 10000; ++len) {
    std::vector<float> s(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(len));
    auto lat = c.encode(std::span<const float>(s));
    REQUIRE(lat.frames() == frames_for(len, 64));
    auto y = c.decode(lat);
    REQUIRE(bitwise_equal(y.samples, s));
  }
}

TEST_CASE("identity codec differentiable path matches the direct path") {
  auto c = make_identity_codec(32);
  auto x = noise(3, 32 * 7);
  ad::Tape<float> tape;
  auto z = encode_var(tape.constant(Tensor<float>(Shape{1, 1, x.size()}, x)), c.spec, c.param_ptr());
  auto lat = c.encode(std::span<const float>(x));
  CHECK(z.value().data == lat.values.data);
  auto y = decode_var(z, c.spec, c.param_ptr());
  CHECK(y.value().data == x);
}

TEST_CASE("codec input validation") {
  auto c = make_identity_codec(64);
  CHECK_THROWS_AS(c.encode(std::span<const float>()), DegenerateInputError);
  Waveform w{std::vector<float>(100, 0.f), 16000};
  CHECK_THROWS_AS(c.encode(w), ConfigError);
  Latent bad;
  bad.values = Tensor<float>(Shape{32, 4});
  bad.hop = 64;
  bad.original_len = 200;
  CHECK_THROWS_AS(c.decode(bad), ShapeError);
  CHECK_NOTHROW(identity_codec_spec(64).validate());
  CodecSpec mismatched = identity_codec_spec(64);
  mismatched.c_lat = 32;
  CHECK_THROWS_AS(mismatched.validate(), ConfigError);
  CodecSpec zero_hop = identity_codec_spec(64);
  zero_hop.hop = 0;
  CHECK_THROWS_AS(zero_hop.validate(), ConfigError);
}

TEST_CASE("toy codec hop and length bookkeeping") {
  std::size_t hop = 1;
  for (std::size_t i = 0; i < toy::kLayers; ++i) hop *= toy::kStride;
  CHECK(hop == 64);
  CHECK(toy_codec_spec().hop == hop);

  Codec c;
  c.spec = toy_codec_spec(8);
  c.params = build_toy_codec_params<float>(8, 5);
  c.params.set_frozen(true);
  auto x = noise(4, 10000);
  for (std::size_t len = 1; len <= 10000; len += (len < 200 ? 1 : 97)) {
    auto lat = c.encode(std::span<const float>(x.data(), len));
    REQUIRE(lat.channels() == 8);
    REQUIRE(lat.frames() == frames_for(len, 64));
    REQUIRE(c.decode(lat).samples.size() == len);
  }
  for (std::size_t len : {9999u, 10000u}) REQUIRE(c.decode(c.encode(std::span<const float>(x.data(), len))).samples.size() == len);
}

TEST_CASE("toy codec gradients match finite differences") {
  auto ps = build_toy_codec_params<double>(4, 9);
  auto spec = toy_codec_spec(4);
  Parameter<double> x{"x", Tensor<double>(Shape{1, 1, 128}), {}, false};
  Rng rng = make_rng(6);
  std::normal_distribution<double> nd;
  for (double& v : x.value.data) v = nd(rng);
  Tensor<double> w(Shape{1, 1, 128});
  for (double& v : w.data) v = nd(rng);
  auto build = [&](ad::Tape<double>& t) {
    auto y = decode_var(encode_var(t.param(x), spec, &ps), spec, &ps);
    return ad::dot(y, t.constant(w));
  };
  std::vector<Parameter<double>*> check{&x};
  for (auto* p : ps.pointers()) check.push_back(p);
  auto rep = ad::grad_check(build, check, 1e-6, 1e-4, 40);
  INFO("worst=" << rep.max_rel_error);
  CHECK(rep.passed);

  // frozen codec parameters pass gradients to the latent but receive none
  ps.set_frozen(true);
  ps.zero_grad();
  Parameter<double> z{"z", Tensor<double>(Shape{1, 4, 2}, 0.3), {}, false};
  ad::Tape<double> tape;
  auto y = decode_var(tape.param(z), spec, &ps);
  tape.backward(ad::sum(y));
  double zg = 0;
  for (double g : z.grad.data) zg += std::abs(g);
  CHECK(zg > 0);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (double g : ps[i].grad.data) CHECK(g == 0.0);
}

TEST_CASE("latent statistics normalize and invert") {
  std::vector<Latent> lats(3);
  Rng rng = make_rng(7);
  std::normal_distribution<float> nd;
  for (std::size_t k = 0; k < 3; ++k) {
    lats[k].hop = 4;
    lats[k].values = Tensor<float>(Shape{4, 50 + 10 * k});
    lats[k].original_len = 4 * lats[k].frames();
    const std::size_t F = lats[k].frames();
    for (std::size_t f = 0; f < F; ++f) {
      lats[k].values.data[0 * F + f] = 3.0f + 2.0f * nd(rng);
      lats[k].values.data[1 * F + f] = -1.0f + 0.01f * nd(rng);
      lats[k].values.data[2 * F + f] = 0.5f;  // constant
      lats[k].values.data[3 * F + f] = 100.0f * nd(rng);
    }
  }
  auto st = fit_latent_stats(lats);
  CHECK(st.clamped_channels == 1);
  CHECK(st.std[2] == kMinLatentStd);

  std::vector<Latent> normed;
  for (const auto& l : lats) normed.push_back(normalize(l, st));
  for (const auto& l : normed)
    for (float v : l.values.data) REQUIRE(std::isfinite(v));
  auto st2 = fit_latent_stats(normed);
  for (std::size_t c : {0u, 1u, 3u}) {
    CHECK(std::abs(st2.mean[c]) < 1e-4);
    CHECK(std::abs(st2.std[c] - 1.0) < 1e-3);
  }
  for (float v : normed[0].values.data | std::views::drop(2 * normed[0].frames()) | std::views::take(normed[0].frames()))
    CHECK(v == 0.0f);

  for (std::size_t k = 0; k < 3; ++k) {
    auto back = denormalize(normed[k], st);
    for (std::size_t i = 0; i < back.values.size(); ++i)
      REQUIRE(std::abs(back.values.data[i] - lats[k].values.data[i]) <= 1e-6 * (1 + std::abs(lats[k].values.data[i])) * 4);
  }

  // differentiable variants agree with the plain ones
  ad::Tape<float> tape;
  Tensor<float> t(Shape{1, 4, lats[0].frames()}, lats[0].values.data);
  auto nv = normalize_var(tape.constant(t), st);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(nv.value().data[i] - normed[0].values.data[i]) < 1e-5f);
  auto dv = denormalize_var(nv, st);
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(std::abs(dv.value().data[i] - t.data[i]) <= 1e-5f * (1 + std::abs(t.data[i])));

  CHECK_THROWS_AS(fit_latent_stats(std::vector<Latent>{}), DegenerateInputError);
}

TEST_CASE("rvq quantization") {
  SECTION("vector in the first codebook quantizes exactly") {
    RvqCodebooks cb;
    cb.dim = 3;
    cb.books.resize(1);
    cb.books[0].resize(3, 3);
    cb.books[0] << 1, 2, 3, -1, 0, 4, 0.5, 0.5, 0.5;
    std::vector<double> x{-1, 0, 4};
    auto r = rvq_quantize(x, cb);
    CHECK(r.codes == std::vector<std::size_t>{1});
    CHECK(r.residual_norms.back() == 0.0);
    CHECK(r.quantized == x);
  }
  SECTION("two-stage example matches exhaustive search per stage") {
    RvqCodebooks cb;
    cb.dim = 2;
    cb.books.resize(2);
    cb.books[0].resize(3, 2);
    cb.books[0] << 0, 0, 4, 0, 0, 4;
    cb.books[1].resize(4, 2);
    cb.books[1] << 1, 0, -1, 0, 0, 1, 0, -1;
    std::vector<double> x{4.2, 0.9};
    auto r = rvq_quantize(x, cb);
    // stage 1: distances to (0,0),(4,0),(0,4) -> (4,0); residual (0.2,0.9) -> (0,1)
    CHECK(r.codes == std::vector<std::size_t>{1, 2});
    CHECK(r.quantized == std::vector<double>{4, 1});
    // brute-force oracle over the per-stage greedy choices
    std::vector<double> res = x;
    for (std::size_t s = 0; s < 2; ++s) {
      std::size_t best = 0;
      double bd = 1e300;
      for (Eigen::Index k = 0; k < cb.books[s].rows(); ++k) {
        double d = 0;
        for (std::size_t j = 0; j < 2; ++j) d += std::pow(res[j] - cb.books[s](k, static_cast<Eigen::Index>(j)), 2);
        if (d < bd) bd = d, best = static_cast<std::size_t>(k);
      }
      CHECK(r.codes[s] == best);
      for (std::size_t j = 0; j < 2; ++j) res[j] -= cb.books[s](static_cast<Eigen::Index>(best), static_cast<Eigen::Index>(j));
    }
  }
  SECTION("fitted codebooks give non-increasing residuals") {
    Rng rng = make_rng(8);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd data(400, 6);
    for (Eigen::Index i = 0; i < data.rows(); ++i)
      for (Eigen::Index j = 0; j < data.cols(); ++j) data(i, j) = nd(rng);
    auto cb = fit_rvq(data, RvqSpec{4, 16}, 3, 10);
    REQUIRE(cb.books.size() == 4);
    for (int t = 0; t < 200; ++t) {
      std::vector<double> x(6);
      for (double& v : x) v = 2 * nd(rng);
      auto r = rvq_quantize(x, cb);
      for (std::size_t s = 1; s < r.residual_norms.size(); ++s)
        REQUIRE(r.residual_norms[s] <= r.residual_norms[s - 1] + 1e-12);
    }
    std::vector<double> wrong(5, 0.0);
    CHECK_THROWS_AS(rvq_quantize(wrong, cb), ShapeError);
  }
}

TEST_CASE("toy codec pretraining lowers reconstruction error and freezes") {
  std::vector<std::vector<float>> chunks;
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto w = synth_tone_mix(s, 0.2, kDefaultSampleRate);
    chunks.push_back(w.samples);
  }
  ToyPretrainConfig cfg;
  cfg.steps = 60;
  cfg.batch = 4;
  cfg.crop_len = 2048;
  cfg.c_lat = 16;
  auto res = pretrain_toy_codec(chunks, cfg);
  CHECK(res.final_l1 < res.initial_l1);
  CHECK(res.step_losses.size() == 60);
  for (std::size_t i = 0; i < res.codec.params.size(); ++i) CHECK(res.codec.params[i].frozen);

  std::vector<std::vector<float>> few(chunks.begin(), chunks.begin() + 99);
  CHECK_THROWS_AS(pretrain_toy_codec(few, cfg), DegenerateInputError);
}
