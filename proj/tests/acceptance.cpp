// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance 3 7 9      run a subset
//
// Exit status is 0 only if every selected criterion passes.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "adnac/gradcheck.hpp"
#include "adnac/metrics.hpp"
#include "adnac/trainer.hpp"

using namespace adnac;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [failed]");
  }
};

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

fs::path work_root() {
  static const fs::path p = [] {
    fs::path r = fs::temp_directory_path() / "adnac_acceptance";
    fs::remove_all(r);
    fs::create_directories(r);
    return r;
  }();
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void progress(const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); }

// Small paired dataset and a tiny denoiser config shared by criteria 5, 8, 10.
fs::path tiny_dataset(const fs::path& dir, const fs::path& tones) {
  DatasetConfig dc;
  dc.clean_dirs = {tones.string()};
  dc.kinds = {DegradationKind::WhiteNoise, DegradationKind::NcArtifact, DegradationKind::SyntheticReverb};
  dc.variants_per_chunk = 1;
  dc.chunk_len = 22050;
  dc.global_seed = 17;
  dc.out_dir = dir.string();
  build_dataset(dc);
  return dir;
}

const fs::path& tiny_tones() {
  static const fs::path p = [] {
    const fs::path t = work_root() / "tiny_tones";
    write_tone_mix_corpus(t, 10, 0.5, 11);
    return t;
  }();
  return p;
}

const fs::path& tiny_data() {
  static const fs::path p = tiny_dataset(work_root() / "tiny_data", tiny_tones());
  return p;
}

RunConfig tiny_run(const fs::path& out, int epochs) {
  RunConfig rc;
  rc.dataset.chunk_len = 22050;
  rc.codec.kind = CodecKind::IdentityFrame;
  rc.codec.hop = 8;
  rc.unet.base_channels = 8;
  rc.unet.levels = 2;
  rc.unet.max_channels = 16;
  rc.unet.res_blocks_per_level = 1;
  rc.unet.norm_groups = 4;
  rc.trainer.data_dir = tiny_data().string();
  rc.trainer.out_dir = out.string();
  rc.trainer.epochs = epochs;
  rc.trainer.batch_size = 4;
  rc.trainer.seed = 21;
  rc.trainer.optim.lr = 1e-3;
  return rc;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  Outcome o;
  const auto t0 = Clock::now();
  GradCheckSuiteConfig cfg;
  cfg.h = 1e-4;
  cfg.tol = 1e-4;
  const auto cases = run_gradcheck_suite(cfg);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  for (const auto& c : cases)
    if (c.report.max_rel_error >= worst) {
      worst = c.report.max_rel_error;
      worst_name = c.name;
    }
  o.require(gradcheck_suite_passed(cases),
            std::to_string(cases.size()) + " cases, max rel err " + fmt("%.2e", worst) + " (" + worst_name + ") < 1e-4");
  o.require(secs < 120, "runtime " + fmt("%.1f", secs) + " s < 120 s");
  return o;
}

Outcome criterion2() {
  Outcome o;
  Rng rng = make_rng(2);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t len = static_cast<std::size_t>(uniform_int(rng, 256, 8192));
    const Waveform clean = synth_tone_mix(rng(), static_cast<double>(len) / kDefaultSampleRate);
    const Waveform noise = white_noise(rng(), static_cast<std::size_t>(uniform_int(rng, 64, 8192)));
    const double target = uniform(rng, 0.0, 15.0);
    const auto m = mix_at_snr(clean, noise, target);
    worst = std::max(worst, std::abs(snr_db(clean.span(), m.mix.span()) - target));
  }
  o.require(worst < 1e-6, "1000 triples, max |measured - target| " + fmt("%.2e", worst) + " dB < 1e-6");
  return o;
}

Outcome criterion3() {
  Outcome o;
  Rng rng = make_rng(3);
  std::normal_distribution<double> nd;
  const std::size_t n = 16384;
  std::vector<double> y(n), yhat(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = nd(rng);
    yhat[i] = y[i] + 0.5 * nd(rng);
  }
  const double base = si_sdr_db(yhat, y);
  double worst = 0;
  for (double a : {0.1, 1.0, 10.0}) {
    std::vector<double> s(yhat);
    for (double& v : s) v *= a;
    worst = std::max(worst, std::abs(si_sdr_db(s, y) - base));
  }
  o.require(worst <= 1e-9, "scale invariance over {0.1,1,10}: max dev " + fmt("%.1e", worst) + " dB <= 1e-9");
  const double hand = si_sdr_db(std::vector<double>{1, 1, 0, 0}, std::vector<double>{1, 0, 0, 0});
  // the 1e-8 stabilizer leaves about -8.7e-8 dB
  o.require(std::abs(hand) < 1e-6, "hand example " + fmt("%.2e", hand) + " dB == 0 (|v| < 1e-6)");
  return o;
}

Outcome criterion4() {
  Outcome o;
  UNetConfig cfg;  // default configuration: base 64, five levels, cap 512
  auto net = build_unet<float>(cfg, 4);
  bool shapes_ok = true;
  std::vector<std::size_t> trace;
  std::size_t bottleneck = 0;
  for (std::size_t F : {32u, 100u, 172u, 4096u}) {
    ad::Tape<float> tape;
    UNetTrace tr;
    Tensor<float> x(Shape{1, cfg.in_channels, F}, 0.1f);
    auto y = unet_forward(tape.constant(std::move(x)), net, &tr);
    shapes_ok = shapes_ok && y.shape() == Shape{1, cfg.in_channels, F};
    trace = tr.encoder_channels;
    bottleneck = tr.bottleneck_channels;
  }
  std::string ts;
  for (auto c : trace) ts += (ts.empty() ? "" : ",") + std::to_string(c);
  o.require(trace == std::vector<std::size_t>{64, 128, 256, 512, 512}, "channel trace [" + ts + "]");
  o.require(bottleneck == 512, "bottleneck " + std::to_string(bottleneck));
  o.require(shapes_ok, "output shape == input shape for F in {32,100,172,4096}");
  return o;
}

Outcome criterion5() {
  Outcome o;
  const fs::path out = work_root() / "c5";
  train(tiny_run(out, 7));
  std::ifstream log(out / "train_log.jsonl");
  std::vector<double> weights;
  for (std::string line; std::getline(log, line);) weights.push_back(Json::parse(line).at("sisdr_weight").get<double>());
  bool ok = weights.size() == 7;
  for (std::size_t e = 0; e < weights.size(); ++e) ok = ok && (e < 5 ? weights[e] == 0.0 : weights[e] > 0.0);
  std::string ws;
  for (double w : weights) ws += (ws.empty() ? "" : ",") + fmt("%g", w);
  o.require(ok, "logged SI-SDR weights by epoch [" + ws + "]");
  return o;
}

Outcome criterion6() {
  Outcome o;
  const auto t0 = Clock::now();
  const fs::path root = work_root() / "c6";
  write_tone_mix_corpus(root / "tones", 300, 2.0, 7);
  DatasetConfig dc;
  dc.clean_dirs = {(root / "tones").string()};
  dc.kinds = {DegradationKind::WhiteNoise, DegradationKind::NcArtifact, DegradationKind::SyntheticReverb};
  dc.variants_per_chunk = 1;  // one noisy version per chunk: 300 training-set pairs in total
  dc.snr_min_db = 0;
  dc.snr_max_db = 15;
  dc.global_seed = 1;
  dc.out_dir = (root / "data").string();
  build_dataset(dc);

  RunConfig rc;
  rc.codec.kind = CodecKind::IdentityFrame;
  rc.codec.hop = 256;
  rc.trainer.data_dir = dc.out_dir;
  rc.trainer.out_dir = (root / "run").string();
  rc.trainer.epochs = 30;
  rc.trainer.batch_size = 16;
  rc.trainer.optim.lr = 1e-4;
  TrainOptions opts;
  opts.log = progress;
  const auto res = train(rc, opts);

  auto model = load_model(res.last_checkpoint);
  const auto test = filter_split(load_manifest_dir(dc.out_dir), Split::Test);
  double noisy = 0, denoised = 0;
  for (const auto& e : test) {
    const Waveform c = read_wav(fs::path(dc.out_dir) / e.clean), n = read_wav(fs::path(dc.out_dir) / e.noisy);
    const Waveform d = denoise_waveform(model, n);
    noisy += si_sdr_db(n.span(), c.span());
    denoised += si_sdr_db(d.span(), c.span());
  }
  noisy /= static_cast<double>(test.size());
  denoised /= static_cast<double>(test.size());
  const double secs = seconds_since(t0);
  const auto& h = res.history;
  o.require(h.size() == 30 && h.back().val_total < h.front().val_total,
            "val loss epoch 1 " + fmt("%.4f", h.front().val_total) + " -> epoch 30 " + fmt("%.4f", h.back().val_total));
  o.require(denoised >= noisy + 3.0, "test SI-SDR noisy " + fmt("%.2f", noisy) + " dB, denoised " +
                                         fmt("%.2f", denoised) + " dB (n=" + std::to_string(test.size()) +
                                         ", need >= +3 dB)");
  o.require(secs < 45 * 60, "runtime " + fmt("%.1f", secs / 60) + " min < 45 min");
  return o;
}

Outcome criterion7() {
  Outcome o;
  Codec id = make_identity_codec(64);
  bool bitwise = true;
  Rng rng = make_rng(7);
  std::normal_distribution<float> nd;
  std::vector<float> sig(10000);
  for (float& v : sig) v = nd(rng);
  for (std::size_t len = 1; len <= 10000 && bitwise; ++len) {
    Waveform w;
    w.samples.assign(sig.begin(), sig.begin() + static_cast<std::ptrdiff_t>(len));
    const Waveform back = id.decode(id.encode(w));
    bitwise = back.samples.size() == len && std::memcmp(back.samples.data(), w.samples.data(), len * sizeof(float)) == 0;
  }
  o.require(bitwise, "IdentityFrame round trip bitwise for lengths 1..10000");

  // toy codec: pretrain on tone chunks, score on tones it never saw
  std::vector<std::vector<float>> chunks;
  for (std::size_t i = 0; i < 120; ++i) chunks.push_back(synth_tone_mix(stable_hash(70, i), 0.25).samples);
  ToyPretrainConfig pc;
  const auto pre = pretrain_toy_codec(chunks, pc);
  o.require(pre.final_l1 < pre.initial_l1,
            "toy L1 " + fmt("%.4f", pre.initial_l1) + " -> " + fmt("%.4f", pre.final_l1));
  Codec toy = pre.codec;
  double sdr = 0;
  const int n_held = 10;
  for (int i = 0; i < n_held; ++i) {
    const Waveform w = synth_tone_mix(stable_hash(71, static_cast<std::uint64_t>(i)), 0.5);
    const Waveform back = toy.decode(toy.encode(w));
    sdr += si_sdr_db(back.span(), w.span()) / n_held;
  }
  o.require(sdr >= 15.0, "toy held-out round-trip SI-SDR " + fmt("%.1f", sdr) + " dB >= 15");

  // RVQ on random latent vectors
  Eigen::MatrixXd vecs(600, 8);
  std::normal_distribution<double> ndd;
  for (Eigen::Index r = 0; r < vecs.rows(); ++r)
    for (Eigen::Index c = 0; c < vecs.cols(); ++c) vecs(r, c) = ndd(rng);
  RvqSpec spec;
  spec.stages = 9;
  spec.codebook_size = 32;
  const auto cb = fit_rvq(vecs, spec, 7);
  bool monotone = true;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> x(8);
    for (double& v : x) v = 2.0 * ndd(rng);
    const auto r = rvq_quantize(x, cb);
    for (std::size_t s = 1; s < r.residual_norms.size(); ++s)
      monotone = monotone && r.residual_norms[s] <= r.residual_norms[s - 1];
  }
  o.require(monotone, "RVQ residual norm non-increasing per stage (200 vectors, 9 stages)");
  std::vector<double> member(cb.books[0].row(5).data(), cb.books[0].row(5).data() + 8);
  const auto rm = rvq_quantize(member, cb, 1);
  o.require(rm.residual_norms.back() == 0.0, "codebook vector quantizes to zero residual");
  return o;
}

Outcome criterion8() {
  Outcome o;
  const fs::path a = tiny_dataset(work_root() / "c8_data_a", tiny_tones());
  const fs::path b = tiny_dataset(work_root() / "c8_data_b", tiny_tones());
  o.require(slurp(a / "manifest.jsonl") == slurp(b / "manifest.jsonl"), "manifests byte-identical");

  // the checkpoint embeds the resolved config, out_dir included, so the rerun uses the same directory
  const fs::path r1 = work_root() / "c8_r1", r3 = work_root() / "c8_r3";
  train(tiny_run(r1, 4));
  const std::string first = slurp(r1 / "last.ckpt");
  train(tiny_run(r1, 4));
  o.require(!first.empty() && first == slurp(r1 / "last.ckpt"), "repeated training gives byte-identical checkpoints");
  RunConfig part = tiny_run(r3, 4);
  part.trainer.stop_after_epochs = 2;
  train(part);
  part.trainer.stop_after_epochs = -1;
  TrainOptions opts;
  opts.resume = r3 / "last.ckpt";
  train(part, opts);
  const auto c1 = load_checkpoint(r1 / "last.ckpt"), c3 = load_checkpoint(r3 / "last.ckpt");
  bool same = c1.tensors.size() == c3.tensors.size();
  for (std::size_t i = 0; same && i < c1.tensors.size(); ++i)
    same = c1.tensors[i].first == c3.tensors[i].first && c1.tensors[i].second.data == c3.tensors[i].second.data;
  o.require(same, "resume from epoch 2 matches uninterrupted 4-epoch run bitwise (all tensors)");
  return o;
}

Outcome criterion9() {
  Outcome o;
  const auto files = write_tone_mix_corpus(work_root() / "c9_tones", 50, 2.0, 9);
  double lo = 1;
  for (const auto& f : files) {
    const Waveform w = read_wav(f);
    lo = std::min(lo, stoi(w.span(), w.span(), w.sample_rate));
  }
  o.require(lo >= 0.99, "min stoi(y,y) over 50 files " + fmt("%.4f", lo) + " >= 0.99");

  const Waveform probe = read_wav(files.front());
  const Waveform noise = white_noise(90, probe.samples.size());
  std::string vals;
  bool mono = true;
  double prev = 2;
  for (double snr : {20.0, 10.0, 0.0, -10.0}) {
    const double d = stoi(probe.span(), mix_at_snr(probe, noise, snr).mix.span(), kDefaultSampleRate);
    mono = mono && d <= prev;
    prev = d;
    vals += (vals.empty() ? "" : ", ") + fmt("%.3f", d);
  }
  o.require(mono, "STOI at 20/10/0/-10 dB: " + vals + " non-increasing");
  return o;
}

Outcome criterion10() {
  Outcome o;
  const fs::path run = work_root() / "c10";
  auto res = train(tiny_run(run, 1));
  auto model = load_model(res.last_checkpoint);
  std::vector<ManifestEntry> entries(5000);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "t%05zu", i);
    entries[i].id = id;
    entries[i].split = Split::Test;
    entries[i].seed = i;
  }
  std::set<std::string> loaded;
  PairLoader loader = [&](const ManifestEntry& e) {
    loaded.insert(e.id);
    const Waveform c = synth_tone_mix(stable_hash(100, e.seed), 0.5, 16000);
    return EvalPair{c, mix_at_snr(c, white_noise(e.seed, c.size(), 16000), 5.0).mix};
  };
  DenoiseFn den = [&](const Waveform& w) { return denoise_waveform(model, w); };
  const auto r1 = evaluate(entries, loader, den, 1000, 5);
  const std::size_t distinct = loaded.size();
  const auto r2 = evaluate(entries, loader, den, 1000, 5);
  o.require(r1.n_selected == 1000 && distinct == 1000 && r1.rows.size() + r1.n_errors == 1000,
            "selected " + std::to_string(r1.n_selected) + " distinct " + std::to_string(distinct) + " of 5000");
  bool same = r1.rows.size() == r2.rows.size() && r1.mean_denoised.stoi == r2.mean_denoised.stoi &&
              r1.mean_noisy.snr_db == r2.mean_noisy.snr_db;
  for (std::size_t i = 0; same && i < r1.rows.size(); ++i) same = r1.rows[i].id == r2.rows[i].id;
  o.require(same, "deterministic in seed");
  double ms = 0, md = 0, mt = 0;
  for (const auto& r : r1.rows) {
    ms += r.noisy.snr_db;
    md += r.denoised.si_sdr_db;
    mt += r.denoised.stoi;
  }
  const double k = static_cast<double>(r1.rows.size());
  const bool means = std::abs(ms / k - r1.mean_noisy.snr_db) < 1e-9 && std::abs(md / k - r1.mean_denoised.si_sdr_db) < 1e-9 &&
                     std::abs(mt / k - r1.mean_denoised.stoi) < 1e-12;
  o.require(means, "reported means equal arithmetic means of " + std::to_string(r1.rows.size()) +
                       " rows (noisy SNR " + fmt("%.2f", r1.mean_noisy.snr_db) + " dB)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, criterion9, criterion10};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) {
    if (!selected.empty() && !selected.count(i)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(i - 1)]();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failures;
    std::printf("criterion %d: %s  %s  (%.1fs)\n", i, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
