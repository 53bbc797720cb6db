#pragma once

// Denoiser training and inference: noisy chunk -> codec encode -> normalize
// -> U-Net -> denormalize -> frozen decode -> combined loss against the clean
// chunk. Checkpoints carry everything needed to resume or to denoise.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "adnac/audio_io.hpp"
#include "adnac/checkpoint.hpp"
#include "adnac/codec.hpp"
#include "adnac/config.hpp"
#include "adnac/degrade.hpp"
#include "adnac/denoiser.hpp"
#include "adnac/losses.hpp"
#include "adnac/optim.hpp"

namespace adnac {

// ---- codec persistence ----------------------------------------------------

inline Json codec_spec_json(const CodecSpec& s) {
  return Json{{"kind", codec_kind_name(s.kind)}, {"c_lat", s.c_lat}, {"hop", s.hop}, {"sample_rate", s.sample_rate}};
}

inline CodecSpec codec_spec_from_json(const Json& j) {
  CodecSpec s;
  try {
    s.kind = parse_codec_kind(j.at("kind").get<std::string>());
    s.c_lat = j.at("c_lat").get<std::size_t>();
    s.hop = j.at("hop").get<std::size_t>();
    s.sample_rate = j.at("sample_rate").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad codec description: ") + e.what());
  }
  s.validate();
  return s;
}

inline void save_codec(const std::filesystem::path& path, const Codec& codec, const Json& extra = Json::object()) {
  CheckpointData ck;
  ck.state["kind"] = "codec";
  ck.state["codec"] = codec_spec_json(codec.spec);
  ck.state["info"] = extra;
  put_params(ck, codec.params);
  save_checkpoint(path, ck);
}

inline Codec codec_from_checkpoint(const CheckpointData& ck) {
  Codec c;
  c.spec = codec_spec_from_json(ck.state.at("codec"));
  if (c.spec.kind == CodecKind::ToyConv) {
    c.params = build_toy_codec_params<float>(c.spec.c_lat, 0);
    load_params(ck, c.params);
  }
  c.params.set_frozen(true);
  return c;
}

inline Codec load_codec(const std::filesystem::path& path) { return codec_from_checkpoint(load_checkpoint(path)); }

inline Codec make_codec(const CodecSection& cs) {
  if (cs.kind == CodecKind::IdentityFrame) return make_identity_codec(cs.hop);
  if (cs.checkpoint.empty()) throw ConfigError("codec.checkpoint is required for the toy codec (run pretrain-codec)");
  Codec c = load_codec(cs.checkpoint);
  if (c.spec.kind != CodecKind::ToyConv || c.spec.c_lat != cs.c_lat)
    throw ConfigError("codec checkpoint " + cs.checkpoint + " does not match codec.c_lat");
  return c;
}

inline Json stats_json(const LatentStats& s) {
  return Json{{"mean", s.mean}, {"std", s.std}, {"clamped_channels", s.clamped_channels}};
}

inline LatentStats stats_from_json(const Json& j) {
  LatentStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  s.clamped_channels = j.at("clamped_channels").get<std::size_t>();
  if (s.mean.size() != s.std.size()) throw FormatError("latent stats: mean/std length mismatch");
  return s;
}

// ---- model bundle ---------------------------------------------------------

struct DenoiserModel {
  RunConfig config;
  Codec codec;
  UNet<float> unet;
  LatentStats stats;
  std::size_t chunk_len = kDefaultChunkLen;
};

// (B, C, F) normalized noisy latents -> (B, 1, out_len) waveform estimate.
inline ad::Var<float> model_forward(ad::Tape<float>& tape, Tensor<float> zn, DenoiserModel& m, std::size_t out_len) {
  auto z = unet_forward(tape.constant(std::move(zn)), m.unet);
  auto y = decode_var(denormalize_var(z, m.stats), m.codec.spec, m.codec.param_ptr());
  return y.shape().back() == out_len ? y : ad::crop_time(y, out_len);
}

inline Waveform denoise_waveform(DenoiserModel& m, const Waveform& in) {
  if (in.samples.empty()) throw DegenerateInputError("denoise: empty input");
  const int sr = m.codec.spec.sample_rate;
  Waveform x = in.sample_rate == sr ? in : resample(in, sr);
  Waveform out;
  out.sample_rate = sr;
  out.samples.reserve(x.samples.size());
  for (std::size_t off = 0; off < x.samples.size(); off += m.chunk_len) {
    const std::size_t len = std::min(m.chunk_len, x.samples.size() - off);
    auto lat = normalize(m.codec.encode(std::span<const float>(x.samples.data() + off, len)), m.stats);
    ad::Tape<float> tape;
    Tensor<float> zn(Shape{1, lat.channels(), lat.frames()}, std::move(lat.values.data));
    auto y = model_forward(tape, std::move(zn), m, len);
    out.samples.insert(out.samples.end(), y.value().data.begin(), y.value().data.end());
  }
  if (in.sample_rate != sr) {
    out = resample(out, in.sample_rate);
    out.samples.resize(in.samples.size(), 0.0f);
  }
  return out;
}

// ---- training data --------------------------------------------------------

struct TrainItem {
  std::string id;
  Tensor<float> latent;  // normalized noisy latent (C, F)
  std::vector<float> clean;
};

struct TrainingData {
  std::vector<TrainItem> train;
  std::vector<TrainItem> val;
  std::size_t chunk_len = 0;
};

inline std::vector<ManifestEntry> load_manifest_dir(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.jsonl";
  if (!std::filesystem::exists(path)) throw ConfigError("no manifest.jsonl in " + dir.string());
  auto m = read_manifest(path);
  if (m.empty()) throw ConfigError("manifest " + path.string() + " is empty");
  return m;
}

inline std::vector<Latent> encode_entries(Codec& codec, const std::filesystem::path& dir,
                                          const std::vector<ManifestEntry>& es, std::vector<std::vector<float>>* clean) {
  std::vector<Latent> out;
  out.reserve(es.size());
  for (const auto& e : es) {
    Waveform noisy = read_wav(dir / e.noisy);
    out.push_back(codec.encode(noisy));
    if (clean) {
      Waveform c = read_wav(dir / e.clean);
      if (c.samples.size() != noisy.samples.size()) throw FormatError("clean/noisy length mismatch for " + e.id);
      clean->push_back(std::move(c.samples));
    }
  }
  return out;
}

// Encodes train and validation pairs; fits normalization on train latents
// unless `stats` already holds checkpointed values.
inline TrainingData load_training_data(const RunConfig& rc, Codec& codec, LatentStats& stats, bool fit_stats) {
  const std::filesystem::path dir = rc.trainer.data_dir;
  auto manifest = load_manifest_dir(dir);
  TrainingData td;
  for (Split s : {Split::Train, Split::Val}) {
    auto es = filter_split(manifest, s);
    if (es.empty()) throw ConfigError(std::string("manifest has no ") + split_name(s) + " entries");
    std::vector<std::vector<float>> clean;
    auto lats = encode_entries(codec, dir, es, &clean);
    if (s == Split::Train && fit_stats) {
      std::vector<const Tensor<float>*> ptrs;
      const std::size_t n = rc.trainer.stats_max_items ? std::min(rc.trainer.stats_max_items, lats.size()) : lats.size();
      for (std::size_t i = 0; i < n; ++i) ptrs.push_back(&lats[i].values);
      stats = fit_latent_stats(ptrs);
    }
    auto& dst = s == Split::Train ? td.train : td.val;
    for (std::size_t i = 0; i < es.size(); ++i) {
      if (td.chunk_len == 0) td.chunk_len = clean[i].size();
      if (clean[i].size() != td.chunk_len) throw FormatError("all training chunks must share one length");
      dst.push_back({es[i].id, normalize(std::move(lats[i]), stats).values, std::move(clean[i])});
    }
  }
  return td;
}

// ---- training -------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_total = 0;
  double val_total = 0;
  double l1 = 0;  // train-split running means of the unweighted terms
  double mel = 0;
  double sisdr_db = 0;
  double sisdr_weight = 0;
  double val_l1 = 0;
  double val_mel = 0;
  double val_sisdr_db = 0;
  double seconds = 0;
};

// Wall time is left out of checkpoints so they depend only on seeds and config.
inline Json to_json_record(const EpochRecord& r, bool with_seconds = true) {
  Json j{{"epoch", r.epoch},         {"lr", r.lr},           {"train_total", r.train_total},
              {"val_total", r.val_total}, {"l1", r.l1},           {"mel", r.mel},
              {"sisdr_db", r.sisdr_db},   {"sisdr_weight", r.sisdr_weight}, {"val_l1", r.val_l1},
              {"val_mel", r.val_mel},     {"val_sisdr_db", r.val_sisdr_db}};
  if (with_seconds) j["seconds"] = r.seconds;
  return j;
}

inline EpochRecord record_from_json(const Json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  r.train_total = j.at("train_total").get<double>();
  r.val_total = j.at("val_total").get<double>();
  r.l1 = j.at("l1").get<double>();
  r.mel = j.at("mel").get<double>();
  r.sisdr_db = j.at("sisdr_db").get<double>();
  r.sisdr_weight = j.at("sisdr_weight").get<double>();
  r.val_l1 = j.at("val_l1").get<double>();
  r.val_mel = j.at("val_mel").get<double>();
  r.val_sisdr_db = j.at("val_sisdr_db").get<double>();
  r.seconds = j.value("seconds", 0.0);
  return r;
}

struct TrainerState {
  int next_epoch = 0;
  AdamWState<float> opt;
  PlateauState sched;
  std::vector<EpochRecord> history;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val = 0;
  std::uint64_t codec_checksum_before = 0;
  std::uint64_t codec_checksum_after = 0;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

struct TrainOptions {
  std::filesystem::path resume;  // checkpoint to continue from
  std::function<void(const std::string&)> log;
};

namespace detail {

inline double json_double_or_inf(const Json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}
inline Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline CheckpointData make_train_checkpoint(const DenoiserModel& m, const TrainerState& st) {
  CheckpointData ck;
  ck.state["kind"] = "denoiser";
  ck.state["config"] = to_config_json(m.config);
  ck.state["codec"] = codec_spec_json(m.codec.spec);
  ck.state["unet_in_channels"] = m.unet.config.in_channels;
  ck.state["latent_stats"] = stats_json(m.stats);
  ck.state["chunk_len"] = m.chunk_len;
  ck.state["codec_checksum"] = m.codec.params.checksum();
  ck.state["epoch"] = st.next_epoch;
  ck.state["optimizer"] = {{"t", st.opt.t}, {"lr", st.opt.config.lr}};
  ck.state["scheduler"] = {{"best", finite_or_null(st.sched.best)},
                           {"bad_epochs", st.sched.bad_epochs},
                           {"reductions", st.sched.reductions}};
  // batches are drawn from a generator re-seeded per epoch; this is the one
  // the next epoch will start from
  ck.state["rng"] = rng_state(make_rng(stable_hash(m.config.trainer.seed, std::string_view("epoch-shuffle"),
                                                   static_cast<std::uint64_t>(st.next_epoch))));
  ck.state["best_val"] = finite_or_null(st.best_val);
  ck.state["best_epoch"] = st.best_epoch;
  Json hist = Json::array();
  for (const auto& r : st.history) hist.push_back(to_json_record(r, false));
  ck.state["history"] = hist;
  put_params(ck, m.codec.params);
  put_params(ck, m.unet.params);
  for (const auto& [name, v] : st.opt.m) ck.put("optim.m/" + name, Tensor<float>(Shape{v.size()}, v));
  for (const auto& [name, v] : st.opt.v) ck.put("optim.v/" + name, Tensor<float>(Shape{v.size()}, v));
  return ck;
}

}  // namespace detail

inline DenoiserModel model_from_checkpoint(const CheckpointData& ck, TrainerState* st = nullptr) {
  try {
    if (ck.state.at("kind").get<std::string>() != "denoiser") throw FormatError("checkpoint is not a denoiser checkpoint");
    DenoiserModel m;
    m.config = from_config_json<RunConfig>(ck.state.at("config"));
    m.codec.spec = codec_spec_from_json(ck.state.at("codec"));
    if (m.codec.spec.kind == CodecKind::ToyConv) {
      m.codec.params = build_toy_codec_params<float>(m.codec.spec.c_lat, 0);
      load_params(ck, m.codec.params);
      m.codec.params.set_frozen(true);
    }
    UNetConfig ucfg = m.config.unet;
    ucfg.in_channels = ck.state.at("unet_in_channels").get<std::size_t>();
    m.unet = build_unet<float>(ucfg, 0);
    load_params(ck, m.unet.params);
    m.stats = stats_from_json(ck.state.at("latent_stats"));
    m.chunk_len = ck.state.at("chunk_len").get<std::size_t>();
    if (m.stats.channels() != ucfg.in_channels || ucfg.in_channels != m.codec.spec.c_lat)
      throw FormatError("checkpoint channel counts are inconsistent");
    if (st) {
      st->next_epoch = ck.state.at("epoch").get<int>();
      st->opt.config = m.config.trainer.optim;
      st->opt.t = ck.state.at("optimizer").at("t").get<std::uint64_t>();
      st->opt.config.lr = ck.state.at("optimizer").at("lr").get<double>();
      st->sched.config = m.config.trainer.plateau;
      st->sched.best = detail::json_double_or_inf(ck.state.at("scheduler").at("best"));
      st->sched.bad_epochs = ck.state.at("scheduler").at("bad_epochs").get<int>();
      st->sched.reductions = ck.state.at("scheduler").at("reductions").get<int>();
      st->best_val = detail::json_double_or_inf(ck.state.at("best_val"));
      st->best_epoch = ck.state.at("best_epoch").get<int>();
      st->history.clear();
      for (const auto& r : ck.state.at("history")) st->history.push_back(record_from_json(r));
      st->opt.m.clear();
      st->opt.v.clear();
      for (const auto& [name, t] : ck.tensors) {
        if (name.starts_with("optim.m/")) st->opt.m[name.substr(8)] = t.data;
        if (name.starts_with("optim.v/")) st->opt.v[name.substr(8)] = t.data;
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed denoiser checkpoint: ") + e.what());
  }
}

inline DenoiserModel load_model(const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); }

inline void write_curves_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& h) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "epoch,lr,train_total,val_total,l1,mel,sisdr_db\n";
  char buf[256];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_total, r.val_total, r.l1,
                  r.mel, r.sisdr_db);
    f << buf;
  }
}

namespace detail {

struct BatchTotals {
  double total = 0, l1 = 0, mel = 0, sisdr = 0, weight = 0;
  std::size_t n = 0;
  void add(const ad::LossBreakdown<float>& b, std::size_t count) {
    total += static_cast<double>(b.total.value().item()) * count;
    l1 += b.l1 * count;
    mel += b.mel * count;
    sisdr += b.sisdr_db * count;
    weight = b.sisdr_weight;
    n += count;
  }
};

inline void assemble(const std::vector<TrainItem>& items, const std::vector<std::size_t>& idx, std::size_t from,
                     std::size_t count, Tensor<float>& z, Tensor<float>& clean) {
  const auto& first = items[idx[from]].latent;
  const std::size_t C = first.dim(0), F = first.dim(1), L = items[idx[from]].clean.size();
  z = Tensor<float>(Shape{count, C, F});
  clean = Tensor<float>(Shape{count, 1, L});
  for (std::size_t b = 0; b < count; ++b) {
    const auto& it = items[idx[from + b]];
    std::copy(it.latent.data.begin(), it.latent.data.end(), z.data.begin() + b * C * F);
    std::copy(it.clean.begin(), it.clean.end(), clean.data.begin() + b * L);
  }
}

}  // namespace detail

inline TrainResult train(const RunConfig& rc_in, const TrainOptions& opts = {}) {
  auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  TrainerState st;
  DenoiserModel m;
  TrainingData td;
  if (!opts.resume.empty()) {
    m = model_from_checkpoint(load_checkpoint(opts.resume), &st);
    // the caller may extend or shorten the run; everything else comes from the checkpoint
    m.config.trainer.epochs = rc_in.trainer.epochs;
    m.config.trainer.stop_after_epochs = rc_in.trainer.stop_after_epochs;
    m.config.trainer.out_dir = rc_in.trainer.out_dir;
    m.config.trainer.data_dir = rc_in.trainer.data_dir;
    td = load_training_data(m.config, m.codec, m.stats, false);
    log("resumed from " + opts.resume.string() + " at epoch " + std::to_string(st.next_epoch));
  } else {
    rc_in.validate();
    m.config = rc_in;
    m.codec = make_codec(rc_in.codec);
    m.codec.params.set_frozen(true);
    m.unet = build_unet<float>(rc_in.resolved_unet(), rc_in.trainer.seed);
    td = load_training_data(rc_in, m.codec, m.stats, true);
    st.opt.config = rc_in.trainer.optim;
    st.sched.config = rc_in.trainer.plateau;
    if (m.stats.clamped_channels)
      log(std::to_string(m.stats.clamped_channels) + " latent channel(s) have near-zero variance; std clamped");
  }
  m.chunk_len = td.chunk_len;
  const RunConfig& rc = m.config;
  const std::filesystem::path out = rc.trainer.out_dir;
  std::filesystem::create_directories(out);
  auto fb = mel_filterbank(rc.loss.mel.mel);
  TrainResult res;
  res.codec_checksum_before = m.codec.params.checksum();
  res.last_checkpoint = out / "last.ckpt";
  res.best_checkpoint = out / "best.ckpt";
  const CurriculumSchedule full_weighting{0};
  const std::size_t B = rc.trainer.batch_size;
  const std::size_t L = td.chunk_len;

  int end_epoch = rc.trainer.epochs;
  if (rc.trainer.stop_after_epochs >= 0) end_epoch = std::min(end_epoch, rc.trainer.stop_after_epochs);
  log("training on " + std::to_string(td.train.size()) + " pairs, validating on " + std::to_string(td.val.size()) +
      "; U-Net parameters: " + std::to_string(m.unet.params.element_count()));

  for (int epoch = st.next_epoch; epoch < end_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(td.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(stable_hash(rc.trainer.seed, std::string_view("epoch-shuffle"), static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    const double lr_epoch = st.opt.config.lr;

    detail::BatchTotals tr;
    for (std::size_t from = 0; from < order.size(); from += B) {
      const std::size_t n = std::min(B, order.size() - from);
      Tensor<float> z, clean;
      detail::assemble(td.train, order, from, n, z, clean);
      m.unet.params.zero_grad();
      std::string failure;
      try {
        ad::Tape<float> tape;
        auto y = model_forward(tape, std::move(z), m, L);
        auto br = ad::combined_loss(y, tape.constant(std::move(clean)), rc.loss.weights, epoch, rc.loss.schedule,
                                    rc.loss.mel, fb);
        if (std::isfinite(static_cast<double>(br.total.value().item()))) {
          tape.backward(br.total);
          adamw_step(m.unet.params, st.opt);
          tr.add(br, n);
        } else {
          failure = "non-finite training loss";
        }
      } catch (const NumericError& e) {
        failure = e.what();
      }
      if (!failure.empty()) {
        save_checkpoint(out / "diverged.ckpt", detail::make_train_checkpoint(m, st));
        throw NumericError(failure + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(from / B) +
                           "; state saved to " + (out / "diverged.ckpt").string());
      }
    }

    detail::BatchTotals va;
    std::vector<std::size_t> vorder(td.val.size());
    std::iota(vorder.begin(), vorder.end(), std::size_t{0});
    for (std::size_t from = 0; from < vorder.size(); from += B) {
      const std::size_t n = std::min(B, vorder.size() - from);
      Tensor<float> z, clean;
      detail::assemble(td.val, vorder, from, n, z, clean);
      ad::Tape<float> tape;
      auto y = model_forward(tape, std::move(z), m, L);
      va.add(ad::combined_loss(y, tape.constant(std::move(clean)), rc.loss.weights, epoch, full_weighting, rc.loss.mel, fb),
             n);
    }

    EpochRecord r;
    r.epoch = epoch;
    r.lr = lr_epoch;
    r.train_total = tr.total / tr.n;
    r.l1 = tr.l1 / tr.n;
    r.mel = tr.mel / tr.n;
    r.sisdr_db = tr.sisdr / tr.n;
    r.sisdr_weight = tr.weight;
    r.val_total = va.total / va.n;
    r.val_l1 = va.l1 / va.n;
    r.val_mel = va.mel / va.n;
    r.val_sisdr_db = va.sisdr / va.n;
    if (!std::isfinite(r.val_total)) {
      save_checkpoint(out / "diverged.ckpt", detail::make_train_checkpoint(m, st));
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    st.opt.config.lr = plateau_step(st.sched, r.val_total, st.opt.config.lr);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.history.push_back(r);
    st.next_epoch = epoch + 1;
    const bool is_best = r.val_total < st.best_val;
    if (is_best) {
      st.best_val = r.val_total;
      st.best_epoch = epoch;
    }
    auto ck = detail::make_train_checkpoint(m, st);
    save_checkpoint(res.last_checkpoint, ck);
    if (is_best) save_checkpoint(res.best_checkpoint, ck);
    write_curves_csv(out / "curves.csv", st.history);
    {
      std::ofstream f(out / "train_log.jsonl", std::ios::trunc);
      for (const auto& h : st.history) f << to_json_record(h).dump() << "\n";
    }
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "epoch %d lr %.3g train %.5f (l1 %.5f mel %.5f sisdr %.2f dB, w_sisdr %.3g) val %.5f (sisdr %.2f dB) "
                  "%.1fs",
                  epoch, lr_epoch, r.train_total, r.l1, r.mel, r.sisdr_db, r.sisdr_weight, r.val_total,
                  r.val_sisdr_db, r.seconds);
    log(buf);
  }
  res.history = st.history;
  res.best_epoch = st.best_epoch;
  res.best_val = st.best_val;
  res.codec_checksum_after = m.codec.params.checksum();
  if (res.codec_checksum_after != res.codec_checksum_before) throw NumericError("frozen codec parameters changed");
  return res;
}

inline void denoise_file(const std::filesystem::path& checkpoint, const std::filesystem::path& in,
                         const std::filesystem::path& out) {
  auto m = load_model(checkpoint);
  write_wav(out, denoise_waveform(m, read_wav(in)));
}

}  // namespace adnac
