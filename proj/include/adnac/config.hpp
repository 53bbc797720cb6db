#pragma once

// Run configuration: one JSON document with dataset / codec / unet / loss /
// trainer / eval sections. Every section lists its fields once in a visit()
// function that drives both reading (unknown keys rejected) and writing.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "adnac/codec.hpp"
#include "adnac/degrade.hpp"
#include "adnac/denoiser.hpp"
#include "adnac/losses.hpp"
#include "adnac/optim.hpp"
#include "json.hpp"

namespace adnac {

using Json = nlohmann::ordered_json;

template <typename J>
void to_json(J& j, DegradationKind k) {
  j = kind_name(k);
}
template <typename J>
void from_json(const J& j, DegradationKind& k) {
  k = parse_kind(j.template get<std::string>());
}
template <typename J>
void to_json(J& j, CodecKind k) {
  j = codec_kind_name(k);
}
template <typename J>
void from_json(const J& j, CodecKind& k) {
  k = parse_codec_kind(j.template get<std::string>());
}

namespace cfg {

class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }

  template <typename V>
  void field(const char* key, V& v) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      v = j_.at(key).template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + path(key) + "': " + e.what());
    }
  }

  template <typename S>
  void section(const char* key, S& s) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    Reader sub(j_.at(key), path(key));
    visit(sub, s);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path(k) + "'");
  }

 private:
  std::string path(const std::string& k) const { return section_.empty() ? k : section_ + "." + k; }
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  explicit Writer(Json& j) : j_(j) { j_ = Json::object(); }
  template <typename V>
  void field(const char* key, const V& v) {
    j_[key] = v;
  }
  template <typename S>
  void section(const char* key, S& s) {
    Writer sub(j_[key]);
    visit(sub, s);
  }

 private:
  Json& j_;
};

}  // namespace cfg

// ---- sections -------------------------------------------------------------

struct CodecSection {
  CodecKind kind = CodecKind::IdentityFrame;
  std::size_t hop = 256;      // identity codec; the toy codec is fixed at 64
  std::size_t c_lat = 32;     // toy codec only
  std::string checkpoint;     // pretrained toy codec file
  ToyPretrainConfig pretrain;

  CodecSpec spec() const {
    CodecSpec s = kind == CodecKind::IdentityFrame ? identity_codec_spec(hop) : toy_codec_spec(c_lat);
    s.validate();
    return s;
  }
};

struct LossSection {
  LossWeights weights;
  CurriculumSchedule schedule;
  MelLossConfig mel;

  void validate() const {
    weights.validate();
    if (schedule.sisdr_start_epoch < 0) throw ConfigError("loss: sisdr_start_epoch must be >= 0");
    mel.mel.validate();
  }
};

struct TrainerSection {
  std::string data_dir = "dataset";  // directory holding manifest.jsonl
  std::string out_dir = "run";
  int epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  AdamWConfig optim;
  PlateauConfig plateau;
  int stop_after_epochs = -1;  // end the run early (epochs still sets the schedule); -1 = off
  std::size_t stats_max_items = 0;  // latents used to fit normalization, 0 = all train items
  int threads = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("trainer: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
    optim.validate();
    plateau.validate();
    if (threads < 1) throw ConfigError("trainer: threads must be >= 1");
  }
};

struct EvalSection {
  std::size_t n_files = 1000;
  std::uint64_t seed = 0;
  std::string split = "test";
};

struct RunConfig {
  DatasetConfig dataset;
  CodecSection codec;
  UNetConfig unet;
  LossSection loss;
  TrainerSection trainer;
  EvalSection eval;

  // U-Net width follows the codec's latent channel count
  UNetConfig resolved_unet() const {
    UNetConfig u = unet;
    u.in_channels = codec.spec().c_lat;
    return u;
  }

  void validate() const {
    dataset.validate();
    codec.spec();
    codec.pretrain.validate();
    resolved_unet().validate();
    loss.validate();
    trainer.validate();
    parse_split(eval.split);
    if (loss.mel.mel.sample_rate != dataset.sample_rate)
      throw ConfigError("loss.mel.sample_rate must equal dataset.sample_rate");
  }
};

// ---- field lists ----------------------------------------------------------

template <typename IO>
void visit(IO& io, DatasetConfig& d) {
  io.field("clean_dirs", d.clean_dirs);
  io.field("noise_dirs", d.noise_dirs);
  io.field("rir_dirs", d.rir_dirs);
  io.field("kinds", d.kinds);
  io.field("variants_per_chunk", d.variants_per_chunk);
  io.field("snr_min_db", d.snr_min_db);
  io.field("snr_max_db", d.snr_max_db);
  io.field("rt60_min_s", d.rt60_min_s);
  io.field("rt60_max_s", d.rt60_max_s);
  io.field("drr_min_db", d.drr_min_db);
  io.field("drr_max_db", d.drr_max_db);
  io.field("predelay_max_s", d.predelay_max_s);
  io.field("seed", d.global_seed);
  io.field("splits", d.splits);
  io.field("sample_rate", d.sample_rate);
  io.field("chunk_len", d.chunk_len);
  io.field("out_dir", d.out_dir);
  io.field("threads", d.threads);
}

template <typename IO>
void visit(IO& io, ToyPretrainConfig& p) {
  io.field("steps", p.steps);
  io.field("batch", p.batch);
  io.field("crop_len", p.crop_len);
  io.field("lr", p.lr);
  io.field("w_l1", p.w_l1);
  io.field("w_mel", p.w_mel);
  io.field("eval_chunks", p.eval_chunks);
  io.field("seed", p.seed);
}

template <typename IO>
void visit(IO& io, CodecSection& c) {
  io.field("kind", c.kind);
  io.field("hop", c.hop);
  io.field("c_lat", c.c_lat);
  io.field("checkpoint", c.checkpoint);
  io.section("pretrain", c.pretrain);
}

template <typename IO>
void visit(IO& io, UNetConfig& u) {
  io.field("base_channels", u.base_channels);
  io.field("levels", u.levels);
  io.field("max_channels", u.max_channels);
  io.field("res_blocks_per_level", u.res_blocks_per_level);
  io.field("norm_groups", u.norm_groups);
  io.field("norm_eps", u.norm_eps);
}

template <typename IO>
void visit(IO& io, MelLossConfig& m) {
  io.field("n_fft", m.mel.stft.n_fft);
  io.field("hop", m.mel.stft.hop);
  io.field("center", m.mel.stft.center);
  io.field("n_mels", m.mel.n_mels);
  io.field("f_min", m.mel.f_min);
  io.field("f_max", m.mel.f_max);
  io.field("sample_rate", m.mel.sample_rate);
  io.field("log_mel", m.mel.log_mel);
  io.field("log_eps", m.mel.log_eps);
  io.field("l2", m.l2);
}

template <typename IO>
void visit(IO& io, LossSection& l) {
  io.field("w_l1", l.weights.l1);
  io.field("w_mel", l.weights.mel);
  io.field("w_sisdr", l.weights.sisdr);
  io.field("sisdr_start_epoch", l.schedule.sisdr_start_epoch);
  io.section("mel", l.mel);
}

template <typename IO>
void visit(IO& io, TrainerSection& t) {
  io.field("data_dir", t.data_dir);
  io.field("out_dir", t.out_dir);
  io.field("epochs", t.epochs);
  io.field("batch_size", t.batch_size);
  io.field("seed", t.seed);
  io.field("lr", t.optim.lr);
  io.field("beta1", t.optim.beta1);
  io.field("beta2", t.optim.beta2);
  io.field("adam_eps", t.optim.eps);
  io.field("weight_decay", t.optim.weight_decay);
  io.field("plateau_factor", t.plateau.factor);
  io.field("plateau_patience", t.plateau.patience);
  io.field("min_lr", t.plateau.min_lr);
  io.field("plateau_threshold", t.plateau.threshold);
  io.field("stop_after_epochs", t.stop_after_epochs);
  io.field("stats_max_items", t.stats_max_items);
  io.field("threads", t.threads);
}

template <typename IO>
void visit(IO& io, EvalSection& e) {
  io.field("n_files", e.n_files);
  io.field("seed", e.seed);
  io.field("split", e.split);
}

template <typename IO>
void visit(IO& io, RunConfig& r) {
  io.section("dataset", r.dataset);
  io.section("codec", r.codec);
  io.section("unet", r.unet);
  io.section("loss", r.loss);
  io.section("trainer", r.trainer);
  io.section("eval", r.eval);
}

// ---- entry points ---------------------------------------------------------

template <typename S>
Json to_config_json(const S& s) {
  Json j;
  cfg::Writer w(j);
  visit(w, const_cast<S&>(s));
  return j;
}

// Overlays `j` onto `base`; keys absent from `j` keep their base values.
template <typename S>
S from_config_json(const Json& j, S base = S{}, const std::string& section = "") {
  cfg::Reader r(j, section);
  visit(r, base);
  r.finish();
  return base;
}

inline RunConfig parse_run_config(const Json& j) {
  RunConfig rc = from_config_json<RunConfig>(j);
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  Json j;
  try {
    j = Json::parse(f, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace adnac
