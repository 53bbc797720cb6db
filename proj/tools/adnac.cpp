// adnac: dataset synthesis, codec pretraining, training, denoising and
// evaluation from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "adnac/config.hpp"
#include "adnac/gradcheck.hpp"
#include "adnac/metrics.hpp"
#include "adnac/trainer.hpp"

using namespace adnac;
namespace fs = std::filesystem;

namespace {

void log_line(const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); }

struct Common {
  std::string config;
  int threads = 0;
  bool deterministic = false;
};

// Config file (or defaults) first; subcommand flags are applied on top.
RunConfig base_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.threads > 0) {
    rc.dataset.threads = c.threads;
    rc.trainer.threads = c.threads;
  }
  if (c.deterministic) {
    rc.dataset.threads = 1;
    rc.trainer.threads = 1;
  }
  return rc;
}

void echo_config(const RunConfig& rc) { log_line("resolved config: " + to_config_json(rc).dump()); }

void print_summary(const DatasetSummary& s, std::size_t total) {
  std::printf("entries: %zu (from %zu source files, %zu clean chunks, %zu silent chunks skipped)\n", total,
              s.source_files, s.clean_chunks, s.skipped_silent);
  for (const auto& [k, v] : s.per_split) std::printf("  split %-6s %zu\n", k.c_str(), v);
  for (const auto& [k, v] : s.per_kind) std::printf("  kind  %-17s %zu\n", k.c_str(), v);
}

std::vector<std::vector<float>> clean_chunks(const fs::path& data_dir, Split split) {
  std::vector<std::vector<float>> out;
  for (const auto& e : filter_split(load_manifest_dir(data_dir), split))
    out.push_back(read_wav(data_dir / e.clean).samples);
  // one clean chunk backs several noisy variants; keep each once
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-domain music denoising workbench"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config, "JSON run configuration; flags override its values")
      ->check(CLI::ExistingFile);
  app.add_option("--threads", common.threads, "Cap on worker threads (0 = use the config value)")
      ->check(CLI::NonNegativeNumber);
  app.add_flag("--deterministic", common.deterministic, "Force single-threaded, reproducible execution");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Degrade clean audio into a paired dataset with a manifest");
  std::vector<std::string> clean_dirs, noise_dirs, rir_dirs, kinds;
  std::string synth_out;
  std::optional<std::uint64_t> synth_seed;
  std::optional<int> variants;
  std::size_t tones = 0;
  double tone_seconds = 2.0;
  synth->add_option("--clean-dir", clean_dirs, "Directory of clean WAV files (repeatable)");
  synth->add_option("--noise-dir", noise_dirs, "Directory of noise WAV files (repeatable)");
  synth->add_option("--rir-dir", rir_dirs, "Directory of room impulse responses (repeatable)");
  synth->add_option("--kinds", kinds, "Degradation kinds: white_noise, external_noise, synthetic_reverb, rir_reverb, nc_artifact");
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--seed", synth_seed, "Global seed");
  synth->add_option("--variants", variants, "Noisy variants per clean chunk");
  synth->add_option("--tones", tones, "First synthesize this many tone-mix files into <out>/tones and use them");
  synth->add_option("--tone-seconds", tone_seconds, "Duration of each synthesized tone-mix file");

  // inspect-manifest
  auto* inspect = app.add_subcommand("inspect-manifest", "Validate a dataset manifest and print its summary");
  std::string inspect_dir;
  inspect->add_option("--data", inspect_dir, "Dataset directory holding manifest.jsonl")->required();

  // pretrain-codec
  auto* pre = app.add_subcommand("pretrain-codec", "Train the toy convolutional codec on clean training chunks");
  std::string pre_data, pre_out;
  std::optional<std::size_t> pre_steps, pre_clat;
  pre->add_option("--data", pre_data, "Dataset directory (clean chunks of the train split are used)");
  pre->add_option("--out", pre_out, "Output codec checkpoint")->required();
  pre->add_option("--steps", pre_steps, "Optimizer steps");
  pre->add_option("--c-lat", pre_clat, "Latent channels");

  // train
  auto* tr = app.add_subcommand("train", "Train the latent denoiser");
  std::string tr_data, tr_out, tr_resume;
  std::optional<int> tr_epochs, tr_stop;
  std::optional<std::uint64_t> tr_seed;
  tr->add_option("--data", tr_data, "Dataset directory");
  tr->add_option("--out", tr_out, "Run directory for checkpoints, curves and logs");
  tr->add_option("--epochs", tr_epochs, "Number of epochs");
  tr->add_option("--stop-after", tr_stop, "End the run after this many epochs (resumable)");
  tr->add_option("--seed", tr_seed, "Training seed");
  tr->add_option("--resume", tr_resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  // denoise
  auto* dn = app.add_subcommand("denoise", "Denoise one WAV file");
  std::string dn_ckpt, dn_in, dn_out;
  dn->add_option("--checkpoint", dn_ckpt, "Trained denoiser checkpoint")->required()->check(CLI::ExistingFile);
  dn->add_option("--in", dn_in, "Input WAV")->required()->check(CLI::ExistingFile);
  dn->add_option("--out", dn_out, "Output WAV")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score noisy and denoised audio on a random subset of a split");
  std::string ev_ckpt, ev_data, ev_json, ev_csv, ev_split;
  std::optional<std::size_t> ev_n;
  std::optional<std::uint64_t> ev_seed;
  ev->add_option("--checkpoint", ev_ckpt, "Trained denoiser checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Dataset directory");
  ev->add_option("--n", ev_n, "Number of pairs to score");
  ev->add_option("--seed", ev_seed, "Subset seed");
  ev->add_option("--split", ev_split, "Split to evaluate (train, val, test)");
  ev->add_option("--json", ev_json, "Write the full report as JSON");
  ev->add_option("--csv", ev_csv, "Write per-file rows as CSV");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  GradCheckSuiteConfig gcc;
  gc->add_option("--step", gcc.h, "Finite-difference step h");
  gc->add_option("--tol", gcc.tol, "Maximum relative error");
  gc->add_option("--seed", gcc.seed, "Seed for the random test points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      RunConfig rc = base_config(common);
      DatasetConfig& dc = rc.dataset;
      if (!synth_out.empty()) dc.out_dir = synth_out;
      if (synth_seed) dc.global_seed = *synth_seed;
      if (variants) dc.variants_per_chunk = *variants;
      if (!clean_dirs.empty()) dc.clean_dirs = clean_dirs;
      if (!noise_dirs.empty()) dc.noise_dirs = noise_dirs;
      if (!rir_dirs.empty()) dc.rir_dirs = rir_dirs;
      if (!kinds.empty()) {
        dc.kinds.clear();
        for (const auto& k : kinds) dc.kinds.push_back(parse_kind(k));
      }
      if (tones > 0) {
        const fs::path tdir = fs::path(dc.out_dir) / "tones";
        write_tone_mix_corpus(tdir, tones, tone_seconds, dc.global_seed, dc.sample_rate);
        dc.clean_dirs = {tdir.string()};
      }
      rc.validate();
      echo_config(rc);
      DatasetSummary s;
      const auto m = build_dataset(dc, &s);
      print_summary(s, m.size());
      return 0;
    }
    if (*inspect) {
      const auto m = load_manifest_dir(inspect_dir);
      std::size_t missing = 0;
      for (const auto& e : m)
        for (const auto& f : {e.clean, e.noisy})
          if (!fs::exists(fs::path(inspect_dir) / f)) {
            if (missing++ < 10) log_line("missing file: " + f);
          }
      print_summary(summarize(m), m.size());
      if (missing) {
        log_line(std::to_string(missing) + " referenced file(s) missing");
        return 1;
      }
      return 0;
    }
    if (*pre) {
      RunConfig rc = base_config(common);
      if (!pre_data.empty()) rc.trainer.data_dir = pre_data;
      if (pre_steps) rc.codec.pretrain.steps = *pre_steps;
      if (pre_clat) rc.codec.c_lat = *pre_clat;
      rc.codec.pretrain.c_lat = rc.codec.c_lat;
      rc.codec.pretrain.validate();
      echo_config(rc);
      const auto chunks = clean_chunks(rc.trainer.data_dir, Split::Train);
      log_line("pretraining on " + std::to_string(chunks.size()) + " clean chunks");
      auto res = pretrain_toy_codec(chunks, rc.codec.pretrain, [](std::size_t step, double l1) {
        if (step % 50 == 0) log_line("step " + std::to_string(step) + " l1 " + std::to_string(l1));
      });
      Json extra;
      extra["initial_l1"] = res.initial_l1;
      extra["final_l1"] = res.final_l1;
      save_codec(pre_out, res.codec, extra);
      std::printf("held-out L1 %.6f -> %.6f; codec written to %s\n", res.initial_l1, res.final_l1, pre_out.c_str());
      return 0;
    }
    if (*tr) {
      RunConfig rc = base_config(common);
      if (!tr_data.empty()) rc.trainer.data_dir = tr_data;
      if (!tr_out.empty()) rc.trainer.out_dir = tr_out;
      if (tr_epochs) rc.trainer.epochs = *tr_epochs;
      if (tr_stop) rc.trainer.stop_after_epochs = *tr_stop;
      if (tr_seed) rc.trainer.seed = *tr_seed;
      rc.validate();
      echo_config(rc);
      TrainOptions opts;
      opts.resume = tr_resume;
      opts.log = log_line;
      const auto res = train(rc, opts);
      std::printf("epochs run: %zu; best epoch %d (val %.6f); last checkpoint %s\n", res.history.size(),
                  res.best_epoch, res.best_val, res.last_checkpoint.string().c_str());
      return 0;
    }
    if (*dn) {
      denoise_file(dn_ckpt, dn_in, dn_out);
      return 0;
    }
    if (*ev) {
      auto model = load_model(ev_ckpt);
      RunConfig rc = common.config.empty() ? model.config : base_config(common);
      if (!ev_data.empty()) rc.trainer.data_dir = ev_data;
      if (ev_n) rc.eval.n_files = *ev_n;
      if (ev_seed) rc.eval.seed = *ev_seed;
      if (!ev_split.empty()) rc.eval.split = ev_split;
      const Split split = parse_split(rc.eval.split);
      echo_config(rc);
      const fs::path dir = rc.trainer.data_dir;
      const auto entries = filter_split(load_manifest_dir(dir), split);
      const auto rep = evaluate(entries, manifest_pair_loader(dir),
                                [&](const Waveform& w) { return denoise_waveform(model, w); }, rc.eval.n_files,
                                rc.eval.seed);
      for (const auto& e : rep.errors) log_line("skipped " + e);
      std::fputs(report_table(rep).c_str(), stdout);
      if (!ev_json.empty()) {
        std::ofstream f(ev_json);
        if (!f) throw IoError("cannot write " + ev_json);
        f << report_json(rep).dump(2) << "\n";
      }
      if (!ev_csv.empty()) {
        std::ofstream f(ev_csv);
        if (!f) throw IoError("cannot write " + ev_csv);
        f << "id,noisy_snr_db,noisy_si_sdr_db,noisy_stoi,denoised_snr_db,denoised_si_sdr_db,denoised_stoi\n";
        for (const auto& r : rep.rows)
          f << r.id << "," << r.noisy.snr_db << "," << r.noisy.si_sdr_db << "," << r.noisy.stoi << ","
            << r.denoised.snr_db << "," << r.denoised.si_sdr_db << "," << r.denoised.stoi << "\n";
      }
      return 0;
    }
    if (*gc) {
      const auto cases = run_gradcheck_suite(gcc, [](const GradCheckCase& c) {
        std::printf("%-40s %s  max rel err %.3e (%zu coords)\n", c.name.c_str(), c.report.passed ? "ok  " : "FAIL",
                    c.report.max_rel_error, c.report.coords_checked);
        std::fflush(stdout);
      });
      return gradcheck_suite_passed(cases) ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    log_line(std::string("config error: ") + e.what());
    return 2;
  } catch (const UsageError& e) {
    log_line(std::string("usage error: ") + e.what());
    return 2;
  } catch (const std::exception& e) {
    log_line(std::string("error: ") + e.what());
    return 1;
  }
  return 0;
}
