#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "semitts/config.hpp"
#include "semitts/eval.hpp"
#include "semitts/wordvec.hpp"

namespace semitts {

inline double manifest_duration_seconds(const Manifest& m) {
  double total = 0.0;
  for (const auto& e : m.entries) total += e.duration_seconds;
  return total;
}

// Deterministic subset with at least `minutes` of audio. Entries are taken
// as a prefix of one seeded shuffle, so for a fixed seed a smaller budget
// always yields a subset of a larger one.
inline Manifest subsample_by_duration(const Manifest& paired, double minutes, std::uint64_t seed) {
  if (minutes <= 0.0) throw std::runtime_error("sweep: paired_minutes must be positive");
  double target = minutes * 60.0;
  double total = manifest_duration_seconds(paired);
  if (target > total + 1e-9) {
    std::ostringstream ss;
    ss << "sweep: fraction of " << minutes << " min needs " << target
       << " s of paired audio but the manifest only has " << total << " s";
    throw std::runtime_error(ss.str());
  }
  std::vector<std::size_t> order(paired.entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "paired-subsample"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  Manifest subset;
  double acc = 0.0;
  for (std::size_t idx : order) {
    subset.entries.push_back(paired.entries[idx]);
    acc += paired.entries[idx].duration_seconds;
    if (acc >= target) break;
  }
  return subset;
}

struct SweepCell {
  std::string variant;
  double paired_minutes = 0.0;
  std::uint64_t seed = 0;
};

inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& cfg) {
  std::vector<SweepCell> cells;
  for (const auto& v : cfg.sweep.variants)
    for (double m : cfg.sweep.paired_minutes)
      for (std::uint64_t s : cfg.sweep.seeds) cells.push_back({v, m, s});
  return cells;
}

namespace sweep_detail {

inline std::string fmt_minutes(double m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", m);
  return buf;
}

inline std::string fmt_mcd(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("sweep: cannot write " + path);
  f << text;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("sweep: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::vector<std::string> corpus_words(const std::string& corpus_path) {
  std::ifstream f(corpus_path);
  if (!f) throw std::runtime_error("sweep: cannot open corpus " + corpus_path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(f, line))
    for (auto& w : normalize_text(line)) words.push_back(std::move(w));
  return words;
}

inline std::string train_log_csv(const std::vector<TrainReport>& reports) {
  std::ostringstream out;
  out << train_report_header() << "\n";
  for (const auto& r : reports)
    out << r.step << "," << r.mel_l1 << "," << r.stop_bce << "," << r.grad_norm << "," << r.seconds
        << "\n";
  return out.str();
}

inline std::string val_log_csv(const std::vector<std::pair<std::size_t, double>>& hist) {
  std::ostringstream out;
  out << "step,val_loss\n";
  out.precision(17);
  for (const auto& [step, loss] : hist) out << step << "," << loss << "\n";
  return out.str();
}

// done-marker helper: parses the json and checks the embedded config hash
inline bool marker_matches(const std::string& path, const std::string& want, nlohmann::json* out) {
  if (!std::filesystem::exists(path)) return false;
  auto j = nlohmann::json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded() || j.value("config_hash", j.value("hash", "")) != want) return false;
  if (out) *out = j;
  return true;
}

}  // namespace sweep_detail

inline std::string cell_name(const SweepCell& c) {
  return c.variant + "-m" + sweep_detail::fmt_minutes(c.paired_minutes) + "-s" +
         std::to_string(c.seed);
}

// Experiment config specialized to one sweep cell.
inline ExperimentConfig cell_config(const ExperimentConfig& base, const SweepCell& cell) {
  ExperimentConfig c = base;
  apply_variant(c, cell.variant);
  c.seed = cell.seed;
  c.run_name = base.run_name + "-" + cell_name(cell);
  return c;
}

inline std::string cell_hash(const ExperimentConfig& base, const SweepCell& cell) {
  ExperimentConfig c = cell_config(base, cell);
  std::ostringstream ss;
  ss << std::hex
     << fnv1a(experiment_config_to_json(c).dump() +
              "|minutes=" + sweep_detail::fmt_minutes(cell.paired_minutes));
  return ss.str();
}

inline std::string sweep_csv_header() { return "variant,paired_minutes,seed,mcd"; }

inline std::string sweep_row_line(const SweepRow& r) {
  return r.variant + "," + sweep_detail::fmt_minutes(r.paired_minutes) + "," +
         std::to_string(r.seed) + "," + sweep_detail::fmt_mcd(r.mcd);
}

inline std::string sweep_rows_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << sweep_csv_header() << "\n";
  for (const auto& r : rows) out << sweep_row_line(r) << "\n";
  return out.str();
}

using SweepLog = std::function<void(const std::string&)>;

// Runs the full variant x data-budget x seed grid under runs/<name>/.
//
// Layout:
//   features/                             shared mel-feature cache
//   wordvecs.txt, wordvecs.done.json      shared conditioning table
//   pretrain-s<seed>.ckpt, ...done.json   one pretrained decoder per seed
//   cells/<variant>-m<minutes>-s<seed>/   model.ckpt, logs, eval.csv, done.json
//   sweep.csv, sweep.svg                  canonical grid summary
//
// Finished cells (done marker with a matching config hash) are skipped, so an
// interrupted sweep resumes where it stopped and re-running a completed sweep
// is a no-op that rewrites the same summary bytes. Rows are appended to the
// CSV as cells finish; the file is rewritten in grid order at the end so its
// bytes do not depend on completion order.
//
// Cells are independent once the shared artifacts above exist, so with
// sweep.workers > 1 they run on that many threads; each worker reads the
// pre-warmed feature cache through its own handle and appends under a lock.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const SweepLog& log = {}) {
  namespace fs = std::filesystem;
  std::mutex io_mutex;
  auto say = [&](const std::string& s) {
    if (log) {
      std::lock_guard<std::mutex> lk(io_mutex);
      log(s);
    }
  };

  validate_experiment(cfg);
  Manifest paired = load_manifest(cfg.data_dir + "/paired.jsonl");
  Manifest eval_set = load_manifest(cfg.data_dir + "/eval.jsonl");
  Lexicon lex = load_runtime_lexicon(cfg);

  // every fraction must be satisfiable before any cell starts
  for (double m : cfg.sweep.paired_minutes) subsample_by_duration(paired, m, cfg.sweep.seeds[0]);

  RunPaths rp = run_paths(cfg);
  fs::create_directories(rp.dir + "/cells");
  save_experiment_config(rp.config_snapshot(), cfg);

  std::vector<SweepCell> cells = sweep_cells(cfg);
  std::vector<SweepRow> rows(cells.size());
  std::vector<bool> pending(cells.size(), true);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    nlohmann::json done;
    std::string marker = rp.dir + "/cells/" + cell_name(cells[i]) + "/done.json";
    if (sweep_detail::marker_matches(marker, cell_hash(cfg, cells[i]), &done) &&
        done.contains("mcd")) {
      rows[i] = {cells[i].variant, cells[i].paired_minutes, cells[i].seed,
                 done.at("mcd").get<double>()};
      pending[i] = false;
      say("cell " + cell_name(cells[i]) + ": already done");
    }
  }

  bool need_conditioning = false, need_pretraining = false;
  std::set<std::uint64_t> pretrain_seeds;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!pending[i]) continue;
    need_conditioning = need_conditioning || variant_uses_conditioning(cells[i].variant);
    if (variant_uses_pretraining(cells[i].variant)) {
      need_pretraining = true;
      pretrain_seeds.insert(cells[i].seed);
    }
  }

  // shared word-vector table (external file, or trained once per sweep)
  WordVectorTable table;
  if (need_conditioning) {
    if (!cfg.wordvec.path.empty()) {
      table = load_table(cfg.wordvec.path);
    } else {
      std::string marker = rp.dir + "/wordvecs.done.json";
      std::ostringstream key;
      key << cfg.wordvec.dim << "/" << cfg.wordvec.window << "/" << cfg.wordvec.epochs << "/"
          << cfg.seed << "/" << cfg.data_dir;
      std::string want = std::to_string(fnv1a(key.str()));
      if (!(sweep_detail::marker_matches(marker, want, nullptr) &&
            fs::exists(rp.wordvec_table()))) {
        say("training word vectors");
        auto words = sweep_detail::corpus_words(cfg.data_dir + "/corpus.txt");
        auto res = train_skipgram(words, cfg.wordvec.dim, cfg.wordvec.window, cfg.wordvec.epochs,
                                  derive_seed(cfg.seed, "wordvec"));
        save_table(rp.wordvec_table(), res.table);
        sweep_detail::write_text_file(marker, nlohmann::json{{"hash", want}}.dump() + "\n");
      }
      table = load_table(rp.wordvec_table());
    }
    if (table.dim != cfg.wordvec.dim)
      throw std::runtime_error("sweep: word-vector table width does not match config");
  }

  bool any_pending = false;
  for (bool p : pending) any_pending = any_pending || p;

  // warm the on-disk feature cache once so concurrent cells only read it
  if (any_pending) {
    FeatureCache warm(rp.dir + "/features", cfg.dsp.filterbank(), cfg.dsp.frame_params(),
                      cfg.dsp.floor_mag);
    for (const auto& e : paired.entries) warm.get(e);
    if (need_pretraining) {
      Manifest unpaired = load_manifest(cfg.data_dir + "/unpaired.jsonl");
      for (const auto& e : unpaired.entries) warm.get(e);
    }
  }

  // one pretrained decoder per seed, shared by t-dec and t-enc-dec
  std::map<std::uint64_t, Checkpoint> pretrained;
  if (need_pretraining) {
    Manifest unpaired = load_manifest(cfg.data_dir + "/unpaired.jsonl");
    FeatureCache cache(rp.dir + "/features", cfg.dsp.filterbank(), cfg.dsp.frame_params(),
                       cfg.dsp.floor_mag);
    for (std::uint64_t seed : pretrain_seeds) {
      ExperimentConfig pc = cfg;
      apply_variant(pc, "t-dec");
      pc.seed = seed;
      ModelConfig mc = runtime_model(pc, lex);
      std::string ckpt_path = rp.dir + "/pretrain-s" + std::to_string(seed) + ".ckpt";
      std::string marker = ckpt_path + ".done.json";
      std::string want = std::to_string(
          fnv1a(model_config_to_json(mc).dump() + train_config_to_json(cfg.train).dump() +
                std::to_string(seed) + cfg.data_dir));
      if (sweep_detail::marker_matches(marker, want, nullptr) && fs::exists(ckpt_path)) {
        say("reusing pretrained decoder for seed " + std::to_string(seed));
        pretrained.emplace(seed, load_checkpoint(ckpt_path));
        continue;
      }
      say("pretraining decoder for seed " + std::to_string(seed));
      std::vector<TrainReport> reports;
      Checkpoint ck = pretrain_decoder(unpaired, mc, cfg.train, cache, seed,
                                       [&](const TrainReport& r) { reports.push_back(r); });
      save_checkpoint(ckpt_path, ck);
      sweep_detail::write_text_file(rp.dir + "/pretrain-s" + std::to_string(seed) + "-log.csv",
                                    sweep_detail::train_log_csv(reports));
      sweep_detail::write_text_file(marker, nlohmann::json{{"hash", want}}.dump() + "\n");
      pretrained.emplace(seed, std::move(ck));
    }
  }

  std::ofstream csv_stream;
  if (any_pending) {
    csv_stream.open(rp.sweep_csv(), std::ios::binary | std::ios::trunc);
    if (!csv_stream) throw std::runtime_error("sweep: cannot write " + rp.sweep_csv());
    csv_stream << sweep_csv_header() << "\n";
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (!pending[i]) csv_stream << sweep_row_line(rows[i]) << "\n";
    csv_stream.flush();
  }

  auto run_cell = [&](std::size_t i) {
    const SweepCell& cell = cells[i];
    say("cell " + cell_name(cell) + ": training");
    std::string dir = rp.dir + "/cells/" + cell_name(cell);
    fs::create_directories(dir);
    std::string want = cell_hash(cfg, cell);

    ExperimentConfig cc = cell_config(cfg, cell);
    ModelConfig mc = runtime_model(cc, lex);
    Manifest subset = subsample_by_duration(paired, cell.paired_minutes, cell.seed);
    const Checkpoint* init = nullptr;
    if (variant_uses_pretraining(cell.variant)) init = &pretrained.at(cell.seed);
    const WordVectorTable* wv = variant_uses_conditioning(cell.variant) ? &table : nullptr;

    FeatureCache cache(rp.dir + "/features", cfg.dsp.filterbank(), cfg.dsp.frame_params(),
                       cfg.dsp.floor_mag);
    FinetuneResult res =
        finetune(subset, mc, cc.train, cache, lex, token_mode_of(cc), wv, init, cell.seed);

    sweep_detail::write_text_file(dir + "/config.json",
                                  experiment_config_to_json(cc).dump(2) + "\n");
    save_checkpoint(dir + "/model.ckpt", res.checkpoint);
    sweep_detail::write_text_file(dir + "/train_log.csv", sweep_detail::train_log_csv(res.reports));
    sweep_detail::write_text_file(dir + "/val_log.csv", sweep_detail::val_log_csv(res.val_history));

    EvalContext ctx;
    ctx.model = mc;
    ctx.params = &res.checkpoint.params;
    ctx.lexicon = lex;
    ctx.token_mode = token_mode_of(cc);
    ctx.wordvecs = wv;
    ctx.fb = cfg.dsp.filterbank();
    ctx.fp = cfg.dsp.frame_params();
    ctx.floor_mag = cfg.dsp.floor_mag;
    ctx.n_coeffs = cfg.dsp.n_coeffs;
    ctx.griffin_lim_iters = cfg.dsp.griffin_lim_iters;
    ctx.seed = cell.seed;
    ctx.config_hash = want;
    EvalReport report = evaluate_set(ctx, eval_set);
    sweep_detail::write_text_file(dir + "/eval.csv", eval_report_csv(report));
    if (!std::isfinite(report.mean_mcd)) {
      std::string why = report.rows.empty() ? "empty evaluation set" : report.rows[0].error;
      throw std::runtime_error("sweep: cell " + cell_name(cell) + " produced no score: " + why);
    }

    nlohmann::json done{{"config_hash", want},
                        {"mcd", report.mean_mcd},
                        {"variant", cell.variant},
                        {"paired_minutes", cell.paired_minutes},
                        {"seed", cell.seed},
                        {"train_steps", res.checkpoint.train_step},
                        {"best_val", res.best_val}};
    sweep_detail::write_text_file(dir + "/done.json", done.dump(2) + "\n");

    SweepRow row{cell.variant, cell.paired_minutes, cell.seed, report.mean_mcd};
    {
      std::lock_guard<std::mutex> lk(io_mutex);
      rows[i] = row;
      csv_stream << sweep_row_line(row) << "\n";
      csv_stream.flush();
    }
    say("cell " + cell_name(cell) + ": mcd " + sweep_detail::fmt_mcd(report.mean_mcd));
  };

  std::size_t workers = std::max<std::size_t>(1, cfg.sweep.workers);
  if (workers <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (pending[i]) run_cell(i);
  } else {
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (pending[i]) todo.push_back(i);
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mutex;
    auto worker = [&] {
      while (true) {
        std::size_t k = next.fetch_add(1);
        if (k >= todo.size()) return;
        {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (first_error) return;
        }
        try {
          run_cell(todo[k]);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, todo.size()); ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  if (csv_stream.is_open()) csv_stream.close();

  std::string csv = sweep_rows_csv(rows);
  sweep_detail::write_text_file(rp.sweep_csv(), csv);
  sweep_detail::write_text_file(rp.sweep_plot(), emit_plot(csv));
  return rows;
}

}  // namespace semitts
