#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "semitts/dsp.hpp"
#include "semitts/model.hpp"
#include "semitts/text.hpp"
#include "semitts/toycorpus.hpp"
#include "semitts/training.hpp"

namespace semitts {

// Audio analysis settings shared by every stage of a run. Defaults are the
// toy-corpus operating point (8 kHz tones on exact bins of a 512-point fft).
struct DspConfig {
  std::size_t n_fft = 512;
  std::size_t hop = 64;
  std::size_t win = 256;
  std::size_t n_mels = 64;
  double fmin = 0.0;
  double fmax = 4000.0;
  int sample_rate = 8000;
  double floor_mag = 8.0;
  std::size_t griffin_lim_iters = 60;
  std::size_t n_coeffs = 13;

  FrameParams frame_params() const { return FrameParams{n_fft, hop, win}; }
  MelFilterbank filterbank() const {
    return make_mel_filterbank(n_mels, n_fft, sample_rate, fmin, fmax);
  }
};

struct WordVecConfig {
  std::size_t dim = 16;
  std::size_t window = 2;
  std::size_t epochs = 8;
  std::string path;  // external table; empty means "use the run's trained table"
};

struct SweepSpec {
  std::vector<double> paired_minutes = {0.25, 0.5, 1.0};
  std::vector<std::string> variants = {"t-base", "t-enc", "t-dec", "t-enc-dec"};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::size_t workers = 1;
};

// One experiment = one run directory. The variant name fixes the
// conditioning/initialization combination:
//   t-base     plain model, fresh init
//   t-enc      word-vector conditioning, fresh init
//   t-dec      plain model, pretrained decoder init
//   t-enc-dec  word-vector conditioning, pretrained decoder init
struct ExperimentConfig {
  std::string run_name = "run";
  std::string variant = "t-base";
  std::uint64_t seed = 1;
  std::string data_dir = "data";
  std::string init = "fresh";          // fresh | pretrained
  std::string token_mode = "phoneme";  // phoneme | character
  ModelConfig model;
  TrainConfig train;
  DspConfig dsp;
  ToyCorpusSpec toy;
  WordVecConfig wordvec;
  SweepSpec sweep;
};

inline const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> v = {"t-base", "t-enc", "t-dec", "t-enc-dec"};
  return v;
}

inline bool variant_uses_conditioning(const std::string& variant) {
  return variant == "t-enc" || variant == "t-enc-dec";
}

inline bool variant_uses_pretraining(const std::string& variant) {
  return variant == "t-dec" || variant == "t-enc-dec";
}

// Rewrites the conditioning/init fields to the variant's combination.
inline void apply_variant(ExperimentConfig& cfg, const std::string& variant) {
  cfg.variant = variant;
  cfg.model.conditioning.enabled = variant_uses_conditioning(variant);
  if (cfg.model.conditioning.enabled) cfg.model.conditioning.wordvec_dim = cfg.wordvec.dim;
  cfg.init = variant_uses_pretraining(variant) ? "pretrained" : "fresh";
}

inline void validate_experiment(const ExperimentConfig& cfg) {
  auto fail = [](const std::string& msg) { throw std::runtime_error("config: " + msg); };
  if (cfg.run_name.empty()) fail("run_name must not be empty");
  if (cfg.run_name.find('/') != std::string::npos || cfg.run_name.find('\\') != std::string::npos)
    fail("run_name must be a plain directory name");
  bool known = false;
  for (const auto& v : known_variants()) known = known || v == cfg.variant;
  if (!known) fail("unknown variant " + cfg.variant);
  if (cfg.init != "fresh" && cfg.init != "pretrained") fail("init must be fresh or pretrained");
  if (cfg.token_mode != "phoneme" && cfg.token_mode != "character")
    fail("token_mode must be phoneme or character");

  if (variant_uses_conditioning(cfg.variant)) {
    if (!cfg.model.conditioning.enabled)
      fail(cfg.variant + " requires word-vector conditioning to be enabled");
    if (cfg.wordvec.dim < 1) fail(cfg.variant + " requires a word-vector table (dim >= 1)");
    if (cfg.model.conditioning.wordvec_dim != cfg.wordvec.dim)
      fail("conditioning wordvec_dim disagrees with the wordvec table dimension");
  } else {
    if (cfg.model.conditioning.enabled) fail(cfg.variant + " forbids word-vector conditioning");
  }
  bool wants_pretrain = variant_uses_pretraining(cfg.variant);
  if (wants_pretrain && cfg.init != "pretrained")
    fail(cfg.variant + " requires init=pretrained (the pretrained decoder)");
  if (!wants_pretrain && cfg.init == "pretrained")
    fail(cfg.variant + " forbids pretrained init");

  if (cfg.dsp.hop == 0 || cfg.dsp.win == 0 || cfg.dsp.n_fft == 0) fail("dsp sizes must be positive");
  if (!(cfg.dsp.hop <= cfg.dsp.win && cfg.dsp.win <= cfg.dsp.n_fft))
    fail("dsp needs hop <= win <= n_fft");
  if (cfg.dsp.n_mels < 1) fail("dsp n_mels must be >= 1");
  if (cfg.dsp.floor_mag <= 0.0) fail("dsp floor_mag must be positive");
  if (cfg.dsp.n_coeffs >= cfg.dsp.n_mels) fail("dsp n_coeffs must be below n_mels");
  if (cfg.model.n_mels != cfg.dsp.n_mels) fail("model n_mels must match dsp n_mels");

  if (cfg.sweep.paired_minutes.empty()) fail("sweep needs at least one paired_minutes entry");
  for (std::size_t i = 0; i < cfg.sweep.paired_minutes.size(); ++i) {
    if (cfg.sweep.paired_minutes[i] <= 0.0) fail("sweep fractions must be positive");
    if (i > 0 && cfg.sweep.paired_minutes[i] <= cfg.sweep.paired_minutes[i - 1])
      fail("sweep fractions must be strictly increasing");
  }
  if (cfg.sweep.seeds.empty()) fail("sweep needs at least one seed");
  for (const auto& v : cfg.sweep.variants) {
    bool ok = false;
    for (const auto& kv : known_variants()) ok = ok || kv == v;
    if (!ok) fail("sweep lists unknown variant " + v);
  }
}

inline nlohmann::json toy_spec_to_json(const ToyCorpusSpec& t) {
  return nlohmann::json{{"n_paired", t.n_paired},       {"n_unpaired", t.n_unpaired},
                        {"n_eval", t.n_eval},           {"lexicon_size", t.lexicon_size},
                        {"n_text_lines", t.n_text_lines}, {"sample_rate", t.sample_rate},
                        {"n_fft", t.n_fft},             {"seed", t.seed}};
}

inline ToyCorpusSpec toy_spec_from_json(const nlohmann::json& j) {
  ToyCorpusSpec t;
  t.n_paired = j.at("n_paired").get<std::size_t>();
  t.n_unpaired = j.at("n_unpaired").get<std::size_t>();
  t.n_eval = j.at("n_eval").get<std::size_t>();
  t.lexicon_size = j.at("lexicon_size").get<std::size_t>();
  t.n_text_lines = j.at("n_text_lines").get<std::size_t>();
  t.sample_rate = j.at("sample_rate").get<int>();
  t.n_fft = j.at("n_fft").get<std::size_t>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  return nlohmann::json{
      {"run_name", c.run_name},
      {"variant", c.variant},
      {"seed", c.seed},
      {"data_dir", c.data_dir},
      {"init", c.init},
      {"token_mode", c.token_mode},
      {"model", model_config_to_json(c.model)},
      {"train", train_config_to_json(c.train)},
      {"dsp",
       {{"n_fft", c.dsp.n_fft},
        {"hop", c.dsp.hop},
        {"win", c.dsp.win},
        {"n_mels", c.dsp.n_mels},
        {"fmin", c.dsp.fmin},
        {"fmax", c.dsp.fmax},
        {"sample_rate", c.dsp.sample_rate},
        {"floor_mag", c.dsp.floor_mag},
        {"griffin_lim_iters", c.dsp.griffin_lim_iters},
        {"n_coeffs", c.dsp.n_coeffs}}},
      {"toy", toy_spec_to_json(c.toy)},
      {"wordvec",
       {{"dim", c.wordvec.dim},
        {"window", c.wordvec.window},
        {"epochs", c.wordvec.epochs},
        {"path", c.wordvec.path}}},
      {"sweep",
       {{"paired_minutes", c.sweep.paired_minutes},
        {"variants", c.sweep.variants},
        {"seeds", c.sweep.seeds}}}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.run_name = j.at("run_name").get<std::string>();
  c.variant = j.at("variant").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.data_dir = j.at("data_dir").get<std::string>();
  c.init = j.at("init").get<std::string>();
  c.token_mode = j.at("token_mode").get<std::string>();
  c.model = model_config_from_json(j.at("model"));
  c.train = train_config_from_json(j.at("train"));
  const auto& d = j.at("dsp");
  c.dsp.n_fft = d.at("n_fft").get<std::size_t>();
  c.dsp.hop = d.at("hop").get<std::size_t>();
  c.dsp.win = d.at("win").get<std::size_t>();
  c.dsp.n_mels = d.at("n_mels").get<std::size_t>();
  c.dsp.fmin = d.at("fmin").get<double>();
  c.dsp.fmax = d.at("fmax").get<double>();
  c.dsp.sample_rate = d.at("sample_rate").get<int>();
  c.dsp.floor_mag = d.at("floor_mag").get<double>();
  c.dsp.griffin_lim_iters = d.at("griffin_lim_iters").get<std::size_t>();
  c.dsp.n_coeffs = d.at("n_coeffs").get<std::size_t>();
  c.toy = toy_spec_from_json(j.at("toy"));
  const auto& w = j.at("wordvec");
  c.wordvec.dim = w.at("dim").get<std::size_t>();
  c.wordvec.window = w.at("window").get<std::size_t>();
  c.wordvec.epochs = w.at("epochs").get<std::size_t>();
  c.wordvec.path = w.at("path").get<std::string>();
  const auto& s = j.at("sweep");
  c.sweep.paired_minutes = s.at("paired_minutes").get<std::vector<double>>();
  c.sweep.variants = s.at("variants").get<std::vector<std::string>>();
  c.sweep.seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
  return c;
}

inline std::string experiment_config_hash(const ExperimentConfig& c) {
  std::ostringstream ss;
  ss << std::hex << fnv1a(experiment_config_to_json(c).dump());
  return ss.str();
}

// Applies one dotted-path override like "model.dropout=0.2" or
// "sweep.seeds=[4,5]". The value is parsed as JSON when possible and kept
// as a string otherwise, so plain words need no extra quoting.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::runtime_error("override must look like path.to.key=value: " + assignment);
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  nlohmann::json* node = &j;
  std::size_t start = 0;
  std::vector<std::string> keys;
  while (true) {
    auto dot = path.find('.', start);
    keys.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i]))
      throw std::runtime_error("override path not in config: " + path);
    node = &(*node)[keys[i]];
    if (!node->is_object()) throw std::runtime_error("override path not in config: " + path);
  }
  const std::string& leaf = keys.back();
  if (!node->contains(leaf)) throw std::runtime_error("override path not in config: " + path);

  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;  // unquoted strings stay strings
  // refuse silent type changes (e.g. a string where a number lives)
  const nlohmann::json& old = (*node)[leaf];
  bool both_numbers = old.is_number() && parsed.is_number();
  if (!both_numbers && old.type() != parsed.type())
    throw std::runtime_error("override for " + path + " changes the value type");
  (*node)[leaf] = parsed;
}

inline ExperimentConfig load_experiment_config(const std::string& path,
                                               const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("config: " + path + ": " + e.what());
  }
  // fill omitted blocks with defaults so configs stay short
  nlohmann::json full = experiment_config_to_json(ExperimentConfig{});
  full.merge_patch(j);
  for (const auto& o : overrides) apply_override(full, o);
  ExperimentConfig cfg = experiment_config_from_json(full);
  validate_experiment(cfg);
  return cfg;
}

inline void save_experiment_config(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << experiment_config_to_json(cfg).dump(2) << "\n";
}

// ---- run-directory layout --------------------------------------------------

inline std::string run_root() {
  const char* env = std::getenv("SEMITTS_RUN_ROOT");
  return env && *env ? env : "runs";
}

struct RunPaths {
  std::string dir;

  std::string config_snapshot() const { return dir + "/config.json"; }
  std::string wordvec_table() const { return dir + "/wordvecs.txt"; }
  std::string pretrained_checkpoint() const { return dir + "/pretrained.ckpt"; }
  std::string model_checkpoint() const { return dir + "/model.ckpt"; }
  std::string pretrain_log() const { return dir + "/pretrain_log.csv"; }
  std::string train_log() const { return dir + "/train_log.csv"; }
  std::string val_log() const { return dir + "/val_log.csv"; }
  std::string eval_report() const { return dir + "/eval.csv"; }
  std::string sweep_csv() const { return dir + "/sweep.csv"; }
  std::string sweep_plot() const { return dir + "/sweep.svg"; }
};

inline RunPaths run_paths(const ExperimentConfig& cfg) {
  return RunPaths{run_root() + "/" + cfg.run_name};
}

// Model ready for training under this experiment: vocabulary from the
// lexicon, mel geometry and floor from the dsp block.
inline ModelConfig runtime_model(const ExperimentConfig& cfg, const Lexicon& lex) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = cfg.token_mode == "character" ? character_lexicon().inventory_size()
                                                : lex.inventory_size();
  mc.n_mels = cfg.dsp.n_mels;
  mc.mel_floor_log = std::log(cfg.dsp.floor_mag);
  mc.validate();
  return mc;
}

inline TokenMode token_mode_of(const ExperimentConfig& cfg) {
  return cfg.token_mode == "character" ? TokenMode::character : TokenMode::phoneme;
}

// The lexicon tokenization actually runs with: the corpus lexicon in phoneme
// mode, the fixed [a-z0-9] inventory in character mode.
inline Lexicon load_runtime_lexicon(const ExperimentConfig& cfg) {
  if (cfg.token_mode == "character") return character_lexicon();
  return load_lexicon(cfg.data_dir + "/lexicon.json");
}

}  // namespace semitts
