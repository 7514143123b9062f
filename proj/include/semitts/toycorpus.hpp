#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semitts/manifest.hpp"
#include "semitts/rng.hpp"
#include "semitts/text.hpp"
#include "semitts/wav.hpp"

namespace semitts {

// Deterministic miniature speech corpus: every phoneme is a fixed pure
// tone on an exact FFT bin, words are short phoneme strings, utterances
// are word sequences. Audio is the token-by-token concatenation of 60 ms
// segments (silence for sil) with raised-cosine fades, so the mapping
// from text to sound is exactly learnable and synthesis quality is
// measurable without human listeners.
struct ToyCorpusSpec {
  std::size_t n_paired = 80;
  std::size_t n_unpaired = 500;
  std::size_t n_eval = 12;
  std::size_t lexicon_size = 12;
  std::size_t n_text_lines = 1500;  // extra text-only sentences for word vectors
  int sample_rate = 8000;
  std::size_t n_fft = 512;  // phoneme frequencies snap to these bins
  std::uint64_t seed = 1;
};

struct ToyCorpus {
  std::string dir;
  std::string lexicon_path;
  std::string corpus_path;  // plain text, one sentence per line
  std::string paired_manifest;
  std::string unpaired_manifest;
  std::string eval_manifest;
};

namespace toy_detail {

constexpr std::size_t kInventory = 24;   // tone phonemes available
constexpr double kSegmentSeconds = 0.06; // per-token duration
constexpr double kFadeSeconds = 0.005;
constexpr double kAmplitude = 0.5;

inline std::string phoneme_name(std::size_t i) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "q%02zu", i);
  return buf;
}

inline double phoneme_frequency(std::size_t i, int sample_rate, std::size_t n_fft) {
  // bins 20, 26, 32, ... keep tones distinct, resolvable, and mid-band
  std::size_t bin = 20 + 6 * i;
  return static_cast<double>(bin) * sample_rate / static_cast<double>(n_fft);
}

inline void append_segment(std::vector<double>& out, double freq, int sr) {
  const std::size_t n = static_cast<std::size_t>(std::llround(kSegmentSeconds * sr));
  const std::size_t fade = static_cast<std::size_t>(std::llround(kFadeSeconds * sr));
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    if (freq > 0.0) {
      double env = 1.0;
      if (i < fade) env = 0.5 - 0.5 * std::cos(pi * i / fade);
      else if (i + fade >= n) env = 0.5 - 0.5 * std::cos(pi * (n - 1 - i) / fade);
      v = kAmplitude * env * std::sin(2.0 * pi * freq * i / sr);
    }
    out.push_back(v);
  }
}

inline std::vector<std::string> sample_sentence(Rng& rng, const std::vector<std::string>& vocab) {
  std::size_t n_words = 2 + rng.below(3);  // 2..4 words
  std::vector<std::string> words;
  for (std::size_t w = 0; w < n_words; ++w) words.push_back(vocab[rng.below(vocab.size())]);
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

}  // namespace toy_detail

// Renders one normalized sentence to samples using the corpus tone map.
// eos contributes no audio; sil between words is a silent segment.
inline Waveform render_toy_sentence(const std::vector<std::string>& words, const Lexicon& lex,
                                    int sample_rate, std::size_t n_fft) {
  TokenSequence seq = tokenize(words, lex, TokenMode::phoneme, false);
  Waveform w;
  w.sample_rate = sample_rate;
  for (int id : seq.token_ids) {
    if (id == kEosId || id == kPadId) continue;
    double freq = 0.0;
    if (id != kSilId) {
      // reserved ids occupy 0..2, tone phonemes follow in inventory order
      freq = toy_detail::phoneme_frequency(static_cast<std::size_t>(id) - 3, sample_rate, n_fft);
    }
    toy_detail::append_segment(w.samples, freq, sample_rate);
  }
  return w;
}

inline ToyCorpus generate_toy_corpus(const std::string& dir, const ToyCorpusSpec& spec) {
  using namespace toy_detail;
  if (spec.n_paired < 1 || spec.n_unpaired < 1 || spec.n_eval < 1 || spec.lexicon_size < 1)
    throw std::runtime_error("toy corpus: sizes must be >= 1");
  const std::size_t capacity = kInventory * kInventory * kInventory;  // 3-phoneme words alone
  if (spec.lexicon_size > capacity)
    throw std::runtime_error("toy corpus: lexicon size exceeds phoneme-inventory capacity");
  if (20 + 6 * (kInventory - 1) >= spec.n_fft / 2)
    throw std::runtime_error("toy corpus: fft size too small for the tone palette");

  std::filesystem::create_directories(dir + "/audio");
  Rng rng(derive_seed(spec.seed, "toycorpus"));

  // lexicon: unique random pronunciations of 2..4 tone phonemes
  nlohmann::json phonemes = nlohmann::json::array();
  for (std::size_t i = 0; i < kInventory; ++i) phonemes.push_back(phoneme_name(i));
  std::set<std::vector<std::size_t>> used;
  nlohmann::json words_json = nlohmann::json::object();
  std::vector<std::string> vocab;
  for (std::size_t w = 0; w < spec.lexicon_size; ++w) {
    std::vector<std::size_t> pron;
    for (int tries = 0;; ++tries) {
      if (tries > 10000) throw std::runtime_error("toy corpus: lexicon size exceeds phoneme-inventory capacity");
      pron.clear();
      std::size_t len = 2 + rng.below(3);
      for (std::size_t i = 0; i < len; ++i) pron.push_back(rng.below(kInventory));
      if (used.insert(pron).second) break;
    }
    char name[8];
    std::snprintf(name, sizeof name, "w%02zu", w);
    nlohmann::json pj = nlohmann::json::array();
    for (std::size_t p : pron) pj.push_back(phoneme_name(p));
    words_json[name] = pj;
    vocab.emplace_back(name);
  }
  ToyCorpus out;
  out.dir = dir;
  out.lexicon_path = dir + "/lexicon.json";
  {
    std::ofstream f(out.lexicon_path, std::ios::binary);
    if (!f) throw std::runtime_error("toy corpus: cannot write " + out.lexicon_path);
    f << nlohmann::json{{"phonemes", phonemes}, {"words", words_json}}.dump(2) << "\n";
  }
  Lexicon lex = lexicon_from_json(nlohmann::json{{"phonemes", phonemes}, {"words", words_json}});

  std::vector<std::string> corpus_lines;
  auto emit_set = [&](const std::string& prefix, std::size_t count, bool with_text,
                      Manifest& manifest) {
    for (std::size_t i = 0; i < count; ++i) {
      auto words = sample_sentence(rng, vocab);
      corpus_lines.push_back(join_words(words));
      Waveform w = render_toy_sentence(words, lex, spec.sample_rate, spec.n_fft);
      char id[32];
      std::snprintf(id, sizeof id, "%s%04u", prefix.c_str(), static_cast<unsigned>(i));
      std::string wav_path = dir + "/audio/" + id + ".wav";
      save_wav(wav_path, w);
      ManifestEntry e;
      e.id = id;
      e.audio_path = wav_path;
      e.duration_seconds = w.duration_seconds();
      if (with_text) e.text = join_words(words);
      manifest.entries.push_back(std::move(e));
    }
  };

  Manifest paired, unpaired, eval_set;
  emit_set("p", spec.n_paired, true, paired);
  emit_set("u", spec.n_unpaired, false, unpaired);  // transcripts discarded
  emit_set("e", spec.n_eval, true, eval_set);
  for (std::size_t i = 0; i < spec.n_text_lines; ++i)
    corpus_lines.push_back(join_words(sample_sentence(rng, vocab)));

  out.paired_manifest = dir + "/paired.jsonl";
  out.unpaired_manifest = dir + "/unpaired.jsonl";
  out.eval_manifest = dir + "/eval.jsonl";
  out.corpus_path = dir + "/corpus.txt";
  save_manifest(out.paired_manifest, paired);
  save_manifest(out.unpaired_manifest, unpaired);
  save_manifest(out.eval_manifest, eval_set);
  {
    std::ofstream f(out.corpus_path, std::ios::binary);
    if (!f) throw std::runtime_error("toy corpus: cannot write " + out.corpus_path);
    for (const auto& line : corpus_lines) f << line << "\n";
  }
  return out;
}

}  // namespace semitts
