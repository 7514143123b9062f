#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "semitts/eval.hpp"
#include "semitts/toycorpus.hpp"
#include "semitts/training.hpp"

using namespace semitts;

namespace {

std::string scratch_dir(const std::string& leaf) {
  auto dir = std::filesystem::temp_directory_path() / "semitts-training-tests" / leaf;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One exact hop-length period of cos(2*pi*m*j/hop) tiled across the
// signal, with one extra sample so both reflect-padding boundaries fall
// on a crest. Every analysis frame then sees identical bytes, so the
// mel rows are constant in time.
Waveform tiled_tone(std::size_t m, std::size_t n_samples, std::size_t hop, int sr) {
  const double pi = 3.14159265358979323846;
  std::vector<double> base(hop);
  for (std::size_t j = 0; j < hop; ++j)
    base[j] = 0.3 * std::cos(2.0 * pi * static_cast<double>(m * j) / hop);
  Waveform w;
  w.sample_rate = sr;
  for (std::size_t n = 0; n < n_samples; ++n) w.samples.push_back(base[n % hop]);
  return w;
}

Waveform silence(std::size_t n_samples, int sr) {
  Waveform w;
  w.sample_rate = sr;
  w.samples.assign(n_samples, 0.0);
  return w;
}

Lexicon three_tone_lexicon() {
  nlohmann::json j{{"phonemes", {"q00", "q01", "q02", "q03", "q04", "q05", "q06", "q07", "q08", "q09"}},
                   {"words", {{"abc", {"q00", "q04", "q09"}}, {"go", {"q01", "q02"}}}}};
  return lexicon_from_json(j);
}

ModelConfig toy_model(std::size_t vocab) {
  ModelConfig mc;
  mc.vocab_size = vocab;
  mc.embedding_dim = 32;
  mc.encoder_prenet_dim = 32;
  mc.encoder_hidden = 32;
  mc.attention_mixtures = 2;
  mc.attention_rnn_dim = 48;
  mc.decoder_rnn_dim = 48;
  mc.decoder_prenet_dim = 32;
  mc.reduction = 4;
  mc.n_mels = 64;
  mc.max_decoder_steps = 40;
  mc.mel_floor_log = std::log(8.0);
  mc.dropout = 0.1;
  mc.zoneout = 0.0;
  return mc;
}

MelFilterbank toy_filterbank(std::size_t n_mels = 64) {
  return make_mel_filterbank(n_mels, 512, 8000, 0.0, 4000.0);
}

constexpr double kToyFloor = 8.0;

}  // namespace

TEST_CASE("manifests roundtrip through jsonl and reject malformed entries") {
  std::string dir = scratch_dir("manifest");

  SECTION("save then load preserves every field") {
    Manifest m;
    m.entries.push_back({"a01", dir + "/a01.wav", "hello there", 1.25});
    m.entries.push_back({"b02", dir + "/b02.wav", std::nullopt, 0.5});
    m.entries.push_back({"c03", dir + "/c03.wav", "", 2.0});  // empty text is still paired
    save_manifest(dir + "/m.jsonl", m);
    Manifest back = load_manifest(dir + "/m.jsonl");
    REQUIRE(back.entries.size() == 3);
    CHECK(back.entries[0].id == "a01");
    CHECK(back.entries[0].audio_path == dir + "/a01.wav");
    CHECK(back.entries[0].text == "hello there");
    CHECK(back.entries[0].duration_seconds == 1.25);
    CHECK_FALSE(back.entries[1].text.has_value());
    CHECK(back.entries[2].text == "");
    CHECK(back.total_duration() == Catch::Approx(3.75));
    CHECK_FALSE(back.all_paired());
    CHECK_FALSE(back.all_unpaired());

    Manifest paired{{m.entries[0], m.entries[2]}};
    CHECK(paired.all_paired());
    Manifest unpaired{{m.entries[1]}};
    CHECK(unpaired.all_unpaired());
  }

  SECTION("validation rejects duplicates, blanks, and bad durations") {
    Manifest dup;
    dup.entries.push_back({"x", "a.wav", std::nullopt, 1.0});
    dup.entries.push_back({"x", "b.wav", std::nullopt, 1.0});
    CHECK_THROWS_WITH(validate_manifest(dup), Catch::Matchers::ContainsSubstring("duplicate id x"));

    Manifest blank;
    blank.entries.push_back({"", "a.wav", std::nullopt, 1.0});
    CHECK_THROWS_WITH(validate_manifest(blank), Catch::Matchers::ContainsSubstring("empty utterance id"));

    Manifest nopath;
    nopath.entries.push_back({"y", "", std::nullopt, 1.0});
    CHECK_THROWS_WITH(validate_manifest(nopath), Catch::Matchers::ContainsSubstring("no audio path"));

    Manifest zero;
    zero.entries.push_back({"z", "a.wav", std::nullopt, 0.0});
    CHECK_THROWS_WITH(validate_manifest(zero),
                      Catch::Matchers::ContainsSubstring("non-positive duration"));
    zero.entries[0].duration_seconds = -1.0;
    CHECK_THROWS_WITH(validate_manifest(zero),
                      Catch::Matchers::ContainsSubstring("non-positive duration"));

    CHECK_THROWS_WITH(save_manifest(dir + "/bad.jsonl", dup),
                      Catch::Matchers::ContainsSubstring("duplicate id"));
  }

  SECTION("the loader reports the offending line") {
    std::ofstream out(dir + "/broken.jsonl", std::ios::binary);
    out << R"({"id":"ok","audio_path":"a.wav","duration_seconds":1.0})" << "\n";
    out << "this is not json\n";
    out.close();
    CHECK_THROWS_WITH(load_manifest(dir + "/broken.jsonl"),
                      Catch::Matchers::ContainsSubstring("line 2"));
    CHECK_THROWS_WITH(load_manifest(dir + "/absent.jsonl"),
                      Catch::Matchers::ContainsSubstring("cannot open"));
  }
}

TEST_CASE("toy corpus generation is deterministic and spectrally faithful") {
  SECTION("same seed reproduces every artifact byte for byte") {
    ToyCorpusSpec spec;
    spec.n_paired = 3;
    spec.n_unpaired = 4;
    spec.n_eval = 2;
    spec.lexicon_size = 5;
    spec.n_text_lines = 10;
    spec.seed = 7;

    std::string dir = scratch_dir("toy-deterministic");
    generate_toy_corpus(dir, spec);
    std::map<std::string, std::string> first;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
      if (e.is_regular_file()) first[e.path().string()] = read_bytes(e.path().string());
    REQUIRE(first.size() >= 3 + 4 + 2 + 5);  // wavs + lexicon, corpus, three manifests

    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    generate_toy_corpus(dir, spec);
    std::size_t seen = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
      if (e.is_regular_file()) {
        ++seen;
        REQUIRE(first.count(e.path().string()) == 1);
        CHECK(read_bytes(e.path().string()) == first[e.path().string()]);
      }
    CHECK(seen == first.size());
  }

  SECTION("manifests split text exactly as paired/unpaired/eval") {
    ToyCorpusSpec spec;
    spec.n_paired = 2;
    spec.n_unpaired = 3;
    spec.n_eval = 2;
    spec.lexicon_size = 4;
    spec.n_text_lines = 6;
    spec.seed = 21;
    std::string dir = scratch_dir("toy-structure");
    ToyCorpus corpus = generate_toy_corpus(dir, spec);

    Manifest paired = load_manifest(corpus.paired_manifest);
    Manifest unpaired = load_manifest(corpus.unpaired_manifest);
    Manifest eval_set = load_manifest(corpus.eval_manifest);
    REQUIRE(paired.entries.size() == 2);
    REQUIRE(unpaired.entries.size() == 3);
    REQUIRE(eval_set.entries.size() == 2);
    CHECK(paired.all_paired());
    CHECK(unpaired.all_unpaired());
    CHECK(eval_set.all_paired());
    CHECK(paired.entries[0].id == "p0000");
    CHECK(unpaired.entries[2].id == "u0002");
    CHECK(eval_set.entries[1].id == "e0001");
    for (const auto& e : paired.entries) CHECK(std::filesystem::exists(e.audio_path));

    std::ifstream corpus_txt(corpus.corpus_path);
    std::size_t lines = 0;
    std::string line;
    while (std::getline(corpus_txt, line)) {
      CHECK_FALSE(line.empty());
      ++lines;
    }
    CHECK(lines == 2 + 3 + 2 + 6);
  }

  SECTION("three phonemes render to 180 ms exactly") {
    Lexicon lex = three_tone_lexicon();
    Waveform w = render_toy_sentence({"abc"}, lex, 8000, 512);
    CHECK(w.samples.size() == 3 * 480);  // 3 x 60 ms at 8 kHz, eos adds nothing
    CHECK(w.duration_seconds() == Catch::Approx(0.18));

    // a two-word sentence inserts one silent separator segment
    Waveform two = render_toy_sentence({"abc", "go"}, lex, 8000, 512);
    CHECK(two.samples.size() == (3 + 1 + 2) * 480);
  }

  SECTION("each segment's dominant fft bin is the phoneme's assigned bin") {
    Lexicon lex = three_tone_lexicon();
    Waveform w = render_toy_sentence({"abc", "go"}, lex, 8000, 512);
    // tokens: q00 q04 q09 sil q01 q02 -> inventory slots 0, 4, 9, silence, 1, 2
    std::vector<long> expected_bins = {20, 44, 74, -1, 26, 32};
    REQUIRE(w.samples.size() == expected_bins.size() * 480);
    for (std::size_t seg = 0; seg < expected_bins.size(); ++seg) {
      std::vector<dsp_detail::cpx> buf(512, dsp_detail::cpx(0.0, 0.0));
      for (std::size_t i = 0; i < 480; ++i) buf[i] = dsp_detail::cpx(w.samples[seg * 480 + i], 0.0);
      dsp_detail::fft(buf, false);
      std::size_t peak = 0;
      double peak_mag = 0.0;
      for (std::size_t k = 0; k <= 256; ++k)
        if (std::abs(buf[k]) > peak_mag) {
          peak_mag = std::abs(buf[k]);
          peak = k;
        }
      if (expected_bins[seg] < 0) {
        CHECK(peak_mag == 0.0);  // silence segment
      } else {
        CHECK(peak == static_cast<std::size_t>(expected_bins[seg]));
      }
    }
  }

  SECTION("impossible corpora are rejected") {
    std::string dir = scratch_dir("toy-reject");
    ToyCorpusSpec spec;
    spec.n_paired = 0;
    CHECK_THROWS_WITH(generate_toy_corpus(dir, spec),
                      Catch::Matchers::ContainsSubstring("sizes must be >= 1"));
    spec = ToyCorpusSpec{};
    spec.lexicon_size = 24 * 24 * 24 + 1;
    CHECK_THROWS_WITH(generate_toy_corpus(dir, spec),
                      Catch::Matchers::ContainsSubstring("exceeds phoneme-inventory capacity"));
    spec = ToyCorpusSpec{};
    spec.n_fft = 256;  // highest tone bin (158) would not fit below Nyquist
    CHECK_THROWS_WITH(generate_toy_corpus(dir, spec),
                      Catch::Matchers::ContainsSubstring("fft size too small"));
  }
}

TEST_CASE("batching pads to the reduction factor and masks padding exactly") {
  std::string dir = scratch_dir("batching");
  Lexicon lex = three_tone_lexicon();
  FrameParams fp{512, 64, 256};
  MelFilterbank fb = toy_filterbank(16);

  // silence keeps frame counts exactly controllable: frames = ceil(len/hop)
  std::vector<std::size_t> lengths = {448, 512, 640, 320, 704};  // 7, 8, 10, 5, 11 frames
  Manifest manifest;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    std::string id = "s" + std::to_string(i);
    std::string path = dir + "/" + id + ".wav";
    save_wav(path, silence(lengths[i], 8000));
    manifest.entries.push_back({id, path, "abc", lengths[i] / 8000.0});
  }

  SECTION("five items at batch size two split 2+2+1") {
    FeatureCache cache(dir + "/feat", fb, fp, kToyFloor);
    auto batches = make_paired_batches(manifest, cache, lex, TokenMode::phoneme, nullptr, 0, 2, 2, 5, 0);
    REQUIRE(batches.size() == 3);
    std::multiset<std::size_t> sizes;
    for (const auto& b : batches) sizes.insert(b.items.size());
    CHECK(sizes == std::multiset<std::size_t>{1, 2, 2});
    // bucketing pairs neighbours in length order: {5,7}, {8,10}, {11} frames
    for (const auto& b : batches)
      if (b.items.size() == 2) {
        long diff = static_cast<long>(b.items[0].real_frames) -
                    static_cast<long>(b.items[1].real_frames);
        CHECK(std::labs(diff) == 2);
      }
  }

  SECTION("a 7-frame target at r=2 pads to 8 with the mask covering 7") {
    Manifest one{{manifest.entries[0]}};  // 448 samples -> 7 frames
    FeatureCache cache(dir + "/feat7", fb, fp, kToyFloor);
    auto batches = make_paired_batches(one, cache, lex, TokenMode::phoneme, nullptr, 0, 1, 2, 5, 0);
    REQUIRE(batches.size() == 1);
    const PairedBatch& b = batches[0];
    REQUIRE(b.items.size() == 1);
    CHECK(b.padded_frames == 8);
    CHECK(b.items[0].real_frames == 7);
    CHECK(b.items[0].mel.rows() == 8);
    double mask_sum = 0.0;
    for (std::size_t t = 0; t < 8; ++t) mask_sum += b.frame_mask.at(0, t);
    CHECK(mask_sum == 7.0);
    CHECK(b.frame_mask.at(0, 7) == 0.0);
    // the padded frame holds the feature floor
    for (std::size_t m = 0; m < b.items[0].mel.cols(); ++m)
      CHECK(b.items[0].mel.at(7, m) == std::log(kToyFloor));
    // stop target marks the final real group and nothing else
    REQUIRE(b.stop_targets.cols() == 4);
    for (std::size_t s = 0; s < 4; ++s) CHECK(b.stop_targets.at(0, s) == (s == 3 ? 1.0 : 0.0));
    // tokens and word-vector rows are aligned with the text
    CHECK(b.items[0].tokens.token_ids.size() == 4);  // q00 q04 q09 eos
    CHECK(b.items[0].word_vectors.rows() == b.items[0].tokens.words.size());
  }

  SECTION("the same seed reproduces the same batch order") {
    FeatureCache cache(dir + "/featdet", fb, fp, kToyFloor);
    auto ids_of = [&](std::size_t seed, std::size_t epoch) {
      std::vector<std::string> ids;
      for (const auto& b : make_paired_batches(manifest, cache, lex, TokenMode::phoneme, nullptr, 0,
                                               2, 2, seed, epoch))
        for (const auto& item : b.items) ids.push_back(item.id);
      return ids;
    };
    CHECK(ids_of(5, 0) == ids_of(5, 0));
    CHECK(ids_of(5, 3) == ids_of(5, 3));
  }

  SECTION("unpaired batches carry audio only") {
    Manifest unpaired;
    for (const auto& e : manifest.entries)
      unpaired.entries.push_back({e.id, e.audio_path, std::nullopt, e.duration_seconds});
    FeatureCache cache(dir + "/featu", fb, fp, kToyFloor);
    auto batches = make_unpaired_batches(unpaired, cache, 2, 2, 5, 0);
    REQUIRE(batches.size() == 3);
    std::size_t total = 0;
    for (const auto& b : batches) {
      total += b.items.size();
      for (const auto& item : b.items) {
        CHECK(item.mel.rows() == b.padded_frames);
        CHECK(item.real_frames <= b.padded_frames);
      }
    }
    CHECK(total == 5);

    CHECK_THROWS_WITH(make_paired_batches(unpaired, cache, lex, TokenMode::phoneme, nullptr, 0, 2,
                                          2, 5, 0),
                      Catch::Matchers::ContainsSubstring("paired manifest required"));
  }

  SECTION("an unreadable file is reported with its utterance id") {
    Manifest ghost;
    ghost.entries.push_back({"phantom7", dir + "/does-not-exist.wav", "abc", 1.0});
    FeatureCache cache(dir + "/featg", fb, fp, kToyFloor);
    CHECK_THROWS_WITH(make_paired_batches(ghost, cache, lex, TokenMode::phoneme, nullptr, 0, 1, 2, 5, 0),
                      Catch::Matchers::ContainsSubstring("phantom7"));
  }
}

TEST_CASE("masked loss: identities, exact offsets, and bit-exact padding") {
  Rng rng(31);
  auto random_tensor = [&](std::size_t r, std::size_t c) {
    Tensor t({r, c});
    for (auto& v : *t.data) v = 2.0 * rng.uniform01() - 1.0;
    return t;
  };

  SECTION("identical prediction with saturated stop logits scores about zero") {
    Graph g;
    Tensor target = random_tensor(6, 5);
    Tensor stops({3, 1});
    stops.at(0, 0) = -30.0;
    stops.at(1, 0) = -30.0;
    stops.at(2, 0) = 30.0;  // the true final group
    auto parts = masked_loss(g, g.constant(target), target, std::vector<double>(6, 1.0),
                             g.constant(stops), {0.0, 0.0, 1.0}, {1.0, 1.0, 1.0}, 5.0);
    CHECK(parts.mel_l1.item() == 0.0);
    CHECK(parts.total.item() < 1e-9);
  }

  SECTION("a constant +1 offset makes the mel term exactly one") {
    Graph g;
    Tensor target = random_tensor(4, 3);
    Tensor pred = target;
    pred.data = std::make_shared<std::vector<double>>(*target.data);
    for (auto& v : *pred.data) v += 1.0;
    auto parts = masked_loss(g, g.constant(pred), target, std::vector<double>(4, 1.0),
                             Tensor({0, 0}), {}, {}, 5.0);
    CHECK(parts.mel_l1.item() == 1.0);
    CHECK(parts.total.item() == 1.0);
  }

  SECTION("ten extra padded frames change nothing, down to the last bit") {
    Tensor pred = random_tensor(6, 4), target = random_tensor(6, 4);
    Tensor stops = random_tensor(3, 1);
    std::vector<double> stop_y = {0.0, 0.0, 1.0}, stop_m = {1.0, 1.0, 1.0};

    Graph g1;
    auto lean = masked_loss(g1, g1.constant(pred), target, std::vector<double>(6, 1.0),
                            g1.constant(stops), stop_y, stop_m, 5.0);

    // append garbage rows under a zero mask, plus masked-out stop groups
    Tensor pred_pad({16, 4}), target_pad({16, 4});
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t m = 0; m < 4; ++m) {
        pred_pad.at(t, m) = t < 6 ? pred.at(t, m) : 1e6 * (rng.uniform01() - 0.5);
        target_pad.at(t, m) = t < 6 ? target.at(t, m) : -777.0;
      }
    Tensor stops_pad({8, 1});
    std::vector<double> y_pad = stop_y, m_pad = stop_m;
    for (std::size_t s = 0; s < 8; ++s) stops_pad.at(s, 0) = s < 3 ? stops.at(s, 0) : 42.0;
    for (std::size_t s = 3; s < 8; ++s) {
      y_pad.push_back(1.0);  // would be wrong if it were ever counted
      m_pad.push_back(0.0);
    }
    std::vector<double> fmask(16, 0.0);
    for (std::size_t t = 0; t < 6; ++t) fmask[t] = 1.0;

    Graph g2;
    auto padded = masked_loss(g2, g2.constant(pred_pad), target_pad, fmask, g2.constant(stops_pad),
                              y_pad, m_pad, 5.0);
    CHECK(padded.mel_l1.item() == lean.mel_l1.item());
    CHECK(padded.stop_bce.item() == lean.stop_bce.item());
    CHECK(padded.total.item() == lean.total.item());
  }

  SECTION("degenerate inputs are rejected") {
    Graph g;
    Tensor a = random_tensor(3, 2), b = random_tensor(4, 2);
    CHECK_THROWS_WITH(masked_loss(g, g.constant(a), b, std::vector<double>(3, 1.0), Tensor({0, 0}),
                                  {}, {}, 1.0),
                      Catch::Matchers::ContainsSubstring("mel shapes disagree"));
    Tensor c = random_tensor(3, 2);
    CHECK_THROWS_WITH(masked_loss(g, g.constant(a), c, std::vector<double>(5, 1.0), Tensor({0, 0}),
                                  {}, {}, 1.0),
                      Catch::Matchers::ContainsSubstring("frame mask length mismatch"));
    CHECK_THROWS_WITH(masked_loss(g, g.constant(a), c, std::vector<double>(3, 0.0), Tensor({0, 0}),
                                  {}, {}, 1.0),
                      Catch::Matchers::ContainsSubstring("empty batch"));
    Tensor stops = random_tensor(2, 1);
    CHECK_THROWS_WITH(masked_loss(g, g.constant(a), c, std::vector<double>(3, 1.0),
                                  g.constant(stops), {1.0}, {1.0}, 1.0),
                      Catch::Matchers::ContainsSubstring("stop target length mismatch"));
  }
}

TEST_CASE("decoder pretraining fits constant frames and freezes the rest") {
  std::string dir = scratch_dir("pretrain");
  FrameParams fp{512, 64, 256};
  MelFilterbank fb = toy_filterbank(16);
  int sr = 8000;

  Manifest unpaired;
  std::vector<std::size_t> tones = {2, 5, 9, 14};
  for (std::size_t i = 0; i < tones.size(); ++i) {
    std::string id = "c" + std::to_string(i);
    std::string path = dir + "/" + id + ".wav";
    Waveform w = tiled_tone(tones[i], 256 * 64 + 1, 64, sr);
    save_wav(path, w);
    unpaired.entries.push_back({id, path, std::nullopt, w.duration_seconds()});
  }

  ModelConfig mc = toy_model(8);
  mc.embedding_dim = 8;
  mc.encoder_prenet_dim = 8;
  mc.encoder_hidden = 8;
  mc.attention_rnn_dim = 32;
  mc.decoder_rnn_dim = 32;
  mc.decoder_prenet_dim = 16;
  mc.reduction = 2;
  mc.n_mels = 16;

  TrainConfig tc;
  tc.batch_size = 4;
  tc.learning_rate = 3e-3;
  tc.pretrain_steps = 300;

  SECTION("every mel frame of the tiled tones is bit-identical") {
    FeatureCache cache(dir + "/feat-const", fb, fp, kToyFloor);
    for (const auto& e : unpaired.entries) {
      Spectrogram s = cache.get(e);
      REQUIRE(s.frames() == 257);
      for (std::size_t t = 1; t < s.frames(); ++t)
        for (std::size_t k = 0; k < s.bins(); ++k)
          REQUIRE(s.values.at(t, k) == s.values.at(0, k));
    }
  }

  SECTION("constant frames are learned to L1 under 1e-2 in 300 steps") {
    FeatureCache cache(dir + "/feat", fb, fp, kToyFloor);
    std::vector<TrainReport> reports;
    Checkpoint ck = pretrain_decoder(unpaired, mc, tc, cache, 7,
                                     [&](const TrainReport& r) { reports.push_back(r); });
    REQUIRE(reports.size() == 300);
    for (std::size_t i = 0; i < reports.size(); ++i) {
      CHECK(reports[i].step == i + 1);
      CHECK(std::isfinite(reports[i].mel_l1));
      CHECK(std::isfinite(reports[i].grad_norm));
    }
    CHECK(ck.meta.at("tag") == "pretrained-decoder");
    double final_loss = std::stod(ck.meta.at("final_eval_loss"));
    CHECK(final_loss < 1e-2);

    // the recorded loss is reproducible from the checkpoint alone
    std::string path = dir + "/pre.ckpt";
    save_checkpoint(path, ck);
    Checkpoint back = load_checkpoint(path);
    ModelConfig loaded_cfg =
        model_config_from_json(nlohmann::json::parse(back.config_json).at("model"));
    double replayed = pretrain_eval_loss(back.params, loaded_cfg, unpaired, cache, tc.batch_size);
    CHECK(std::fabs(replayed - final_loss) <= 1e-10);

    // everything outside the decoder is bit-identical to initialization
    ParameterSet fresh = init_parameters(mc, 7);
    std::size_t frozen_checked = 0, trained_changed = 0;
    for (const auto& [name, t] : ck.params.values) {
      const Tensor& f = fresh.at(name);
      if (name.rfind("dec/", 0) == 0) {
        bool changed = false;
        for (std::size_t i = 0; i < t.data->size(); ++i)
          if ((*t.data)[i] != (*f.data)[i]) changed = true;
        if (changed) ++trained_changed;
      } else {
        ++frozen_checked;
        for (std::size_t i = 0; i < t.data->size(); ++i) REQUIRE((*t.data)[i] == (*f.data)[i]);
      }
    }
    CHECK(frozen_checked > 0);
    CHECK(trained_changed > 0);
  }

  SECTION("the same seed yields byte-identical checkpoints") {
    TrainConfig quick = tc;
    quick.pretrain_steps = 30;
    FeatureCache cache(dir + "/feat-det", fb, fp, kToyFloor);
    Checkpoint a = pretrain_decoder(unpaired, mc, quick, cache, 99);
    Checkpoint b = pretrain_decoder(unpaired, mc, quick, cache, 99);
    save_checkpoint(dir + "/a.ckpt", a);
    save_checkpoint(dir + "/b.ckpt", b);
    CHECK(read_bytes(dir + "/a.ckpt") == read_bytes(dir + "/b.ckpt"));
  }

  SECTION("empty or paired manifests are rejected") {
    FeatureCache cache(dir + "/feat-err", fb, fp, kToyFloor);
    Manifest empty;
    CHECK_THROWS_WITH(pretrain_decoder(empty, mc, tc, cache, 1),
                      Catch::Matchers::ContainsSubstring("empty manifest"));
    Manifest paired = unpaired;
    paired.entries[1].text = "surprise transcript";
    CHECK_THROWS_WITH(pretrain_decoder(paired, mc, tc, cache, 1),
                      Catch::Matchers::ContainsSubstring("must be unpaired"));
  }
}

TEST_CASE("finetuning learns a small corpus and guards checkpoint compatibility") {
  std::string dir = scratch_dir("finetune");
  ToyCorpusSpec spec;
  spec.n_paired = 20;
  spec.n_unpaired = 1;
  spec.n_eval = 1;
  spec.lexicon_size = 8;
  spec.n_text_lines = 5;
  spec.seed = 5;
  ToyCorpus corpus = generate_toy_corpus(dir + "/data", spec);
  Manifest paired = load_manifest(corpus.paired_manifest);
  Lexicon lex = load_lexicon(corpus.lexicon_path);
  FrameParams fp{512, 64, 256};
  MelFilterbank fb = toy_filterbank();
  ModelConfig mc = toy_model(lex.inventory_size());

  SECTION("training loss halves within 2000 steps from fresh init") {
    FeatureCache cache(dir + "/feat", fb, fp, kToyFloor);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.learning_rate = 5e-3;
    tc.finetune_steps = 2000;
    tc.validate_every = 100;
    tc.patience = 1000;
    tc.val_fraction = 0.1;
    FinetuneResult res = finetune(paired, mc, tc, cache, lex, TokenMode::phoneme, nullptr, nullptr, 11);

    REQUIRE(res.reports.size() == 2000);
    for (std::size_t i = 0; i < res.reports.size(); ++i) {
      REQUIRE(res.reports[i].step == i + 1);
      REQUIRE(std::isfinite(res.reports[i].mel_l1));
      REQUIRE(std::isfinite(res.reports[i].stop_bce));
      REQUIRE(std::isfinite(res.reports[i].grad_norm));
    }
    auto window_mean = [&](std::size_t from, std::size_t n) {
      double s = 0.0;
      for (std::size_t i = from; i < from + n; ++i) s += res.reports[i].mel_l1;
      return s / n;
    };
    double head = window_mean(0, 50), tail = window_mean(2000 - 50, 50);
    INFO("head-50 mean " << head << " tail-50 mean " << tail);
    CHECK(tail < 0.5 * head);

    // validation ran on schedule and the best value is the running minimum
    REQUIRE(res.val_history.size() == 20);
    double min_val = std::numeric_limits<double>::infinity();
    std::size_t min_step = 0;
    for (std::size_t i = 0; i < res.val_history.size(); ++i) {
      CHECK(res.val_history[i].first == (i + 1) * 100);
      CHECK(std::isfinite(res.val_history[i].second));
      if (res.val_history[i].second < min_val) {
        min_val = res.val_history[i].second;
        min_step = res.val_history[i].first;
      }
    }
    CHECK(res.best_val == min_val);
    CHECK(res.best_step == min_step);
    CHECK(res.checkpoint.train_step == static_cast<long long>(min_step));
    CHECK_FALSE(res.early_stopped);
    CHECK(res.checkpoint.meta.at("tag") == "finetuned-fresh");
    CHECK(res.checkpoint.meta.at("config_hash") == model_config_hash(mc));

    // the csv row layout matches the advertised header
    CHECK(train_report_header() == "step,mel_l1,stop_bce,grad_norm,seconds");
    std::string row = train_report_csv_row(res.reports[0]);
    CHECK(std::count(row.begin(), row.end(), ',') == 4);
    CHECK(row.rfind("1,", 0) == 0);
  }

  SECTION("equal seeds give byte-identical checkpoints") {
    FeatureCache cache(dir + "/feat-det", fb, fp, kToyFloor);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.learning_rate = 3e-3;
    tc.finetune_steps = 40;
    tc.validate_every = 20;
    tc.patience = 1000;
    tc.val_fraction = 0.1;
    FinetuneResult a = finetune(paired, mc, tc, cache, lex, TokenMode::phoneme, nullptr, nullptr, 9);
    FinetuneResult b = finetune(paired, mc, tc, cache, lex, TokenMode::phoneme, nullptr, nullptr, 9);
    save_checkpoint(dir + "/a.ckpt", a.checkpoint);
    save_checkpoint(dir + "/b.ckpt", b.checkpoint);
    CHECK(read_bytes(dir + "/a.ckpt") == read_bytes(dir + "/b.ckpt"));
    REQUIRE(a.reports.size() == b.reports.size());
    for (std::size_t i = 0; i < a.reports.size(); ++i)
      CHECK(a.reports[i].mel_l1 == b.reports[i].mel_l1);
  }

  SECTION("pretrained-init compatibility is checked, conditioning aside") {
    FeatureCache cache(dir + "/feat-compat", fb, fp, kToyFloor);
    Manifest unpaired = load_manifest(corpus.unpaired_manifest);
    TrainConfig pre_tc;
    pre_tc.batch_size = 1;
    pre_tc.learning_rate = 3e-3;
    pre_tc.pretrain_steps = 5;
    Checkpoint pre = pretrain_decoder(unpaired, mc, pre_tc, cache, 3);

    TrainConfig tc;
    tc.batch_size = 4;
    tc.learning_rate = 3e-3;
    tc.finetune_steps = 5;
    tc.validate_every = 100;
    tc.val_fraction = 0.1;

    ModelConfig wrong_shape = mc;
    wrong_shape.decoder_rnn_dim = 56;
    CHECK_THROWS_WITH(finetune(paired, wrong_shape, tc, cache, lex, TokenMode::phoneme, nullptr,
                               &pre, 4),
                      Catch::Matchers::ContainsSubstring("decoder shapes do not match"));

    ModelConfig wrong_dropout = mc;
    wrong_dropout.dropout = 0.25;
    CHECK_THROWS_WITH(finetune(paired, wrong_dropout, tc, cache, lex, TokenMode::phoneme, nullptr,
                               &pre, 4),
                      Catch::Matchers::ContainsSubstring("outside conditioning"));

    // flipping conditioning on is the one permitted difference
    ModelConfig with_cond = mc;
    with_cond.conditioning.enabled = true;
    with_cond.conditioning.method = "concat";
    with_cond.conditioning.location = "input";
    with_cond.conditioning.wordvec_dim = 8;
    FinetuneResult res =
        finetune(paired, with_cond, tc, cache, lex, TokenMode::phoneme, nullptr, &pre, 4);
    CHECK(res.reports.size() == 5);
    CHECK(res.checkpoint.meta.at("tag") == "finetuned-from-pretrained");

    // a zero-step run exposes the starting point: decoder weights are the
    // pretrained values, everything else is the fresh seed-4 init
    TrainConfig none = tc;
    none.finetune_steps = 0;
    FinetuneResult start =
        finetune(paired, with_cond, none, cache, lex, TokenMode::phoneme, nullptr, &pre, 4);
    ParameterSet fresh = init_parameters(with_cond, 4);
    for (const auto& [name, t] : start.checkpoint.params.values) {
      const Tensor& want = name.rfind("dec/", 0) == 0 ? pre.params.at(name) : fresh.at(name);
      REQUIRE(t.data->size() == want.data->size());
      for (std::size_t i = 0; i < t.data->size(); ++i) REQUIRE((*t.data)[i] == (*want.data)[i]);
    }

    Manifest empty;
    CHECK_THROWS_WITH(finetune(empty, mc, tc, cache, lex, TokenMode::phoneme, nullptr, nullptr, 1),
                      Catch::Matchers::ContainsSubstring("empty manifest"));
    Manifest not_paired = unpaired;
    CHECK_THROWS_WITH(finetune(not_paired, mc, tc, cache, lex, TokenMode::phoneme, nullptr, nullptr, 1),
                      Catch::Matchers::ContainsSubstring("must be paired"));
  }
}

TEST_CASE("a model trained to memorize one utterance synthesizes it under 2 dB") {
  std::string dir = scratch_dir("memorize");
  ToyCorpusSpec spec;
  spec.n_paired = 1;
  spec.n_unpaired = 1;
  spec.n_eval = 1;
  spec.lexicon_size = 6;
  spec.n_text_lines = 5;
  spec.seed = 3;
  ToyCorpus corpus = generate_toy_corpus(dir + "/data", spec);
  Manifest paired = load_manifest(corpus.paired_manifest);
  Lexicon lex = load_lexicon(corpus.lexicon_path);

  FrameParams fp{512, 64, 256};
  MelFilterbank fb = toy_filterbank();
  FeatureCache cache(dir + "/feat", fb, fp, kToyFloor);
  ModelConfig mc = toy_model(lex.inventory_size());
  mc.max_decoder_steps = 30;

  TrainConfig tc;
  tc.batch_size = 1;
  tc.learning_rate = 3e-3;
  tc.finetune_steps = 2500;
  tc.validate_every = 1 << 20;  // single utterance: no held-out split
  tc.val_fraction = 0.0;

  FinetuneResult res = finetune(paired, mc, tc, cache, lex, TokenMode::phoneme, nullptr, nullptr, 1);

  EvalContext ctx;
  ctx.model = mc;
  ctx.params = &res.checkpoint.params;
  ctx.lexicon = lex;
  ctx.fb = fb;
  ctx.fp = fp;
  ctx.floor_mag = kToyFloor;
  ctx.griffin_lim_iters = 60;
  ctx.seed = 9;
  EvalReport rep = evaluate_set(ctx, paired);
  REQUIRE(rep.rows.size() == 1);
  REQUIRE(rep.rows[0].error.empty());
  INFO("eval mcd " << rep.rows[0].result.mcd_db << " dB");
  CHECK(rep.rows[0].result.mcd_db < 2.0);
}
