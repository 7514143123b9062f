#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semitts/checkpoint.hpp"
#include "semitts/dsp.hpp"
#include "semitts/manifest.hpp"
#include "semitts/model.hpp"
#include "semitts/optim.hpp"
#include "semitts/wav.hpp"
#include "semitts/wordvec.hpp"

namespace semitts {

struct TrainConfig {
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double grad_clip = 1.0;
  double stop_pos_weight = 5.0;  // one positive stop target per utterance
  std::size_t pretrain_steps = 5000;
  std::size_t finetune_steps = 10000;
  std::size_t validate_every = 100;
  std::size_t patience = 5;  // early stop after this many non-improving evaluations
  double val_fraction = 0.1;
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"batch_size", c.batch_size},
                        {"learning_rate", c.learning_rate},
                        {"grad_clip", c.grad_clip},
                        {"stop_pos_weight", c.stop_pos_weight},
                        {"pretrain_steps", c.pretrain_steps},
                        {"finetune_steps", c.finetune_steps},
                        {"validate_every", c.validate_every},
                        {"patience", c.patience},
                        {"val_fraction", c.val_fraction}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.stop_pos_weight = j.at("stop_pos_weight").get<double>();
  c.pretrain_steps = j.at("pretrain_steps").get<std::size_t>();
  c.finetune_steps = j.at("finetune_steps").get<std::size_t>();
  c.validate_every = j.at("validate_every").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.val_fraction = j.at("val_fraction").get<double>();
  return c;
}

struct TrainReport {
  std::size_t step = 0;
  double mel_l1 = 0.0;
  double stop_bce = 0.0;
  double grad_norm = 0.0;
  double seconds = 0.0;
};

inline std::string train_report_header() { return "step,mel_l1,stop_bce,grad_norm,seconds"; }

inline std::string train_report_csv_row(const TrainReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.3f", r.step, r.mel_l1, r.stop_bce,
                r.grad_norm, r.seconds);
  return buf;
}

// Disk cache of mel-log features keyed by utterance id; files are written
// via temp + rename so concurrent readers never see partial features.
class FeatureCache {
 public:
  FeatureCache(std::string dir, MelFilterbank fb, FrameParams fp,
               double floor_mag = kMagnitudeFloor)
      : dir_(std::move(dir)), fb_(std::move(fb)), fp_(fp), floor_mag_(floor_mag) {
    std::filesystem::create_directories(dir_);
  }

  Spectrogram get(const ManifestEntry& entry) {
    auto it = memo_.find(entry.id);
    if (it != memo_.end()) return it->second;
    std::string path = dir_ + "/" + entry.id + ".spec";
    Spectrogram s;
    if (std::filesystem::exists(path)) {
      s = load_spectrogram(path);
    } else {
      Waveform w;
      try {
        w = load_wav(entry.audio_path);
      } catch (const std::exception& e) {
        throw std::runtime_error("features: utterance " + entry.id + ": " + e.what());
      }
      s = mel_log_spectrogram(w, fb_, fp_, floor_mag_);
      save_spectrogram(path, s);
    }
    memo_.emplace(entry.id, s);
    return s;
  }

  const MelFilterbank& filterbank() const { return fb_; }
  const FrameParams& frame_params() const { return fp_; }
  double floor_mag() const { return floor_mag_; }

 private:
  std::string dir_;
  MelFilterbank fb_;
  FrameParams fp_;
  double floor_mag_ = kMagnitudeFloor;
  std::map<std::string, Spectrogram> memo_;
};

struct PairedItem {
  std::string id;
  TokenSequence tokens;
  Tensor word_vectors;       // words x D (zeros when conditioning is off)
  Tensor mel;                // padded_frames x M
  std::size_t real_frames = 0;
};

struct PairedBatch {
  std::vector<PairedItem> items;
  std::size_t padded_frames = 0;  // common to all items, multiple of r
  Tensor frame_mask;              // batch x padded_frames, 1 on real frames
  Tensor stop_targets;            // batch x groups, 1 on the final real group
};

struct UnpairedItem {
  std::string id;
  Tensor mel;
  std::size_t real_frames = 0;
};

// carries no text by construction
struct UnpairedBatch {
  std::vector<UnpairedItem> items;
  std::size_t padded_frames = 0;
  Tensor frame_mask;
};

namespace train_detail {

inline std::size_t padded_to(std::size_t frames, std::size_t r) {
  return ((frames + r - 1) / r) * r;
}

inline Tensor pad_mel(const Spectrogram& s, std::size_t frames) {
  Tensor out({frames, s.bins()});
  for (std::size_t t = 0; t < s.frames(); ++t)
    for (std::size_t m = 0; m < s.bins(); ++m) out.at(t, m) = s.values.at(t, m);
  for (std::size_t t = s.frames(); t < frames; ++t)
    for (std::size_t m = 0; m < s.bins(); ++m) out.at(t, m) = std::log(s.floor_mag);
  return out;
}

// deterministic bucketed batch order: items sorted by length with a
// seeded tie-break, cut into consecutive batches, batch order shuffled
// per (seed, epoch)
inline std::vector<std::vector<std::size_t>> batch_indices(const std::vector<std::size_t>& lengths,
                                                           std::size_t batch_size,
                                                           std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw std::runtime_error("batches: batch_size must be >= 1");
  std::vector<std::size_t> order(lengths.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (lengths[a] != lengths[b]) return lengths[a] < lengths[b];
    return derive_seed(seed, a) < derive_seed(seed, b);
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<std::size_t> b;
    for (std::size_t k = i; k < std::min(i + batch_size, order.size()); ++k) b.push_back(order[k]);
    batches.push_back(std::move(b));
  }
  Rng rng(derive_seed(derive_seed(seed, "batch-order"), epoch));
  for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[rng.below(i)]);
  return batches;
}

}  // namespace train_detail

inline std::vector<PairedBatch> make_paired_batches(const Manifest& manifest, FeatureCache& cache,
                                                    const Lexicon& lex, TokenMode token_mode,
                                                    const WordVectorTable* wordvecs,
                                                    std::size_t wordvec_dim, std::size_t batch_size,
                                                    std::size_t r, std::uint64_t seed,
                                                    std::size_t epoch) {
  if (!manifest.all_paired()) throw std::runtime_error("batches: paired manifest required");
  std::vector<Spectrogram> feats;
  std::vector<std::size_t> lengths;
  for (const auto& e : manifest.entries) {
    feats.push_back(cache.get(e));
    lengths.push_back(feats.back().frames());
  }
  auto groups = train_detail::batch_indices(lengths, batch_size, seed, epoch);
  std::vector<PairedBatch> out;
  for (const auto& g : groups) {
    PairedBatch b;
    std::size_t longest = 0;
    for (std::size_t idx : g) longest = std::max(longest, lengths[idx]);
    b.padded_frames = train_detail::padded_to(longest, r);
    const std::size_t groups_n = b.padded_frames / r;
    b.frame_mask = Tensor({g.size(), b.padded_frames});
    b.stop_targets = Tensor({g.size(), groups_n});
    for (std::size_t bi = 0; bi < g.size(); ++bi) {
      const auto& e = manifest.entries[g[bi]];
      PairedItem item;
      item.id = e.id;
      item.tokens = tokenize(normalize_text(*e.text), lex, token_mode);
      item.word_vectors = word_vector_rows(item.tokens, wordvecs, wordvec_dim);
      item.mel = train_detail::pad_mel(feats[g[bi]], b.padded_frames);
      item.real_frames = lengths[g[bi]];
      for (std::size_t t = 0; t < item.real_frames; ++t) b.frame_mask.at(bi, t) = 1.0;
      b.stop_targets.at(bi, (item.real_frames + r - 1) / r - 1) = 1.0;
      b.items.push_back(std::move(item));
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<UnpairedBatch> make_unpaired_batches(const Manifest& manifest,
                                                        FeatureCache& cache, std::size_t batch_size,
                                                        std::size_t r, std::uint64_t seed,
                                                        std::size_t epoch) {
  std::vector<Spectrogram> feats;
  std::vector<std::size_t> lengths;
  for (const auto& e : manifest.entries) {
    feats.push_back(cache.get(e));
    lengths.push_back(feats.back().frames());
  }
  auto groups = train_detail::batch_indices(lengths, batch_size, seed, epoch);
  std::vector<UnpairedBatch> out;
  for (const auto& g : groups) {
    UnpairedBatch b;
    std::size_t longest = 0;
    for (std::size_t idx : g) longest = std::max(longest, lengths[idx]);
    b.padded_frames = train_detail::padded_to(longest, r);
    b.frame_mask = Tensor({g.size(), b.padded_frames});
    for (std::size_t bi = 0; bi < g.size(); ++bi) {
      const auto& e = manifest.entries[g[bi]];
      UnpairedItem item{e.id, train_detail::pad_mel(feats[g[bi]], b.padded_frames), lengths[g[bi]]};
      for (std::size_t t = 0; t < item.real_frames; ++t) b.frame_mask.at(bi, t) = 1.0;
      b.items.push_back(std::move(item));
    }
    out.push_back(std::move(b));
  }
  return out;
}

struct LossParts {
  Tensor total;
  Tensor mel_l1;
  Tensor stop_bce;
};

// Masked mean absolute error over real frames plus 1.0x masked stop BCE
// (positive groups up-weighted). Padding contributes exactly zero to both
// terms: padded rows are multiplied by zero before the running sums see
// them, so appending padding never changes a single bit.
inline LossParts masked_loss(Graph& g, const Tensor& pred, const Tensor& target,
                             const std::vector<double>& frame_mask, const Tensor& stop_logits,
                             const std::vector<double>& stop_targets,
                             const std::vector<double>& stop_mask, double pos_weight) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw std::runtime_error("loss: mel shapes disagree");
  if (frame_mask.size() != pred.rows()) throw std::runtime_error("loss: frame mask length mismatch");
  double real_frames = 0.0;
  for (double v : frame_mask) real_frames += v;
  if (real_frames == 0.0) throw std::runtime_error("loss: empty batch (all-zero mask)");

  Tensor mask_mat({pred.rows(), pred.cols()});
  for (std::size_t t = 0; t < pred.rows(); ++t)
    for (std::size_t m = 0; m < pred.cols(); ++m) mask_mat.at(t, m) = frame_mask[t];
  LossParts parts;
  parts.mel_l1 = g.scale(g.sum(g.mul(g.abs(g.sub(pred, g.constant(target))), g.constant(mask_mat))),
                         1.0 / (real_frames * static_cast<double>(pred.cols())));

  if (stop_logits.rows() == 0) {
    parts.stop_bce = g.constant(Tensor({1, 1}));
    parts.total = parts.mel_l1;
    return parts;
  }
  if (stop_targets.size() != stop_logits.rows() || stop_mask.size() != stop_logits.rows())
    throw std::runtime_error("loss: stop target length mismatch");
  double real_groups = 0.0;
  for (double v : stop_mask) real_groups += v;
  if (real_groups == 0.0) throw std::runtime_error("loss: empty batch (all-zero mask)");
  // BCE with logits: pos_weight*y*softplus(-s) + (1-y)*softplus(s)
  Tensor wpos({stop_logits.rows(), 1}), wneg({stop_logits.rows(), 1});
  for (std::size_t i = 0; i < stop_targets.size(); ++i) {
    wpos.at(i, 0) = pos_weight * stop_targets[i] * stop_mask[i];
    wneg.at(i, 0) = (1.0 - stop_targets[i]) * stop_mask[i];
  }
  Tensor bce = g.add(g.mul(g.softplus(g.scale(stop_logits, -1.0)), g.constant(wpos)),
                     g.mul(g.softplus(stop_logits), g.constant(wneg)));
  parts.stop_bce = g.scale(g.sum(bce), 1.0 / real_groups);
  parts.total = g.add(parts.mel_l1, parts.stop_bce);
  return parts;
}

namespace train_detail {

// teacher-forced forwards for a whole batch inside one graph, losses
// normalized by batch-wide real counts
inline Tensor stack_plain(const std::vector<const Tensor*>& parts) {
  std::size_t rows = 0, cols = parts.empty() ? 0 : parts[0]->cols();
  for (const Tensor* p : parts) rows += p->rows();
  Tensor out({rows, cols});
  std::size_t r0 = 0;
  for (const Tensor* p : parts) {
    std::copy(p->data->begin(), p->data->end(), out.data->begin() + r0 * cols);
    r0 += p->rows();
  }
  return out;
}

inline LossParts paired_batch_loss(Graph& g, ParameterSet& ps, const ModelConfig& cfg,
                                   const PairedBatch& batch, double pos_weight, RunMode mode,
                                   Rng& rng) {
  std::vector<Tensor> preds, stops;
  std::vector<const Tensor*> targets_rows;
  std::vector<double> fmask, stop_y, stop_m;
  for (std::size_t bi = 0; bi < batch.items.size(); ++bi) {
    const PairedItem& item = batch.items[bi];
    Tensor memory = encode(g, ps, cfg, item.tokens, item.word_vectors, mode, rng);
    auto out = forward_teacher_forced(g, ps, cfg, memory, item.mel, ForwardMode::paired, mode, rng);
    preds.push_back(out.mel);
    targets_rows.push_back(&item.mel);
    stops.push_back(out.stop_logits);
    for (std::size_t t = 0; t < batch.padded_frames; ++t)
      fmask.push_back(batch.frame_mask.at(bi, t));
    const std::size_t groups = batch.padded_frames / cfg.reduction;
    for (std::size_t s = 0; s < groups; ++s) {
      stop_y.push_back(batch.stop_targets.at(bi, s));
      bool real = false;
      for (std::size_t t = s * cfg.reduction; t < (s + 1) * cfg.reduction; ++t)
        if (batch.frame_mask.at(bi, t) > 0.0) real = true;
      stop_m.push_back(real ? 1.0 : 0.0);
    }
  }
  Tensor pred = g.concat_rows(preds);
  Tensor stop = g.concat_rows(stops);
  return masked_loss(g, pred, stack_plain(targets_rows), fmask, stop, stop_y, stop_m, pos_weight);
}

inline LossParts pretrain_batch_loss(Graph& g, ParameterSet& ps, const ModelConfig& cfg,
                                     const UnpairedBatch& batch, RunMode mode, Rng& rng) {
  std::vector<Tensor> preds;
  std::vector<const Tensor*> targets_rows;
  std::vector<double> fmask;
  for (std::size_t bi = 0; bi < batch.items.size(); ++bi) {
    const UnpairedItem& item = batch.items[bi];
    auto out = forward_teacher_forced(g, ps, cfg, Tensor({0, 0}), item.mel, ForwardMode::pretrain,
                                      mode, rng);
    preds.push_back(out.mel);
    targets_rows.push_back(&item.mel);
    for (std::size_t t = 0; t < batch.padded_frames; ++t)
      fmask.push_back(batch.frame_mask.at(bi, t));
  }
  Tensor pred = g.concat_rows(preds);
  return masked_loss(g, pred, stack_plain(targets_rows), fmask, Tensor({0, 0}), {}, {}, 1.0);
}

}  // namespace train_detail

using StepCallback = std::function<void(const TrainReport&)>;

// Deterministic pretrain-loss evaluation over the whole set in manifest
// order, inference mode (no dropout, zoneout expectation); this is the
// value recorded in the checkpoint and reproduced on reload.
inline double pretrain_eval_loss(ParameterSet& ps, const ModelConfig& cfg, const Manifest& manifest,
                                 FeatureCache& cache, std::size_t batch_size) {
  auto batches = make_unpaired_batches(manifest, cache, batch_size, cfg.reduction, 0, 0);
  double acc = 0.0, weight = 0.0;
  for (const auto& b : batches) {
    Graph g;
    Rng rng(0);  // unused at inference
    auto parts = train_detail::pretrain_batch_loss(g, ps, cfg, b, RunMode::inference, rng);
    double real = 0.0;
    for (double v : *b.frame_mask.data) real += v;
    acc += parts.mel_l1.item() * real;
    weight += real;
  }
  return acc / weight;
}

// Next-frame decoder training on audio alone: encoder, conditioning, and
// attention projections frozen at their initial values, context zeroed.
inline Checkpoint pretrain_decoder(const Manifest& unpaired, const ModelConfig& mcfg,
                                   const TrainConfig& tcfg, FeatureCache& cache, std::uint64_t seed,
                                   const StepCallback& on_step = nullptr) {
  if (unpaired.entries.empty()) throw std::runtime_error("pretrain: empty manifest");
  if (!unpaired.all_unpaired())
    throw std::runtime_error("pretrain: manifest must be unpaired (no text fields)");
  mcfg.validate();

  ParameterSet ps = init_parameters(mcfg, seed);
  ps.freeze_mask = pretrain_freeze_set(ps);
  AdamState adam;
  adam.lr = tcfg.learning_rate;
  Rng rng(derive_seed(seed, "pretrain"));

  std::size_t step = 0, epoch = 0;
  while (step < tcfg.pretrain_steps) {
    auto batches = make_unpaired_batches(unpaired, cache, tcfg.batch_size, mcfg.reduction, seed,
                                         epoch++);
    for (const auto& batch : batches) {
      if (step >= tcfg.pretrain_steps) break;
      auto t0 = std::chrono::steady_clock::now();
      Graph g;
      auto parts = train_detail::pretrain_batch_loss(g, ps, mcfg, batch, RunMode::training, rng);
      auto grads = g.backward(parts.total);
      double norm = clip_global_norm(grads, tcfg.grad_clip);
      adam_step(ps, grads, adam);
      ++step;
      if (on_step) {
        TrainReport r;
        r.step = step;
        r.mel_l1 = parts.mel_l1.item();
        r.stop_bce = 0.0;
        r.grad_norm = norm;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        on_step(r);
      }
    }
  }

  Checkpoint ck;
  ck.config_json = nlohmann::json{{"model", model_config_to_json(mcfg)},
                                  {"train", train_config_to_json(tcfg)}}
                       .dump();
  ck.params = ps;
  ck.train_step = static_cast<long long>(step);
  ck.rng_state = rng.serialize();
  double final_loss = pretrain_eval_loss(ps, mcfg, unpaired, cache, tcfg.batch_size);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", final_loss);
  ck.meta["tag"] = "pretrained-decoder";
  ck.meta["final_eval_loss"] = buf;
  ck.meta["config_hash"] = model_config_hash(mcfg);
  ck.meta["decoder_shape_hash"] = decoder_shape_hash(mcfg);
  return ck;
}

struct FinetuneResult {
  Checkpoint checkpoint;  // best-validation parameters
  std::vector<TrainReport> reports;
  std::vector<std::pair<std::size_t, double>> val_history;  // (step, val loss)
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  bool early_stopped = false;
};

namespace train_detail {

inline double validation_loss(ParameterSet& ps, const ModelConfig& cfg, const TrainConfig& tcfg,
                              const std::vector<PairedBatch>& val_batches) {
  double acc = 0.0, weight = 0.0;
  for (const auto& b : val_batches) {
    Graph g;
    Rng rng(0);  // unused at inference
    auto parts = paired_batch_loss(g, ps, cfg, b, tcfg.stop_pos_weight, RunMode::inference, rng);
    double real = 0.0;
    for (double v : *b.frame_mask.data) real += v;
    acc += parts.total.item() * real;
    weight += real;
  }
  return acc / weight;
}

}  // namespace train_detail

// Joint training on paired data, optionally starting from a pretrained
// decoder (decoder parameters copied, everything else fresh, optimizer
// moments reset). Keeps the best-validation parameters and stops early
// after `patience` evaluations without improvement.
inline FinetuneResult finetune(const Manifest& paired, const ModelConfig& mcfg,
                               const TrainConfig& tcfg, FeatureCache& cache, const Lexicon& lex,
                               TokenMode token_mode, const WordVectorTable* wordvecs,
                               const Checkpoint* pretrained, std::uint64_t seed,
                               const StepCallback& on_step = nullptr) {
  if (paired.entries.empty()) throw std::runtime_error("finetune: empty manifest");
  if (!paired.all_paired()) throw std::runtime_error("finetune: manifest must be paired");
  mcfg.validate();

  ParameterSet ps = init_parameters(mcfg, seed);
  if (pretrained) {
    auto cj = nlohmann::json::parse(pretrained->config_json);
    ModelConfig pre_cfg = model_config_from_json(cj.at("model"));
    if (decoder_shape_hash(pre_cfg) != decoder_shape_hash(mcfg))
      throw std::runtime_error("finetune: pretrained checkpoint decoder shapes do not match");
    auto strip = [](const ModelConfig& c) {
      auto j = model_config_to_json(c);
      j.erase("conditioning");
      return j.dump();
    };
    if (strip(pre_cfg) != strip(mcfg))
      throw std::runtime_error("finetune: pretrained checkpoint config does not match outside "
                               "conditioning");
    for (auto& [name, t] : ps.values)
      if (name.rfind("dec/", 0) == 0) t = pretrained->params.at(name).detached_copy();
  }
  ps.freeze_mask.clear();

  // held-out validation split fixed by seed
  std::vector<std::size_t> order(paired.entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(seed, "valsplit"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split_rng.below(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::ceil(tcfg.val_fraction * order.size()));
  if (order.size() >= 2) n_val = std::min(std::max<std::size_t>(n_val, 1), order.size() - 1);
  else n_val = 0;
  Manifest train_set, val_set;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val_set : train_set).entries.push_back(paired.entries[order[i]]);

  const std::size_t D = mcfg.conditioning.wordvec_dim;
  std::vector<PairedBatch> val_batches;
  if (!val_set.entries.empty())
    val_batches = make_paired_batches(val_set, cache, lex, token_mode, wordvecs, D, tcfg.batch_size,
                                      mcfg.reduction, seed, 0);

  AdamState adam;
  adam.lr = tcfg.learning_rate;
  Rng rng(derive_seed(seed, "finetune"));
  FinetuneResult res;
  ParameterSet best;
  std::size_t best_step = 0, bad_evals = 0, step = 0, epoch = 0;
  bool stop = false;

  while (step < tcfg.finetune_steps && !stop) {
    auto batches = make_paired_batches(train_set, cache, lex, token_mode, wordvecs, D,
                                       tcfg.batch_size, mcfg.reduction, seed, epoch++);
    for (const auto& batch : batches) {
      if (step >= tcfg.finetune_steps || stop) break;
      auto t0 = std::chrono::steady_clock::now();
      Graph g;
      auto parts = train_detail::paired_batch_loss(g, ps, mcfg, batch, tcfg.stop_pos_weight,
                                                   RunMode::training, rng);
      double mel_v = parts.mel_l1.item(), stop_v = parts.stop_bce.item();
      auto grads = g.backward(parts.total);
      double norm = clip_global_norm(grads, tcfg.grad_clip);
      adam_step(ps, grads, adam);
      ++step;
      TrainReport r;
      r.step = step;
      r.mel_l1 = mel_v;
      r.stop_bce = stop_v;
      r.grad_norm = norm;
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.reports.push_back(r);
      if (on_step) on_step(r);
      if (!val_batches.empty() && step % tcfg.validate_every == 0) {
        double vl = train_detail::validation_loss(ps, mcfg, tcfg, val_batches);
        res.val_history.emplace_back(step, vl);
        if (vl < res.best_val) {
          res.best_val = vl;
          best_step = step;
          bad_evals = 0;
          best.values.clear();
          for (const auto& [name, t] : ps.values) best.values[name] = t.detached_copy();
        } else if (++bad_evals >= tcfg.patience) {
          res.early_stopped = true;
          stop = true;
        }
      }
    }
  }

  if (val_batches.empty() || res.val_history.empty()) {
    best.values.clear();
    for (const auto& [name, t] : ps.values) best.values[name] = t.detached_copy();
    best_step = step;
  }
  res.best_step = best_step;

  Checkpoint ck;
  ck.config_json = nlohmann::json{{"model", model_config_to_json(mcfg)},
                                  {"train", train_config_to_json(tcfg)}}
                       .dump();
  ck.params = best;
  ck.params.freeze_mask.clear();
  ck.train_step = static_cast<long long>(best_step);
  ck.rng_state = rng.serialize();
  ck.meta["tag"] = pretrained ? "finetuned-from-pretrained" : "finetuned-fresh";
  ck.meta["config_hash"] = model_config_hash(mcfg);
  ck.meta["decoder_shape_hash"] = decoder_shape_hash(mcfg);
  res.checkpoint = std::move(ck);
  return res;
}

}  // namespace semitts
