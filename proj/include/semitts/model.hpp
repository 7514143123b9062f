#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "semitts/rng.hpp"
#include "semitts/tensor.hpp"
#include "semitts/text.hpp"

namespace semitts {

struct ConditioningConfig {
  bool enabled = false;
  std::string method = "concat";  // concat | attention
  std::string location = "top";   // input | top
  std::size_t wordvec_dim = 16;   // D
  std::size_t attention_dim = 64; // A, tanh projection width of the attention head
};

struct ModelConfig {
  std::size_t vocab_size = 0;       // token inventory size, set from the lexicon
  std::size_t embedding_dim = 64;   // E
  std::size_t encoder_prenet_dim = 64;
  std::size_t encoder_hidden = 64;  // H per direction
  ConditioningConfig conditioning;
  std::size_t attention_mixtures = 4;   // K
  std::size_t attention_rnn_dim = 128;  // first decoder LSTM
  std::size_t decoder_rnn_dim = 128;    // second decoder LSTM
  std::size_t decoder_prenet_dim = 64;
  double zoneout = 0.1;
  double dropout = 0.5;
  std::size_t reduction = 2;   // r frames per decoder step
  std::size_t n_mels = 80;     // M
  std::size_t max_decoder_steps = 400;
  double mel_floor_log = std::log(1e-5);  // log floor of the mel features

  // width of the encoder output rows the decoder attends over
  std::size_t memory_dim() const {
    std::size_t m = 2 * encoder_hidden;
    if (conditioning.enabled && conditioning.location == "top") m += conditioning.wordvec_dim;
    return m;
  }
  std::size_t encoder_input_dim() const {
    std::size_t e = embedding_dim;
    if (conditioning.enabled && conditioning.location == "input") e += conditioning.wordvec_dim;
    return e;
  }

  void validate() const {
    if (vocab_size < 3) throw std::runtime_error("model config: vocab_size must cover reserved tokens");
    for (auto [v, name] : {std::pair<std::size_t, const char*>{embedding_dim, "embedding_dim"},
                           {encoder_prenet_dim, "encoder_prenet_dim"},
                           {encoder_hidden, "encoder_hidden"},
                           {attention_mixtures, "attention_mixtures"},
                           {attention_rnn_dim, "attention_rnn_dim"},
                           {decoder_rnn_dim, "decoder_rnn_dim"},
                           {decoder_prenet_dim, "decoder_prenet_dim"},
                           {reduction, "reduction"},
                           {n_mels, "n_mels"},
                           {max_decoder_steps, "max_decoder_steps"}})
      if (v < 1) throw std::runtime_error(std::string("model config: ") + name + " must be >= 1");
    if (zoneout < 0.0 || zoneout > 1.0) throw std::runtime_error("model config: zoneout outside [0,1]");
    if (dropout < 0.0 || dropout >= 1.0) throw std::runtime_error("model config: dropout outside [0,1)");
    if (!std::isfinite(mel_floor_log)) throw std::runtime_error("model config: mel_floor_log must be finite");
    if (conditioning.enabled) {
      if (conditioning.method != "concat" && conditioning.method != "attention")
        throw std::runtime_error("model config: conditioning method must be concat or attention");
      if (conditioning.location != "input" && conditioning.location != "top")
        throw std::runtime_error("model config: conditioning location must be input or top");
      if (conditioning.wordvec_dim < 1) throw std::runtime_error("model config: wordvec_dim must be >= 1");
      if (conditioning.method == "attention" && conditioning.attention_dim < 1)
        throw std::runtime_error("model config: attention_dim must be >= 1");
    }
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"vocab_size", c.vocab_size},
      {"embedding_dim", c.embedding_dim},
      {"encoder_prenet_dim", c.encoder_prenet_dim},
      {"encoder_hidden", c.encoder_hidden},
      {"conditioning",
       {{"enabled", c.conditioning.enabled},
        {"method", c.conditioning.method},
        {"location", c.conditioning.location},
        {"wordvec_dim", c.conditioning.wordvec_dim},
        {"attention_dim", c.conditioning.attention_dim}}},
      {"attention_mixtures", c.attention_mixtures},
      {"attention_rnn_dim", c.attention_rnn_dim},
      {"decoder_rnn_dim", c.decoder_rnn_dim},
      {"decoder_prenet_dim", c.decoder_prenet_dim},
      {"zoneout", c.zoneout},
      {"dropout", c.dropout},
      {"reduction", c.reduction},
      {"n_mels", c.n_mels},
      {"max_decoder_steps", c.max_decoder_steps},
      {"mel_floor_log", c.mel_floor_log}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.encoder_prenet_dim = j.at("encoder_prenet_dim").get<std::size_t>();
  c.encoder_hidden = j.at("encoder_hidden").get<std::size_t>();
  const auto& cc = j.at("conditioning");
  c.conditioning.enabled = cc.at("enabled").get<bool>();
  c.conditioning.method = cc.at("method").get<std::string>();
  c.conditioning.location = cc.at("location").get<std::string>();
  c.conditioning.wordvec_dim = cc.at("wordvec_dim").get<std::size_t>();
  c.conditioning.attention_dim = cc.at("attention_dim").get<std::size_t>();
  c.attention_mixtures = j.at("attention_mixtures").get<std::size_t>();
  c.attention_rnn_dim = j.at("attention_rnn_dim").get<std::size_t>();
  c.decoder_rnn_dim = j.at("decoder_rnn_dim").get<std::size_t>();
  c.decoder_prenet_dim = j.at("decoder_prenet_dim").get<std::size_t>();
  c.zoneout = j.at("zoneout").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.reduction = j.at("reduction").get<std::size_t>();
  c.n_mels = j.at("n_mels").get<std::size_t>();
  c.max_decoder_steps = j.at("max_decoder_steps").get<std::size_t>();
  c.mel_floor_log = j.at("mel_floor_log").get<double>();
  return c;
}

// hash of the full config; embedded in checkpoints and artifacts
inline std::string model_config_hash(const ModelConfig& c) {
  std::ostringstream ss;
  ss << std::hex << fnv1a(model_config_to_json(c).dump());
  return ss.str();
}

// hash over only the dimensions that fix decoder parameter shapes; a
// pretrained-decoder checkpoint is loadable into any full model agreeing
// on these
inline std::string decoder_shape_hash(const ModelConfig& c) {
  std::ostringstream ss;
  ss << c.memory_dim() << ':' << c.attention_mixtures << ':' << c.attention_rnn_dim << ':'
     << c.decoder_rnn_dim << ':' << c.decoder_prenet_dim << ':' << c.reduction << ':' << c.n_mels;
  std::ostringstream out;
  out << std::hex << fnv1a(ss.str());
  return out.str();
}

namespace model_detail {

inline Tensor zeros_row(std::size_t n) { return Tensor({1, n}); }

inline void add_linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out,
                       Rng& rng) {
  ps.add(prefix + "/w", uniform_init({in, out}, in, rng));
  ps.add(prefix + "/b", Tensor({1, out}));
}

// LSTM weights with gate order [input, forget, cell, output]; forget-gate
// bias starts at 1 to keep early memory open.
inline void add_lstm(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t hidden,
                     Rng& rng) {
  ps.add(prefix + "/wx", uniform_init({in, 4 * hidden}, in, rng));
  ps.add(prefix + "/wh", uniform_init({hidden, 4 * hidden}, hidden, rng));
  Tensor b({1, 4 * hidden});
  for (std::size_t i = hidden; i < 2 * hidden; ++i) (*b.data)[i] = 1.0;
  ps.add(prefix + "/b", b);
}

}  // namespace model_detail

// Fresh parameter set for a config. Initialization is uniform(-k, k) with
// k = 1/sqrt(fan_in); the decoder frame bias starts at the mel-log floor
// so an untrained model predicts silence, and the GMM shift bias starts
// at log(0.5) for a gentle initial advance rate.
inline ParameterSet init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterSet ps;
  Rng rng(derive_seed(seed, "model-init"));
  using model_detail::add_linear;
  using model_detail::add_lstm;

  ps.add("enc/embed", uniform_init({cfg.vocab_size, cfg.embedding_dim}, 1, rng));
  add_linear(ps, "enc/pre1", cfg.encoder_input_dim(), cfg.encoder_prenet_dim, rng);
  add_linear(ps, "enc/pre2", cfg.encoder_prenet_dim, cfg.encoder_prenet_dim, rng);
  add_lstm(ps, "enc/fw", cfg.encoder_prenet_dim, cfg.encoder_hidden, rng);
  add_lstm(ps, "enc/bw", cfg.encoder_prenet_dim, cfg.encoder_hidden, rng);

  if (cfg.conditioning.enabled && cfg.conditioning.method == "attention") {
    std::size_t q_dim = cfg.conditioning.location == "input" ? cfg.embedding_dim
                                                             : 2 * cfg.encoder_hidden;
    ps.add("cond/attn/wq", uniform_init({q_dim, cfg.conditioning.attention_dim}, q_dim, rng));
    ps.add("cond/attn/wm", uniform_init({cfg.conditioning.wordvec_dim, cfg.conditioning.attention_dim},
                                        cfg.conditioning.wordvec_dim, rng));
    ps.add("cond/attn/v", uniform_init({cfg.conditioning.attention_dim, 1},
                                       cfg.conditioning.attention_dim, rng));
  }

  const std::size_t C = cfg.memory_dim();
  const std::size_t rM = cfg.reduction * cfg.n_mels;
  add_linear(ps, "dec/pre1", rM, cfg.decoder_prenet_dim, rng);
  add_linear(ps, "dec/pre2", cfg.decoder_prenet_dim, cfg.decoder_prenet_dim, rng);
  add_lstm(ps, "dec/arnn", cfg.decoder_prenet_dim + C, cfg.attention_rnn_dim, rng);
  add_lstm(ps, "dec/rnn", cfg.attention_rnn_dim + C, cfg.decoder_rnn_dim, rng);
  add_linear(ps, "dec/frame", cfg.decoder_rnn_dim + C, rM, rng);
  add_linear(ps, "dec/stop", cfg.decoder_rnn_dim + C, 1, rng);

  add_linear(ps, "att/gmm", cfg.attention_rnn_dim, 3 * cfg.attention_mixtures, rng);
  {
    // shift logits live in the last K slots of the gmm projection bias
    Tensor& b = ps.at("att/gmm/b");
    for (std::size_t i = 2 * cfg.attention_mixtures; i < 3 * cfg.attention_mixtures; ++i)
      (*b.data)[i] = std::log(0.5);
  }
  {
    Tensor& b = ps.at("dec/frame/b");
    for (auto& v : *b.data) v = cfg.mel_floor_log;
  }
  return ps;
}

// prefixes excluded from updates while pre-training the decoder
inline std::set<std::string> pretrain_freeze_set(const ParameterSet& ps) {
  std::set<std::string> frozen;
  for (const auto& [name, t] : ps.values)
    if (name.rfind("enc/", 0) == 0 || name.rfind("cond/", 0) == 0 || name.rfind("att/", 0) == 0)
      frozen.insert(name);
  return frozen;
}

enum class RunMode { training, inference };

namespace model_detail {

inline Tensor linear(Graph& g, ParameterSet& ps, const std::string& prefix, const Tensor& x) {
  return g.add_row(g.matmul(x, g.param(prefix + "/w", ps.at(prefix + "/w"))),
                   g.param(prefix + "/b", ps.at(prefix + "/b")));
}

// inverted dropout; identity at inference
inline Tensor dropout(Graph& g, const Tensor& x, double p, RunMode mode, Rng& rng) {
  if (mode == RunMode::inference || p <= 0.0) return x;
  Tensor mask(x.shape);
  const double keep = 1.0 - p;
  for (auto& v : *mask.data) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return g.mul(x, g.constant(mask));
}

struct LstmState {
  Tensor h;
  Tensor c;
};

// One zoneout-LSTM step. Training draws Bernoulli keep-masks over hidden
// and cell units (keep = previous state); inference uses the expectation
// h = z*h_prev + (1-z)*h_new.
inline LstmState lstm_step(Graph& g, ParameterSet& ps, const std::string& prefix, const Tensor& x,
                           const LstmState& prev, double zoneout, RunMode mode, Rng& rng) {
  const std::size_t H = prev.h.cols();
  Tensor gates = g.add_row(
      g.add(g.matmul(x, g.param(prefix + "/wx", ps.at(prefix + "/wx"))),
            g.matmul(prev.h, g.param(prefix + "/wh", ps.at(prefix + "/wh")))),
      g.param(prefix + "/b", ps.at(prefix + "/b")));
  Tensor i = g.sigmoid(g.slice_cols(gates, 0, H));
  Tensor f = g.sigmoid(g.slice_cols(gates, H, 2 * H));
  Tensor cand = g.tanh(g.slice_cols(gates, 2 * H, 3 * H));
  Tensor o = g.sigmoid(g.slice_cols(gates, 3 * H, 4 * H));
  Tensor c_new = g.add(g.mul(f, prev.c), g.mul(i, cand));
  Tensor h_new = g.mul(o, g.tanh(c_new));

  if (zoneout <= 0.0) return {h_new, c_new};
  LstmState out;
  if (mode == RunMode::training) {
    Tensor dh({1, H}), dc({1, H});
    for (std::size_t k = 0; k < H; ++k) {
      (*dh.data)[k] = rng.bernoulli(zoneout) ? 1.0 : 0.0;
      (*dc.data)[k] = rng.bernoulli(zoneout) ? 1.0 : 0.0;
    }
    Tensor keep_h = g.constant(dh), keep_c = g.constant(dc);
    Tensor oneh({1, H}, 1.0), onec({1, H}, 1.0);
    Tensor inv_h = g.sub(g.constant(oneh), keep_h);
    Tensor inv_c = g.sub(g.constant(onec), keep_c);
    out.h = g.add(g.mul(keep_h, prev.h), g.mul(inv_h, h_new));
    out.c = g.add(g.mul(keep_c, prev.c), g.mul(inv_c, c_new));
  } else {
    out.h = g.add(g.scale(prev.h, zoneout), g.scale(h_new, 1.0 - zoneout));
    out.c = g.add(g.scale(prev.c, zoneout), g.scale(c_new, 1.0 - zoneout));
  }
  return out;
}

}  // namespace model_detail

// Additive attention head over word vectors: e_k = v^T tanh(Wq q + Wm m_k),
// weights = softmax(e), context = sum_k weights_k m_k.
struct AdditiveAttentionResult {
  Tensor context;  // 1 x D
  Tensor weights;  // 1 x W
};

inline AdditiveAttentionResult additive_attention(Graph& g, ParameterSet& ps, const Tensor& query,
                                                  const Tensor& keys) {
  if (keys.rows() < 1) throw std::runtime_error("additive attention: need at least one key");
  Tensor q_proj = g.matmul(query, g.param("cond/attn/wq", ps.at("cond/attn/wq")));  // 1 x A
  Tensor m_proj = g.matmul(keys, g.param("cond/attn/wm", ps.at("cond/attn/wm")));   // W x A
  Tensor scores = g.matmul(g.tanh(g.add_row(m_proj, q_proj)),
                           g.param("cond/attn/v", ps.at("cond/attn/v")));           // W x 1
  AdditiveAttentionResult res;
  res.weights = g.softmax_rows(g.reshape(scores, {1, keys.rows()}));
  res.context = g.matmul(res.weights, keys);
  return res;
}

// Appends D conditioning columns to per-token features. Concat replicates
// each word's vector across its span and leaves zeros on sil/eos rows;
// the attention method computes a per-row additive-attention context over
// the word vectors. Output is T x (F + D) either way.
inline Tensor condition_features(Graph& g, ParameterSet& ps, const Tensor& features,
                                 const Tensor& word_vectors,
                                 const std::vector<TokenSequence::Span>& spans,
                                 const std::string& method) {
  const std::size_t T = features.rows();
  const std::size_t D = word_vectors.cols();
  if (word_vectors.rows() != spans.size())
    throw std::runtime_error("conditioning: word vector count does not match span count");
  for (const auto& sp : spans)
    if (sp.end > T || sp.start > sp.end)
      throw std::runtime_error("conditioning: span out of bounds");

  if (method == "concat") {
    Tensor append({T, D});
    for (const auto& sp : spans)
      for (std::size_t t = sp.start; t < sp.end; ++t)
        for (std::size_t d = 0; d < D; ++d) append.at(t, d) = word_vectors.at(sp.word_index, d);
    return g.concat_cols({features, g.constant(append)});
  }
  if (method != "attention") throw std::runtime_error("conditioning: unknown method " + method);

  Tensor keys = g.constant(word_vectors);
  std::vector<Tensor> rows;
  rows.reserve(T);
  for (std::size_t t = 0; t < T; ++t)
    rows.push_back(additive_attention(g, ps, g.slice_rows(features, t, t + 1), keys).context);
  return g.concat_cols({features, g.concat_rows(rows)});
}

// Bidirectional-LSTM encoder over a token sequence; word vectors are
// injected at the embedding (input) or at the encoder output (top) when
// conditioning is enabled. Returns T x memory_dim().
inline Tensor encode(Graph& g, ParameterSet& ps, const ModelConfig& cfg, const TokenSequence& seq,
                     const Tensor& word_vectors, RunMode mode, Rng& rng) {
  const std::size_t T = seq.token_ids.size();
  if (T == 0) throw std::runtime_error("encode: empty token sequence");
  std::vector<std::size_t> ids(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (seq.token_ids[t] < 0 || static_cast<std::size_t>(seq.token_ids[t]) >= cfg.vocab_size)
      throw std::runtime_error("encode: token id outside inventory");
    ids[t] = static_cast<std::size_t>(seq.token_ids[t]);
  }
  Tensor x = g.gather_rows(g.param("enc/embed", ps.at("enc/embed")), ids);  // T x E

  const bool cond_in = cfg.conditioning.enabled && cfg.conditioning.location == "input";
  const bool cond_top = cfg.conditioning.enabled && cfg.conditioning.location == "top";
  if (cond_in) x = condition_features(g, ps, x, word_vectors, seq.word_spans, cfg.conditioning.method);

  using model_detail::dropout;
  using model_detail::linear;
  x = dropout(g, g.tanh(linear(g, ps, "enc/pre1", x)), cfg.dropout, mode, rng);
  x = dropout(g, g.tanh(linear(g, ps, "enc/pre2", x)), cfg.dropout, mode, rng);

  const std::size_t H = cfg.encoder_hidden;
  std::vector<Tensor> fw(T), bw(T);
  model_detail::LstmState sf{model_detail::zeros_row(H), model_detail::zeros_row(H)};
  for (std::size_t t = 0; t < T; ++t) {
    sf = model_detail::lstm_step(g, ps, "enc/fw", g.slice_rows(x, t, t + 1), sf, 0.0, mode, rng);
    fw[t] = sf.h;
  }
  model_detail::LstmState sb{model_detail::zeros_row(H), model_detail::zeros_row(H)};
  for (std::size_t tt = T; tt-- > 0;) {
    sb = model_detail::lstm_step(g, ps, "enc/bw", g.slice_rows(x, tt, tt + 1), sb, 0.0, mode, rng);
    bw[tt] = sb.h;
  }
  std::vector<Tensor> rows(T);
  for (std::size_t t = 0; t < T; ++t) rows[t] = g.concat_cols({fw[t], bw[t]});
  Tensor out = g.concat_rows(rows);

  if (cond_top)
    out = condition_features(g, ps, out, word_vectors, seq.word_spans, cfg.conditioning.method);
  return out;
}

struct GmmAttentionResult {
  Tensor context;  // 1 x memory_dim
  Tensor weights;  // 1 x T, unnormalized mixture weights
  Tensor kappa;    // 1 x K, advanced means
};

// Mixture-of-Gaussians attention step: alpha = exp(a), beta = exp(b),
// kappa' = kappa + exp(k), weight(u) = sum_i alpha_i exp(-beta_i (kappa'_i - u)^2).
inline GmmAttentionResult gmm_attention_step(Graph& g, ParameterSet& ps, const Tensor& kappa,
                                             const Tensor& rnn_out, const Tensor& memory,
                                             std::size_t K) {
  const std::size_t T = memory.rows();
  if (T == 0) throw std::runtime_error("gmm attention: empty memory");
  Tensor raw = model_detail::linear(g, ps, "att/gmm", rnn_out);  // 1 x 3K
  Tensor alpha = g.exp(g.slice_cols(raw, 0, K));
  Tensor beta = g.exp(g.slice_cols(raw, K, 2 * K));
  Tensor shift = g.exp(g.slice_cols(raw, 2 * K, 3 * K));
  Tensor kappa_new = g.add(kappa, shift);  // 1 x K

  Tensor positions({1, T});
  for (std::size_t u = 0; u < T; ++u) positions.at(0, u) = static_cast<double>(u);
  // diff[i][u] = kappa_i - u
  Tensor diff = g.add_col(g.scale(g.add_row(g.constant(Tensor({K, T})), g.constant(positions)), -1.0),
                          g.reshape(kappa_new, {K, 1}));
  Tensor quad = g.mul_col(g.mul(diff, diff), g.reshape(beta, {K, 1}));
  Tensor comp = g.mul_col(g.exp(g.scale(quad, -1.0)), g.reshape(alpha, {K, 1}));  // K x T
  Tensor phi = g.matmul(g.constant(Tensor({1, K}, 1.0)), comp);                   // 1 x T

  GmmAttentionResult res;
  res.weights = phi;
  res.context = g.matmul(phi, memory);
  res.kappa = kappa_new;
  return res;
}

struct DecoderState {
  model_detail::LstmState arnn;
  model_detail::LstmState rnn;
  Tensor kappa;       // 1 x K
  Tensor context;     // 1 x memory_dim
  Tensor prev_frame;  // 1 x r*M, previous frame group
};

inline DecoderState initial_decoder_state(Graph&, const ModelConfig& cfg) {
  using model_detail::zeros_row;
  DecoderState st;
  st.arnn = {zeros_row(cfg.attention_rnn_dim), zeros_row(cfg.attention_rnn_dim)};
  st.rnn = {zeros_row(cfg.decoder_rnn_dim), zeros_row(cfg.decoder_rnn_dim)};
  st.kappa = zeros_row(cfg.attention_mixtures);
  st.context = zeros_row(cfg.memory_dim());
  st.prev_frame = zeros_row(cfg.reduction * cfg.n_mels);
  return st;
}

struct DecoderStepResult {
  Tensor frames;      // 1 x r*M
  Tensor stop_logit;  // 1 x 1
  Tensor weights;     // 1 x T (all-zero when the context is zeroed)
  DecoderState state;
};

// One autoregressive step: prenet on the previous frame group, attention
// LSTM, GMM attention, decoder LSTM, frame/stop projections. With
// `zero_context` the attention is skipped entirely — the context stays an
// all-zero vector and kappa does not advance (decoder pre-training).
inline DecoderStepResult decoder_step(Graph& g, ParameterSet& ps, const ModelConfig& cfg,
                                      const DecoderState& st, const Tensor& memory,
                                      bool zero_context, RunMode mode, Rng& rng) {
  using model_detail::dropout;
  using model_detail::linear;
  using model_detail::lstm_step;
  using model_detail::zeros_row;

  Tensor x = dropout(g, g.tanh(linear(g, ps, "dec/pre1", st.prev_frame)), cfg.dropout, mode, rng);
  x = dropout(g, g.tanh(linear(g, ps, "dec/pre2", x)), cfg.dropout, mode, rng);

  DecoderStepResult res;
  res.state = st;
  res.state.arnn = lstm_step(g, ps, "dec/arnn", g.concat_cols({x, st.context}), st.arnn,
                             cfg.zoneout, mode, rng);

  Tensor context;
  if (zero_context) {
    context = g.constant(zeros_row(cfg.memory_dim()));
    res.weights = zeros_row(memory.rows() > 0 ? memory.rows() : 1);
  } else {
    auto att = gmm_attention_step(g, ps, res.state.kappa, res.state.arnn.h, memory,
                                  cfg.attention_mixtures);
    context = att.context;
    res.weights = att.weights;
    res.state.kappa = att.kappa;
  }
  res.state.context = context;

  res.state.rnn = lstm_step(g, ps, "dec/rnn", g.concat_cols({res.state.arnn.h, context}), st.rnn,
                            cfg.zoneout, mode, rng);
  Tensor proj_in = g.concat_cols({res.state.rnn.h, context});
  res.frames = linear(g, ps, "dec/frame", proj_in);
  res.stop_logit = linear(g, ps, "dec/stop", proj_in);
  res.state.prev_frame = res.frames;
  return res;
}

enum class ForwardMode { paired, pretrain };

struct TeacherForcedResult {
  Tensor mel;          // T' x M predicted frames (T' = target length)
  Tensor stop_logits;  // steps x 1
  std::vector<Tensor> alignments;  // per-step 1 x T weights (paired mode)
};

// Teacher-forced pass over one utterance: step t consumes ground-truth
// frame group t-1 (group -1 is the all-zero go frame). Pretrain mode runs
// with zero context and never touches the encoder; paired mode attends
// over `memory`.
inline TeacherForcedResult forward_teacher_forced(Graph& g, ParameterSet& ps, const ModelConfig& cfg,
                                                  const Tensor& memory, const Tensor& mel_target,
                                                  ForwardMode fmode, RunMode mode, Rng& rng) {
  const std::size_t r = cfg.reduction, M = cfg.n_mels;
  if (mel_target.cols() != M) throw std::runtime_error("teacher forcing: mel width mismatch");
  if (mel_target.rows() == 0 || mel_target.rows() % r != 0)
    throw std::runtime_error("teacher forcing: target length must be a positive multiple of r");
  const std::size_t steps = mel_target.rows() / r;
  const bool zero_context = fmode == ForwardMode::pretrain;
  if (!zero_context && memory.rows() == 0)
    throw std::runtime_error("teacher forcing: paired mode needs encoder memory");

  DecoderState st = initial_decoder_state(g, cfg);
  Tensor target = g.constant(mel_target);
  std::vector<Tensor> frame_rows, stop_rows;
  TeacherForcedResult out;
  for (std::size_t t = 0; t < steps; ++t) {
    if (t > 0)
      st.prev_frame = g.reshape(g.slice_rows(target, (t - 1) * r, t * r), {1, r * M});
    DecoderStepResult step = decoder_step(g, ps, cfg, st, memory, zero_context, mode, rng);
    st = step.state;
    frame_rows.push_back(g.reshape(step.frames, {r, M}));
    stop_rows.push_back(step.stop_logit);
    if (!zero_context) out.alignments.push_back(step.weights);
  }
  out.mel = g.concat_rows(frame_rows);
  out.stop_logits = g.concat_rows(stop_rows);
  return out;
}

struct SynthesisResult {
  Tensor mel;        // frames x M
  Tensor alignment;  // steps x T attention weights
  bool truncated = false;  // hit max_decoder_steps without a stop signal
};

// Autoregressive inference: feeds back its own predictions, stops when
// sigmoid(stop) > 0.5 or after max_steps (flagged as truncated).
inline SynthesisResult synthesize_mel(ParameterSet& ps, const ModelConfig& cfg,
                                      const TokenSequence& seq, const Tensor& word_vectors,
                                      std::uint64_t seed) {
  Graph g;
  Rng rng(derive_seed(seed, "synthesize"));
  Tensor memory = encode(g, ps, cfg, seq, word_vectors, RunMode::inference, rng);
  const std::size_t T = memory.rows();

  DecoderState st = initial_decoder_state(g, cfg);
  std::vector<Tensor> frames, weights;
  SynthesisResult res;
  res.truncated = true;
  for (std::size_t t = 0; t < cfg.max_decoder_steps; ++t) {
    DecoderStepResult step = decoder_step(g, ps, cfg, st, memory, false, RunMode::inference, rng);
    st = step.state;
    frames.push_back(step.frames);
    weights.push_back(step.weights);
    if (detail::stable_sigmoid(step.stop_logit.item()) > 0.5) {
      res.truncated = false;
      break;
    }
  }
  const std::size_t steps = frames.size();
  res.mel = Tensor({steps * cfg.reduction, cfg.n_mels});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < cfg.reduction * cfg.n_mels; ++i)
      (*res.mel.data)[t * cfg.reduction * cfg.n_mels + i] = (*frames[t].data)[i];
  res.alignment = Tensor({steps, T});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t u = 0; u < T; ++u) res.alignment.at(t, u) = weights[t].at(0, u);
  return res;
}

}  // namespace semitts
