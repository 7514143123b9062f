#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semitts/rng.hpp"
#include "semitts/tensor.hpp"
#include "semitts/text.hpp"

namespace semitts {

struct WordVectorTable {
  std::size_t dim = 0;
  std::map<std::string, std::vector<double>> vectors;
  std::string source;     // provenance label
  std::string corpus_id;  // training corpus label
  std::size_t duplicate_warnings = 0;  // duplicate lines seen on load
};

struct LookupResult {
  std::vector<double> vec;
  bool oov = false;
};

// OOV resolves to a zero vector (the "no external knowledge" neutral
// element) with the flag set, never an error. Lookup is case-normalized
// the same way the text frontend normalizes words.
inline LookupResult lookup(const WordVectorTable& table, const std::string& word) {
  auto norm = normalize_text(word);
  LookupResult r;
  if (norm.size() == 1) {
    auto it = table.vectors.find(norm[0]);
    if (it != table.vectors.end()) {
      r.vec = it->second;
      return r;
    }
  }
  r.vec.assign(table.dim, 0.0);
  r.oov = true;
  return r;
}

// Text format, one entry per line: word then D floats, whitespace
// separated. D is inferred from the first entry; later lines that
// disagree are parse errors naming the line.
inline WordVectorTable load_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("word vectors: cannot open " + path);
  WordVectorTable table;
  table.source = path;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string word;
    if (!(ss >> word)) continue;  // blank line
    std::vector<double> vec;
    double v;
    while (ss >> v) vec.push_back(v);
    if (!ss.eof())
      throw std::runtime_error("word vectors: line " + std::to_string(lineno) +
                               ": non-numeric value in " + path);
    if (vec.empty())
      throw std::runtime_error("word vectors: line " + std::to_string(lineno) +
                               ": no values in " + path);
    for (double x : vec)
      if (!std::isfinite(x))
        throw std::runtime_error("word vectors: line " + std::to_string(lineno) +
                                 ": non-finite value in " + path);
    if (table.dim == 0) {
      table.dim = vec.size();
    } else if (vec.size() != table.dim) {
      throw std::runtime_error("word vectors: line " + std::to_string(lineno) + ": expected " +
                               std::to_string(table.dim) + " values, got " +
                               std::to_string(vec.size()) + " in " + path);
    }
    auto norm = normalize_text(word);
    std::string key = norm.size() == 1 ? norm[0] : word;
    auto [it, inserted] = table.vectors.insert_or_assign(key, std::move(vec));
    (void)it;
    if (!inserted) ++table.duplicate_warnings;
  }
  return table;
}

inline void save_table(const std::string& path, const WordVectorTable& table) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("word vectors: cannot write " + path);
  f.precision(17);
  for (const auto& [word, vec] : table.vectors) {
    f << word;
    for (double v : vec) f << ' ' << v;
    f << '\n';
  }
}

struct SkipgramResult {
  WordVectorTable table;
  std::vector<double> epoch_losses;  // per-epoch mean negative-sampling loss
};

// Skip-gram with negative sampling (k = 5), fixed symmetric window,
// unigram^0.75 negative distribution, plain SGD. Output vectors are the
// input embeddings scaled to unit norm. Fully deterministic given seed.
inline SkipgramResult train_skipgram(const std::vector<std::string>& corpus, std::size_t dim,
                                     std::size_t window, std::size_t epochs, std::uint64_t seed,
                                     double lr = 0.05) {
  if (dim == 0) throw std::runtime_error("skipgram: dimension must be positive");
  if (window == 0) throw std::runtime_error("skipgram: window must be positive");

  // vocabulary in first-appearance order for stable ids
  std::map<std::string, std::size_t> vocab;
  std::vector<std::string> id_to_word;
  std::vector<std::size_t> tokens;
  tokens.reserve(corpus.size());
  for (const auto& w : corpus) {
    auto it = vocab.find(w);
    if (it == vocab.end()) {
      it = vocab.emplace(w, id_to_word.size()).first;
      id_to_word.push_back(w);
    }
    tokens.push_back(it->second);
  }
  const std::size_t V = id_to_word.size();
  if (V < 2) throw std::runtime_error("skipgram: need a vocabulary of at least 2 words");

  // unigram^0.75 sampling table (cumulative)
  std::vector<double> counts(V, 0.0);
  for (auto t : tokens) counts[t] += 1.0;
  std::vector<double> cum(V);
  double total = 0.0;
  for (std::size_t i = 0; i < V; ++i) {
    total += std::pow(counts[i], 0.75);
    cum[i] = total;
  }
  auto sample_negative = [&](Rng& rng) {
    double u = rng.uniform01() * total;
    return static_cast<std::size_t>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
  };

  Rng rng(derive_seed(seed, "skipgram"));
  std::vector<double> in(V * dim), out(V * dim, 0.0);
  const double k0 = 0.5 / static_cast<double>(dim);
  for (auto& v : in) v = rng.uniform(-k0, k0);

  constexpr std::size_t kNegatives = 5;
  SkipgramResult res;
  std::vector<double> grad_in(dim);
  auto sigmoid = [](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  };

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::size_t center = tokens[i];
      double* vc = in.data() + center * dim;
      const std::size_t lo = i >= window ? i - window : 0;
      const std::size_t hi = std::min(tokens.size() - 1, i + window);
      for (std::size_t j = lo; j <= hi; ++j) {
        if (j == i) continue;
        std::fill(grad_in.begin(), grad_in.end(), 0.0);
        // one positive and k negatives per context position
        for (std::size_t neg = 0; neg <= kNegatives; ++neg) {
          std::size_t target;
          double label;
          if (neg == 0) {
            target = tokens[j];
            label = 1.0;
          } else {
            target = sample_negative(rng);
            if (target == tokens[j]) continue;
            label = 0.0;
          }
          double* uo = out.data() + target * dim;
          double dot = 0.0;
          for (std::size_t d = 0; d < dim; ++d) dot += vc[d] * uo[d];
          double p = sigmoid(dot);
          loss_sum += label > 0.5 ? -std::log(std::max(p, 1e-12))
                                  : -std::log(std::max(1.0 - p, 1e-12));
          ++loss_n;
          double g = (p - label) * lr;
          for (std::size_t d = 0; d < dim; ++d) {
            grad_in[d] += g * uo[d];
            uo[d] -= g * vc[d];
          }
        }
        for (std::size_t d = 0; d < dim; ++d) vc[d] -= grad_in[d];
      }
    }
    res.epoch_losses.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);
  }

  res.table.dim = dim;
  res.table.source = "skipgram";
  for (std::size_t w = 0; w < V; ++w) {
    std::vector<double> v(in.begin() + static_cast<long>(w * dim),
                          in.begin() + static_cast<long>((w + 1) * dim));
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& x : v) x /= norm;
    res.table.vectors.emplace(id_to_word[w], std::move(v));
  }
  return res;
}

// word-vector rows for a token sequence; OOV words resolve to zeros, a
// null table yields an all-zero block of the requested width
inline Tensor word_vector_rows(const TokenSequence& seq, const WordVectorTable* table,
                               std::size_t dim) {
  Tensor wv({seq.words.size(), dim});
  if (!table) return wv;
  if (table->dim != dim) throw std::runtime_error("word vectors: table width does not match config");
  for (std::size_t w = 0; w < seq.words.size(); ++w) {
    auto res = lookup(*table, seq.words[w]);
    for (std::size_t d = 0; d < dim; ++d) wv.at(w, d) = res.vec[d];
  }
  return wv;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::runtime_error("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

}  // namespace semitts
