#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace semitts {

// reserved token ids shared by every inventory
inline constexpr int kPadId = 0;
inline constexpr int kSilId = 1;
inline constexpr int kEosId = 2;
inline constexpr const char* kReservedNames[3] = {"pad", "sil", "eos"};

struct Lexicon {
  std::vector<std::string> phonemes;              // id → name; [0..2] reserved
  std::map<std::string, int> phoneme_ids;         // name → id
  std::map<std::string, std::vector<int>> words;  // normalized word → phoneme ids

  int id_of(const std::string& name) const {
    auto it = phoneme_ids.find(name);
    return it == phoneme_ids.end() ? -1 : it->second;
  }
  std::size_t inventory_size() const { return phonemes.size(); }
};

// Lowercases ASCII, keeps [a-z0-9] runs as words, treats everything else
// (punctuation, whitespace, non-ASCII bytes) as separators.
inline std::vector<std::string> normalize_text(const std::string& raw) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : raw) {
    char lc = static_cast<char>(std::tolower(c));
    if ((lc >= 'a' && lc <= 'z') || (lc >= '0' && lc <= '9')) {
      cur.push_back(lc);
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

namespace detail {

inline void index_inventory(Lexicon& lex) {
  lex.phoneme_ids.clear();
  for (std::size_t i = 0; i < lex.phonemes.size(); ++i) {
    if (lex.phoneme_ids.count(lex.phonemes[i]))
      throw std::runtime_error("lexicon: duplicate phoneme name " + lex.phonemes[i]);
    lex.phoneme_ids.emplace(lex.phonemes[i], static_cast<int>(i));
  }
}

}  // namespace detail

// Builds a lexicon from the JSON form
//   {"phonemes": ["th","a",...], "words": {"thank": ["th","a","ng","k"], ...}}
// The reserved tokens pad/sil/eos are prepended unless the inventory
// already starts with exactly those three.
inline Lexicon lexicon_from_json(const nlohmann::json& j) {
  Lexicon lex;
  if (!j.contains("phonemes") || !j.contains("words"))
    throw std::runtime_error("lexicon: need top-level \"phonemes\" and \"words\"");
  std::vector<std::string> inv;
  for (const auto& p : j.at("phonemes")) inv.push_back(p.get<std::string>());
  bool has_reserved = inv.size() >= 3 && inv[0] == kReservedNames[0] &&
                      inv[1] == kReservedNames[1] && inv[2] == kReservedNames[2];
  if (!has_reserved) {
    for (const auto& name : inv)
      for (const auto* r : kReservedNames)
        if (name == r) throw std::runtime_error("lexicon: reserved name " + name + " misplaced in inventory");
    lex.phonemes = {kReservedNames[0], kReservedNames[1], kReservedNames[2]};
  }
  lex.phonemes.insert(lex.phonemes.end(), inv.begin(), inv.end());
  detail::index_inventory(lex);

  for (const auto& [word, pron] : j.at("words").items()) {
    auto norm = normalize_text(word);
    if (norm.size() != 1 || norm[0] != word)
      throw std::runtime_error("lexicon: word key not normalized: " + word);
    std::vector<int> ids;
    for (const auto& p : pron) {
      int id = lex.id_of(p.get<std::string>());
      if (id < 0) throw std::runtime_error("lexicon: unknown phoneme " + p.get<std::string>() +
                                           " in word " + word);
      if (id < 3) throw std::runtime_error("lexicon: reserved token in pronunciation of " + word);
      ids.push_back(id);
    }
    if (ids.empty()) throw std::runtime_error("lexicon: empty pronunciation for " + word);
    lex.words.emplace(word, std::move(ids));
  }
  return lex;
}

inline Lexicon load_lexicon(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("lexicon: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw std::runtime_error("lexicon: " + path + " is not valid JSON: " + e.what());
  }
  return lexicon_from_json(j);
}

inline void save_lexicon(const std::string& path, const Lexicon& lex) {
  nlohmann::json j;
  j["phonemes"] = lex.phonemes;
  nlohmann::json w = nlohmann::json::object();
  for (const auto& [word, ids] : lex.words) {
    std::vector<std::string> names;
    for (int id : ids) names.push_back(lex.phonemes.at(static_cast<std::size_t>(id)));
    w[word] = names;
  }
  j["words"] = w;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("lexicon: cannot write " + path);
  f << j.dump(2) << "\n";
}

// Inventory for character-mode tokenization: reserved + [a-z0-9].
inline Lexicon character_lexicon() {
  Lexicon lex;
  lex.phonemes = {kReservedNames[0], kReservedNames[1], kReservedNames[2]};
  for (char c = 'a'; c <= 'z'; ++c) lex.phonemes.emplace_back(1, c);
  for (char c = '0'; c <= '9'; ++c) lex.phonemes.emplace_back(1, c);
  detail::index_inventory(lex);
  return lex;
}

enum class TokenMode { phoneme, character };

struct TokenSequence {
  struct Span {
    std::size_t word_index;
    std::size_t start;
    std::size_t end;  // exclusive
    bool operator==(const Span&) const = default;
  };
  std::vector<int> token_ids;
  std::vector<Span> word_spans;
  std::vector<std::string> words;
};

namespace detail {

inline std::vector<int> spell_word(const std::string& word, const Lexicon& lex) {
  std::vector<int> ids;
  for (char c : word) {
    int id = lex.id_of(std::string(1, c));
    if (id < 0)
      throw std::runtime_error("tokenize: no token for character '" + std::string(1, c) +
                               "' of word " + word);
    ids.push_back(id);
  }
  if (ids.empty()) throw std::runtime_error("tokenize: empty word");
  return ids;
}

}  // namespace detail

// Token layout: word tokens with a single sil between consecutive words
// and one trailing eos. Spans cover each word's own tokens exactly.
// Phoneme-mode OOV words are spelled as characters when `oov_fallback` is
// set, otherwise rejected by name.
inline TokenSequence tokenize(const std::vector<std::string>& words, const Lexicon& lex,
                              TokenMode mode, bool oov_fallback = true) {
  TokenSequence seq;
  seq.words = words;
  for (std::size_t wi = 0; wi < words.size(); ++wi) {
    if (wi > 0) seq.token_ids.push_back(kSilId);
    std::vector<int> ids;
    if (mode == TokenMode::character) {
      ids = detail::spell_word(words[wi], lex);
    } else {
      auto it = lex.words.find(words[wi]);
      if (it != lex.words.end()) {
        ids = it->second;
      } else if (oov_fallback) {
        ids = detail::spell_word(words[wi], lex);
      } else {
        throw std::runtime_error("tokenize: word not in lexicon: " + words[wi]);
      }
    }
    std::size_t start = seq.token_ids.size();
    seq.token_ids.insert(seq.token_ids.end(), ids.begin(), ids.end());
    seq.word_spans.push_back({wi, start, seq.token_ids.size()});
  }
  seq.token_ids.push_back(kEosId);
  return seq;
}

}  // namespace semitts
