#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace semitts {

struct ManifestEntry {
  std::string id;
  std::string audio_path;
  std::optional<std::string> text;  // absent on unpaired entries
  double duration_seconds = 0.0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  bool all_paired() const {
    for (const auto& e : entries)
      if (!e.text) return false;
    return true;
  }
  bool all_unpaired() const {
    for (const auto& e : entries)
      if (e.text) return false;
    return true;
  }
  double total_duration() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.duration_seconds;
    return s;
  }
};

inline void validate_manifest(const Manifest& m) {
  std::set<std::string> ids;
  for (const auto& e : m.entries) {
    if (e.id.empty()) throw std::runtime_error("manifest: empty utterance id");
    if (!ids.insert(e.id).second) throw std::runtime_error("manifest: duplicate id " + e.id);
    if (e.audio_path.empty()) throw std::runtime_error("manifest: entry " + e.id + " has no audio path");
    if (!(e.duration_seconds > 0.0))
      throw std::runtime_error("manifest: entry " + e.id + " has non-positive duration");
  }
}

// one JSON object per line; unpaired entries simply omit the text key
inline void save_manifest(const std::string& path, const Manifest& m) {
  validate_manifest(m);
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("manifest: cannot write " + tmp);
    for (const auto& e : m.entries) {
      nlohmann::json j{{"id", e.id},
                       {"audio_path", e.audio_path},
                       {"duration_seconds", e.duration_seconds}};
      if (e.text) j["text"] = *e.text;
      out << j.dump() << "\n";
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("manifest: cannot rename " + tmp);
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("manifest: cannot open " + path);
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest: line " + std::to_string(lineno) + ": " + e.what());
    }
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.audio_path = j.at("audio_path").get<std::string>();
    e.duration_seconds = j.at("duration_seconds").get<double>();
    if (j.contains("text")) e.text = j.at("text").get<std::string>();
    m.entries.push_back(std::move(e));
  }
  validate_manifest(m);
  return m;
}

}  // namespace semitts
