#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace semitts {

struct Waveform {
  std::vector<double> samples;  // nominal range [-1, 1]
  int sample_rate = 16000;

  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

namespace detail {

inline void wav_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFFu));
  out.push_back(static_cast<char>((v >> 8) & 0xFFu));
}
inline void wav_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline std::uint16_t wav_read_u16(const std::string& b, std::size_t p) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[p]) |
                                    (static_cast<unsigned char>(b[p + 1]) << 8));
}
inline std::uint32_t wav_read_u32(const std::string& b, std::size_t p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[p + i])) << (8 * i);
  return v;
}

}  // namespace detail

// Writes PCM16 mono little-endian RIFF. Out-of-range samples are clamped;
// the number of clamped samples is returned so callers can report clipping
// rather than have it vanish silently.
inline std::size_t save_wav(const std::string& path, const Waveform& w) {
  if (w.sample_rate <= 0) throw std::runtime_error("wav: sample_rate must be positive");
  std::size_t clipped = 0;
  std::string pcm;
  pcm.reserve(w.samples.size() * 2);
  for (double s : w.samples) {
    double v = s;
    if (v > 1.0 || v < -1.0) {
      ++clipped;
      v = std::clamp(v, -1.0, 1.0);
    }
    auto q = static_cast<std::int16_t>(std::lround(v * 32767.0));
    detail::wav_u16(pcm, static_cast<std::uint16_t>(q));
  }

  std::string out;
  out.append("RIFF");
  detail::wav_u32(out, static_cast<std::uint32_t>(36 + pcm.size()));
  out.append("WAVE");
  out.append("fmt ");
  detail::wav_u32(out, 16);
  detail::wav_u16(out, 1);  // PCM
  detail::wav_u16(out, 1);  // mono
  detail::wav_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  detail::wav_u32(out, static_cast<std::uint32_t>(w.sample_rate * 2));  // byte rate
  detail::wav_u16(out, 2);   // block align
  detail::wav_u16(out, 16);  // bits per sample
  out.append("data");
  detail::wav_u32(out, static_cast<std::uint32_t>(pcm.size()));
  out.append(pcm);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("wav: cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("wav: write failed for " + path);
  return clipped;
}

inline Waveform load_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("wav: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string b = ss.str();

  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0)
    throw std::runtime_error("wav: " + path + " is not a RIFF/WAVE file");

  // walk chunks; fmt must precede data
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, codec = 0;
  std::uint32_t rate = 0;
  Waveform w;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    std::string id = b.substr(pos, 4);
    std::uint32_t len = detail::wav_read_u32(b, pos + 4);
    std::size_t body = pos + 8;
    if (body + len > b.size()) throw std::runtime_error("wav: truncated chunk in " + path);
    if (id == "fmt ") {
      if (len < 16) throw std::runtime_error("wav: malformed fmt chunk in " + path);
      codec = detail::wav_read_u16(b, body);
      channels = detail::wav_read_u16(b, body + 2);
      rate = detail::wav_read_u32(b, body + 4);
      bits = detail::wav_read_u16(b, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw std::runtime_error("wav: data chunk before fmt in " + path);
      if (codec != 1) throw std::runtime_error("wav: only PCM supported, got codec " + std::to_string(codec));
      if (channels != 1) throw std::runtime_error("wav: only mono supported, got " + std::to_string(channels) + " channels");
      if (bits != 16) throw std::runtime_error("wav: only 16-bit supported, got " + std::to_string(bits));
      w.sample_rate = static_cast<int>(rate);
      std::size_t n = len / 2;
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto q = static_cast<std::int16_t>(detail::wav_read_u16(b, body + 2 * i));
        w.samples[i] = static_cast<double>(q) / 32767.0;
      }
      return w;
    }
    pos = body + len + (len & 1u);  // chunks are word-aligned
  }
  throw std::runtime_error("wav: no data chunk found in " + path);
}

}  // namespace semitts
