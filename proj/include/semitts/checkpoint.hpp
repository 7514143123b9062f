#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "semitts/optim.hpp"
#include "semitts/tensor.hpp"

namespace semitts {

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'M', 'T', 'T', 'S', '0', '\n'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Serializable training snapshot: model config, parameters, optional
// optimizer state, step counter and RNG state. `meta` carries free-form
// string metadata (tags, hashes, cached eval numbers).
struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  std::string config_json;  // model configuration snapshot (JSON text)
  ParameterSet params;
  bool has_adam = false;
  AdamState adam;
  long long train_step = 0;
  std::string rng_state;
  std::map<std::string, std::string> meta;
};

namespace detail {

inline const std::uint32_t* crc32_table() {
  static std::uint32_t table[256];
  static bool init = [] {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    return true;
  }();
  (void)init;
  return table;
}

inline std::uint32_t crc32(const std::string& buf) {
  const std::uint32_t* t = crc32_table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (unsigned char ch : buf) c = t[(c ^ ch) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// Little-endian primitive writers into a growing byte string.
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline void put_tensor_block(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) put_u64(out, d);
  for (double v : *t.data) put_f64(out, v);
}

inline std::pair<std::string, Tensor> read_tensor_block(ByteReader& r) {
  std::uint32_t name_len = r.u32();
  std::string name = r.bytes(name_len);
  std::uint32_t ndim = r.u32();
  std::vector<std::size_t> shape(ndim);
  for (auto& d : shape) d = r.u64();
  Tensor t(shape);
  for (auto& v : *t.data) v = r.f64();
  return {std::move(name), std::move(t)};
}

}  // namespace detail

// Binary layout (little-endian): magic, version, header-JSON length +
// bytes, tensor block count, blocks (name, ndim, dims, float64 payload),
// trailing CRC32 over everything before it. Tensor blocks are emitted in
// map order so save→load→save is byte-identical.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["config"] = ck.config_json;
  header["train_step"] = ck.train_step;
  header["rng_state"] = ck.rng_state;
  header["meta"] = ck.meta;
  header["freeze"] = std::vector<std::string>(ck.params.freeze_mask.begin(), ck.params.freeze_mask.end());
  header["has_adam"] = ck.has_adam;
  if (ck.has_adam) {
    header["adam"] = {{"lr", ck.adam.lr},
                      {"beta1", ck.adam.beta1},
                      {"beta2", ck.adam.beta2},
                      {"eps", ck.adam.eps},
                      {"step", ck.adam.step}};
  }
  std::string hdr = header.dump();

  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, ck.format_version);
  detail::put_u64(out, hdr.size());
  out.append(hdr);

  std::uint64_t blocks = ck.params.values.size();
  if (ck.has_adam) blocks += ck.adam.m.size() + ck.adam.v.size();
  detail::put_u64(out, blocks);
  for (const auto& [name, t] : ck.params.values) detail::put_tensor_block(out, "p/" + name, t);
  if (ck.has_adam) {
    for (const auto& [name, t] : ck.adam.m) detail::put_tensor_block(out, "m/" + name, t);
    for (const auto& [name, t] : ck.adam.v) detail::put_tensor_block(out, "v/" + name, t);
  }
  detail::put_u32(out, detail::crc32(out));

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: cannot move " + tmp + " into place");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();

  if (buf.size() < sizeof(kCheckpointMagic) + 4 + 4)
    throw std::runtime_error("checkpoint: truncated file");
  if (std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic, not a checkpoint file");

  // integrity first so corruption is reported as such, version second
  std::uint32_t stored_crc = 0;
  {
    detail::ByteReader tail(buf);
    tail.pos = buf.size() - 4;
    stored_crc = tail.u32();
  }
  std::string body = buf.substr(0, buf.size() - 4);
  if (detail::crc32(body) != stored_crc)
    throw std::runtime_error("checkpoint: checksum mismatch, file corrupt or truncated");

  detail::ByteReader r(body);
  r.pos = sizeof(kCheckpointMagic);
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  std::uint64_t hdr_len = r.u64();
  nlohmann::json header = nlohmann::json::parse(r.bytes(hdr_len));

  Checkpoint ck;
  ck.format_version = version;
  ck.config_json = header.at("config").get<std::string>();
  ck.train_step = header.at("train_step").get<long long>();
  ck.rng_state = header.at("rng_state").get<std::string>();
  ck.meta = header.at("meta").get<std::map<std::string, std::string>>();
  for (const auto& n : header.at("freeze")) ck.params.freeze_mask.insert(n.get<std::string>());
  ck.has_adam = header.at("has_adam").get<bool>();
  if (ck.has_adam) {
    const auto& a = header.at("adam");
    ck.adam.lr = a.at("lr").get<double>();
    ck.adam.beta1 = a.at("beta1").get<double>();
    ck.adam.beta2 = a.at("beta2").get<double>();
    ck.adam.eps = a.at("eps").get<double>();
    ck.adam.step = a.at("step").get<long long>();
  }

  std::uint64_t blocks = r.u64();
  for (std::uint64_t i = 0; i < blocks; ++i) {
    auto [name, t] = detail::read_tensor_block(r);
    if (name.size() < 2 || name[1] != '/')
      throw std::runtime_error("checkpoint: malformed tensor block name " + name);
    std::string base = name.substr(2);
    switch (name[0]) {
      case 'p':
        t.requires_grad = true;
        ck.params.values.emplace(base, std::move(t));
        break;
      case 'm':
        ck.adam.m.emplace(base, std::move(t));
        break;
      case 'v':
        ck.adam.v.emplace(base, std::move(t));
        break;
      default:
        throw std::runtime_error("checkpoint: unknown tensor block kind in " + name);
    }
  }
  if (r.pos != body.size()) throw std::runtime_error("checkpoint: trailing bytes after blocks");
  return ck;
}

}  // namespace semitts
