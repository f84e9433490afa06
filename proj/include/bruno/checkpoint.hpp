#pragma once

// Versioned binary checkpoints: little-endian, length-prefixed sections,
// trailing CRC32. Round trips are bit-exact for matching scalar width.
//
// layout: magic(8) | version u32 | dtype u8 | sections | crc32 u32
// sections, each u64 length-prefixed:
//   1 model hyperparameters (key=value text)
//   2 flow parameters       3 raw process parameters
//   4 optimizer state       5 rng state (4 x u64)     6 iteration (u64)

#include <array>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "bruno/config.hpp"
#include "bruno/crc32.hpp"
#include "bruno/errors.hpp"
#include "bruno/model.hpp"

namespace bruno {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'B', 'R', 'U', 'N', 'O', 'C', 'K', 'P'};

template <typename S>
struct Checkpoint {
  BrunoModel<S> model;
  std::vector<double> optimizer_state;  // flattened RMSProp accumulators, may be empty
  std::array<std::uint64_t, 4> rng_state{};
  std::uint64_t iteration = 0;
};

namespace ckpt_detail {

struct Writer {
  std::vector<std::uint8_t> bytes;
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void section(const std::vector<std::uint8_t>& payload) {
    u64(payload.size());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
  }
};

struct Reader {
  const std::uint8_t* p;
  std::size_t n, pos = 0;
  void need(std::size_t k) const {
    if (pos + k > n) throw CorruptFile("checkpoint: truncated");
  }
  void raw(void* out, std::size_t k) {
    need(k);
    std::memcpy(out, p + pos, k);
    pos += k;
  }
  std::uint8_t u8() {
    need(1);
    return p[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + std::size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + std::size_t(i)]) << (8 * i);
    pos += 8;
    return v;
  }
  std::vector<std::uint8_t> section() {
    const std::uint64_t len = u64();
    need(len);
    std::vector<std::uint8_t> out(p + pos, p + pos + len);
    pos += len;
    return out;
  }
};

template <typename S>
std::vector<std::uint8_t> pack_scalars(const std::vector<S>& v) {
  std::vector<std::uint8_t> out(v.size() * sizeof(S));
  if (!v.empty()) std::memcpy(out.data(), v.data(), out.size());
  return out;
}

}  // namespace ckpt_detail

template <typename S>
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint<S>& c) {
  using namespace ckpt_detail;
  auto& model = const_cast<BrunoModel<S>&>(c.model);  // visit only reads
  std::vector<S> flow_params, proc_params;
  visit_tensors(model, [&](S* data, long n, bool is_process) {
    auto& dst = is_process ? proc_params : flow_params;
    dst.insert(dst.end(), data, data + n);
  });

  Writer w;
  w.raw(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  w.u8(std::uint8_t(sizeof(S)));
  const std::string meta = to_kv(c.model.config).serialize();
  w.section({meta.begin(), meta.end()});
  w.section(pack_scalars(flow_params));
  w.section(pack_scalars(proc_params));
  w.section(pack_scalars(c.optimizer_state));
  {
    Writer rs;
    for (auto s : c.rng_state) rs.u64(s);
    w.section(rs.bytes);
  }
  {
    Writer it;
    it.u64(c.iteration);
    w.section(it.bytes);
  }
  w.u32(crc32(w.bytes.data(), w.bytes.size()));
  return w.bytes;
}

template <typename S>
void save_checkpoint(const Checkpoint<S>& c, const std::string& path) {
  const auto bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
}

template <typename S>
void save_checkpoint(const BrunoModel<S>& m, const std::string& path) {
  Checkpoint<S> c;
  c.model = m;
  save_checkpoint(c, path);
}

namespace ckpt_detail {

template <typename S, typename T>
std::vector<S> unpack_scalars_as(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % sizeof(T) != 0) throw CorruptFile("checkpoint: ragged scalar section");
  std::vector<T> tmp(bytes.size() / sizeof(T));
  if (!tmp.empty()) std::memcpy(tmp.data(), bytes.data(), bytes.size());
  return std::vector<S>(tmp.begin(), tmp.end());
}

template <typename S>
std::vector<S> unpack_scalars(const std::vector<std::uint8_t>& bytes, int dtype) {
  if (dtype == 4) return unpack_scalars_as<S, float>(bytes);
  if (dtype == 8) return unpack_scalars_as<S, double>(bytes);
  throw CorruptFile("checkpoint: unsupported scalar width " + std::to_string(dtype));
}

}  // namespace ckpt_detail

template <typename S>
Checkpoint<S> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using namespace ckpt_detail;
  if (bytes.size() < 8 + 4 + 1 + 4) throw CorruptFile("checkpoint: too short");
  const std::uint32_t stored_crc =
      std::uint32_t(bytes[bytes.size() - 4]) | (std::uint32_t(bytes[bytes.size() - 3]) << 8) |
      (std::uint32_t(bytes[bytes.size() - 2]) << 16) |
      (std::uint32_t(bytes[bytes.size() - 1]) << 24);
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
    throw CorruptFile("checkpoint: CRC mismatch");
  Reader r{bytes.data(), bytes.size() - 4};
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CorruptFile("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint version " + std::to_string(version) +
                          " is not supported; this build reads version " +
                          std::to_string(kCheckpointVersion));
  const int dtype = r.u8();

  const auto meta = r.section();
  const ModelConfig cfg = model_config_from_kv(KvConfig::parse({meta.begin(), meta.end()}));
  Checkpoint<S> c;
  c.model = make_model<S>(cfg, 0);

  const auto flow_params = unpack_scalars<S>(r.section(), dtype);
  const auto proc_params = unpack_scalars<S>(r.section(), dtype);
  std::size_t fi = 0, pi = 0;
  visit_tensors(c.model, [&](S* data, long n, bool is_process) {
    const auto& src = is_process ? proc_params : flow_params;
    std::size_t& i = is_process ? pi : fi;
    if (i + std::size_t(n) > src.size())
      throw CorruptFile("checkpoint: parameter section shorter than the model");
    std::memcpy(data, src.data() + i, std::size_t(n) * sizeof(S));
    i += std::size_t(n);
  });
  if (fi != flow_params.size() || pi != proc_params.size())
    throw CorruptFile("checkpoint: parameter section longer than the model");

  c.optimizer_state = unpack_scalars<double>(r.section(), 8);
  {
    Reader rs{nullptr, 0};
    const auto sec = r.section();
    rs = Reader{sec.data(), sec.size()};
    for (auto& s : c.rng_state) s = rs.u64();
  }
  {
    const auto sec = r.section();
    Reader ri{sec.data(), sec.size()};
    c.iteration = ri.u64();
  }
  return c;
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint<S>(bytes);
}

}  // namespace bruno
