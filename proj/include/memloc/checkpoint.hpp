#pragma once

// Checkpoint file layout (all integers little-endian):
//   "MLOC" | u16 version | u32 manifest length | manifest JSON
//   then per parameter, in canonical order:
//   u32 name length | name | u32 rank | u64 dims[rank] | f32 payload[prod(dims)]

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memloc/error.hpp"
#include "memloc/model.hpp"
#include "memloc/rng.hpp"

namespace memloc {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointManifest {
  std::string kind;  // theta_P, theta_M1, theta_M2, theta_O, or free-form
  std::string task_id;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  ModelState model;
  CheckpointManifest manifest;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw ParseError("checkpoint truncated while reading " + std::string(what) + " at offset " +
                           std::to_string(pos_),
                       pos_);
  }
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelState& model, const CheckpointManifest& m) {
  nlohmann::json j{{"kind", m.kind},
                   {"task_id", m.task_id},
                   {"seed", m.seed},
                   {"config_hash", m.config_hash},
                   {"format_version", kCheckpointVersion},
                   {"config", model.config},
                   {"extra", m.extra}};
  const std::string manifest = j.dump();
  std::string out = "MLOC";
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(manifest.size()));
  out += manifest;
  for_each_parameter(model, [&](const std::string& name, const Tensor& t, ParamGroup) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (float f : t.values()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  });
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4, "magic") != "MLOC") throw ParseError("checkpoint: bad magic at offset 0", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  const auto mlen = r.get<std::uint32_t>("manifest length");
  const std::size_t manifest_at = r.offset();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(r.bytes(mlen, "manifest"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest at offset " + std::to_string(manifest_at) + ": " + e.what(), manifest_at);
  }
  Checkpoint cp;
  ModelConfig cfg;
  try {
    cfg = j.at("config").get<ModelConfig>();
    cp.manifest.kind = j.at("kind").get<std::string>();
    cp.manifest.task_id = j.value("task_id", "");
    cp.manifest.seed = j.value("seed", std::uint64_t{0});
    cp.manifest.config_hash = j.value("config_hash", "");
    cp.manifest.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest at offset " + std::to_string(manifest_at) + ": " + e.what(), manifest_at);
  }
  cp.model = allocate_model(cfg);
  for_each_parameter(cp.model, [&](const std::string& name, Tensor& t, ParamGroup) {
    const std::size_t at = r.offset();
    const auto nlen = r.get<std::uint32_t>("name length");
    const auto got = r.bytes(nlen, "name");
    if (got != name)
      throw ParseError("checkpoint: expected parameter " + name + " at offset " + std::to_string(at) + ", found " + got, at);
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("shape"));
    if (shape != t.shape())
      throw ParseError("checkpoint: parameter " + name + " has shape " + shape_string(shape) + ", config implies " +
                           shape_string(t.shape()) + " (offset " + std::to_string(at) + ")",
                       at);
    r.need(t.size() * 4, "payload");
    for (auto& f : t.values()) f = std::bit_cast<float>(r.get<std::uint32_t>("payload"));
  });
  if (!r.done())
    throw ParseError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()), r.offset());
  return cp;
}

/// Writes `bytes` to `path` through a temporary file and a rename, so readers
/// never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const ModelState& model, const std::filesystem::path& path,
                            const CheckpointManifest& manifest = {}) {
  write_file_atomic(path, serialize_checkpoint(model, manifest));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize_checkpoint(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.position());
  }
}

}  // namespace memloc
