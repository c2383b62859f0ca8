#pragma once

// Binary checkpoint container.
//
// Layout (all integers little-endian):
//   "SGCK"  u32 version
//   u32 tensor_count, then per tensor:
//     u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f32 payload[numel]
//   u32 metadata_count, then per entry (sorted by key):
//     u32 key_len, key, u64 value_len, value
//   u32 CRC-32 of every preceding byte
//
// Tensor names are unique; metadata carries the config echo, RNG state and
// step counters as text.

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "stagegen/adam.hpp"
#include "stagegen/error.hpp"
#include "stagegen/image_io.hpp"
#include "stagegen/models.hpp"
#include "stagegen/tensor.hpp"

namespace stagegen {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'S', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::map<std::string, std::string> metadata;

  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return true;
    }
    return false;
  }

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }

  const std::string& meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw FormatError("checkpoint has no metadata key '" + key + "'");
    return it->second;
  }

  void add(const std::string& name, const Tensor<float>& t) {
    if (has_tensor(name)) throw Error("duplicate checkpoint tensor '" + name + "'");
    tensors.emplace_back(name, t.clone());
  }
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string identity) : bytes_(bytes), identity_(std::move(identity)) {}

  template <class U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError(identity_ + ": truncated checkpoint");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string get_string(std::size_t n) {
    const auto* p = take(n);
    return {reinterpret_cast<const char*>(p), n};
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string identity_;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  std::set<std::string> names;
  for (const auto& [name, t] : ck.tensors) {
    if (!names.insert(name).second) throw Error("duplicate checkpoint tensor '" + name + "'");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    w.put_bytes(t.values().data(), t.values().size() * sizeof(float));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.metadata.size()));
  for (const auto& [k, v] : ck.metadata) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(k.size()));
    w.put_bytes(k.data(), k.size());
    w.put<std::uint64_t>(v.size());
    w.put_bytes(v.data(), v.size());
  }
  w.put<std::uint32_t>(detail::crc32_of(w.bytes()));
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& identity = "<memory>") {
  if (bytes.size() < 12) throw FormatError(identity + ": truncated checkpoint");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError(identity + ": bad magic (not a checkpoint)");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  detail::ByteReader r(bytes.first(bytes.size() - 4), identity);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(identity + ": unsupported checkpoint version " + std::to_string(version));
  if (detail::crc32_of(bytes.first(bytes.size() - 4)) != stored_crc) {
    throw FormatError(identity + ": checksum mismatch (corrupt or truncated checkpoint)");
  }
  Checkpoint ck;
  std::set<std::string> names;
  const auto n_tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.get_string(r.get<std::uint32_t>());
    if (!names.insert(name).second) throw FormatError(identity + ": duplicate tensor '" + name + "'");
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError(identity + ": implausible rank for '" + name + "'");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint64_t>();
      if (dim > (1ULL << 32)) throw FormatError(identity + ": implausible dimension for '" + name + "'");
      shape.push_back(static_cast<std::int64_t>(dim));
      numel *= dim;
    }
    if (numel * sizeof(float) > r.remaining()) throw FormatError(identity + ": truncated payload for '" + name + "'");
    std::vector<float> values(numel);
    std::memcpy(values.data(), r.take(numel * sizeof(float)), numel * sizeof(float));
    ck.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto key = r.get_string(r.get<std::uint32_t>());
    const auto len = r.get<std::uint64_t>();
    if (len > r.remaining()) throw FormatError(identity + ": truncated metadata");
    ck.metadata[std::move(key)] = r.get_string(static_cast<std::size_t>(len));
  }
  if (r.remaining() != 0) throw FormatError(identity + ": trailing bytes in checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) { write_file_atomic(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes, path.string());
}

/// Stores every tensor of `m` as "<prefix>.<name>".
template <class T>
void store_module(Checkpoint& ck, const std::string& prefix, const Module<T>& m) {
  for (const auto& [name, t] : m.state()) ck.add(prefix + "." + name, t.template cast<float>());
}

/// Restores a module stored with store_module; names and shapes must match exactly.
template <class T>
void restore_module(const Checkpoint& ck, const std::string& prefix, Module<T>& m) {
  for (auto& [name, t] : m.state()) {
    const auto& src = ck.tensor(prefix + "." + name);
    if (src.shape() != t.shape()) {
      throw FormatError("checkpoint tensor '" + prefix + "." + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                        shape_str(t.shape()));
    }
    std::transform(src.values().begin(), src.values().end(), t.values().begin(), [](float v) { return static_cast<T>(v); });
  }
}

/// Adam moments as "<prefix>.m.<param>" / "<prefix>.v.<param>", step count in metadata.
inline void store_adam(Checkpoint& ck, const std::string& prefix, const Module<float>& m, const AdamState<float>& s) {
  const auto& names = m.param_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& shape = m.params()[i].shape();
    ck.add(prefix + ".m." + names[i], Tensor<float>(shape, s.first_moment.at(i)));
    ck.add(prefix + ".v." + names[i], Tensor<float>(shape, s.second_moment.at(i)));
  }
  ck.metadata[prefix + ".step_count"] = std::to_string(s.step_count);
}

inline AdamState<float> restore_adam(const Checkpoint& ck, const std::string& prefix, const Module<float>& m) {
  AdamState<float> s(m.params());
  const auto& names = m.param_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& mt = ck.tensor(prefix + ".m." + names[i]);
    const auto& vt = ck.tensor(prefix + ".v." + names[i]);
    if (mt.values().size() != s.first_moment[i].size() || vt.values().size() != s.second_moment[i].size()) {
      throw FormatError("optimizer moment size mismatch for " + names[i]);
    }
    s.first_moment[i] = mt.values();
    s.second_moment[i] = vt.values();
  }
  s.step_count = std::stoll(ck.meta(prefix + ".step_count"));
  return s;
}

}  // namespace stagegen
