#pragma once

// Named-tensor container file.
//
// Layout (all integers little-endian):
//   magic    8 bytes  "BAECKPT\0"
//   version  u32      kCheckpointVersion
//   count    u32      number of entries
//   entries  count x { u32 name_len, name (UTF-8), u32 rank, rank x u64 dims,
//                      numel x f64 (IEEE-754 bit pattern, little-endian) }
//   trailer  8 bytes  "BAEEND\0\0"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bae/errors.hpp"
#include "bae/tensor.hpp"

namespace bae {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic = {'B', 'A', 'E', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::array<char, 8> kCheckpointTrailer = {'B', 'A', 'E', 'E', 'N', 'D', '\0', '\0'};

struct CheckpointEntry {
  Shape shape;
  std::vector<double> values;

  Tensor tensor(bool requires_grad = false) const { return Tensor(shape, values, requires_grad); }
};

/// Ordered name -> tensor mapping that round-trips bit-exactly through a file.
class Checkpoint {
 public:
  void put(const std::string& name, const Tensor& t) { entries_[name] = {t.shape(), t.values()}; }
  void put(const std::string& name, Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) throw DimensionError("checkpoint entry '" + name + "' size mismatch");
    entries_[name] = {std::move(shape), std::move(values)};
  }
  void put_scalar(const std::string& name, double v) { put(name, {1}, {v}); }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const CheckpointEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw CheckpointError("checkpoint has no entry '" + name + "'");
    return it->second;
  }
  Tensor tensor(const std::string& name, bool requires_grad = false) const { return at(name).tensor(requires_grad); }
  double scalar(const std::string& name) const {
    const auto& e = at(name);
    if (e.values.size() != 1) throw CheckpointError("entry '" + name + "' is not a scalar");
    return e.values[0];
  }
  const std::map<std::string, CheckpointEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Copies every entry of `other` under `prefix`.
  void merge(const Checkpoint& other, const std::string& prefix = "") {
    for (const auto& [k, v] : other.entries_) entries_[prefix + k] = v;
  }
  /// Entries whose name starts with `prefix`, with the prefix stripped.
  Checkpoint subset(const std::string& prefix) const {
    Checkpoint out;
    for (const auto& [k, v] : entries_)
      if (k.rfind(prefix, 0) == 0) out.entries_[k.substr(prefix.size())] = v;
    return out;
  }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::map<std::string, CheckpointEntry> entries_;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

class Reader {
 public:
  explicit Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw CheckpointError("truncated checkpoint file: " + path_);
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace detail

inline void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put_u64(os, d);
    for (double v : e.values) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  os.write(kCheckpointTrailer.data(), kCheckpointTrailer.size());
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  detail::Reader r(is, path);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file (bad magic): " + path);
  auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  auto count = r.u32();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = r.u32();
    if (name_len > (1u << 20)) throw CheckpointError("corrupt entry name length in " + path);
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    auto rank = r.u32();
    if (rank == 0 || rank > 16) throw CheckpointError("corrupt rank for entry '" + name + "'");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0 || d > (1ull << 32)) throw CheckpointError("corrupt shape for entry '" + name + "'");
      numel *= d;
    }
    if (numel > (1ull << 32)) throw CheckpointError("entry '" + name + "' too large");
    std::vector<double> values(numel);
    for (auto& v : values) v = std::bit_cast<double>(r.u64());
    ck.entries_[name] = {std::move(shape), std::move(values)};
  }
  std::array<char, 8> trailer{};
  r.bytes(trailer.data(), trailer.size());
  if (trailer != kCheckpointTrailer) throw CheckpointError("missing checkpoint trailer: " + path);
  return ck;
}

}  // namespace bae
