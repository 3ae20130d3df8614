#pragma once

// Versioned named-tensor container. Layout, all integers u32 little-endian:
//   "PAFU" | version | entry count | entries...
//   entry: name length | UTF-8 name | rank | rank extents | f32 LE payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pafu/error.hpp"
#include "pafu/tensor.hpp"

namespace pafu {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CorruptionError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const NamedTensors& entries) {
  std::set<std::string> seen;
  std::vector<std::uint8_t> out{'P', 'A', 'F', 'U'};
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (!seen.insert(name).second) throw ContractError("checkpoint: duplicate tensor name '" + name + "'");
    if (t.empty()) throw ContractError("checkpoint: tensor '" + name + "' is empty");
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto ext = t.shape().extents();
    detail::put_u32(out, static_cast<std::uint32_t>(ext.size()));
    for (std::size_t e : ext) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline NamedTensors parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "PAFU", 4) != 0) throw FormatError("checkpoint: bad magic");
  detail::ByteReader in(bytes);
  in.str(4);
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  NamedTensors out;
  std::set<std::string> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t len = in.u32();
    std::string name = in.str(len);
    if (!seen.insert(name).second) throw CorruptionError("checkpoint: duplicate tensor name '" + name + "'");
    const std::uint32_t rank = in.u32();
    if (rank < 1 || rank > Shape::kMaxRank) throw CorruptionError("checkpoint: bad rank for '" + name + "'");
    std::vector<std::size_t> ext(rank);
    std::size_t numel = 1;
    for (auto& x : ext) {
      x = in.u32();
      if (x == 0) throw CorruptionError("checkpoint: zero extent in '" + name + "'");
      numel *= x;
    }
    if (numel > in.remaining() / 4) throw CorruptionError("checkpoint truncated");
    std::vector<float> data(numel);
    for (auto& v : data) v = std::bit_cast<float>(in.u32());
    out.emplace_back(std::move(name), Tensor(Shape(std::span<const std::size_t>(ext)), std::move(data)));
  }
  if (!in.done()) throw CorruptionError("checkpoint: trailing bytes");
  return out;
}

inline void save_checkpoint(const NamedTensors& entries, const std::string& path) {
  const auto bytes = serialize_checkpoint(entries);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + path + "'");
}

inline NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

inline const Tensor& find_tensor(const NamedTensors& entries, const std::string& name) {
  for (const auto& [n, t] : entries)
    if (n == name) return t;
  throw FormatError("checkpoint: missing tensor '" + name + "'");
}

}  // namespace pafu
