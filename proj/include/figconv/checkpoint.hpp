#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "figconv/tensor.hpp"

namespace figconv {

// Binary checkpoint layout:
//   "FIGCKPT1"
//   repeated until end of file:
//     u64 name length, name bytes, u64 rank, rank x u64 extents,
//     prod(extents) x f32 payload
// All integers and floats are little-endian.

inline constexpr char kCheckpointMagic[8] = {'F', 'I', 'G', 'C', 'K', 'P', 'T', '1'};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return true;
}

inline void put_f32(std::ostream& os, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  os.write(b, 4);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kCheckpointMagic, 8);
  for (const auto& t : tensors) {
    detail::put_u64(os, t.name.size());
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_u64(os, t.value.rank());
    for (auto e : t.value.shape()) detail::put_u64(os, e);
    for (float v : t.value.data()) detail::put_f32(os, v);
  }
  if (!os) throw Error("checkpoint: write failed");
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw Error("checkpoint: missing FIGCKPT1 magic");
  std::vector<NamedTensor> out;
  std::uint64_t name_len;
  while (detail::get_u64(is, name_len)) {
    if (name_len > (1u << 20)) throw Error("checkpoint: implausible name length");
    NamedTensor t;
    t.name.resize(name_len);
    std::uint64_t rank;
    if (!is.read(t.name.data(), static_cast<std::streamsize>(name_len)) || !detail::get_u64(is, rank))
      throw Error("checkpoint: truncated record header");
    if (rank > 16) throw Error(detail::cat("checkpoint: tensor '", t.name, "' has implausible rank ", rank));
    Shape shape(rank);
    for (auto& e : shape)
      if (!detail::get_u64(is, e)) throw Error(detail::cat("checkpoint: truncated extents for '", t.name, "'"));
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) {
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4))
        throw Error(detail::cat("checkpoint: truncated payload for '", t.name, "'"));
      std::uint32_t u = 0;
      for (int i = 0; i < 4; ++i) u |= std::uint32_t(b[i]) << (8 * i);
      v = std::bit_cast<float>(u);
    }
    t.value = Tensor<float>(std::move(shape), std::move(data));
    out.push_back(std::move(t));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(detail::cat("checkpoint: cannot open '", path, "' for writing"));
  write_checkpoint(os, tensors);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(detail::cat("checkpoint: cannot open '", path, "'"));
  return read_checkpoint(is);
}

}  // namespace figconv
