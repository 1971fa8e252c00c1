#pragma once

// Self-describing binary tensor file:
//   magic "MAM2TNSR" | version u16 | dtype u16 (1=f32, 2=f64) | rank u16
//   | extents u64 each | payload, row-major scalars
// Everything little-endian, so files are bit-exact across machines.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mam2/common.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

namespace detail {

constexpr char kMagic[8] = {'M', 'A', 'M', '2', 'T', 'N', 'S', 'R'};
constexpr uint16_t kVersion = 1;

template <class S>
constexpr uint16_t dtype_tag();
template <>
constexpr uint16_t dtype_tag<float>() {
  return 1;
}
template <>
constexpr uint16_t dtype_tag<double>() {
  return 2;
}

inline void put_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint16_t get_u16(std::istream& is, const char* field) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2))
    throw FormatError(std::string("tensor file truncated at ") + field);
  return uint16_t(b[0]) | uint16_t(b[1]) << 8;
}

inline uint64_t get_u64(std::istream& is, const char* field) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw FormatError(std::string("tensor file truncated at ") + field);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <class S>
void write_tensor(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os.write(detail::kMagic, 8);
  detail::put_u16(os, detail::kVersion);
  detail::put_u16(os, detail::dtype_tag<S>());
  detail::put_u16(os, uint16_t(t.rank()));
  for (int64_t d : t.shape()) detail::put_u64(os, uint64_t(d));
  const auto& v = t.values();
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()),
             std::streamsize(v.size() * sizeof(S)));
  } else {
    for (S x : v) {
      unsigned char b[sizeof(S)];
      if constexpr (sizeof(S) == 4) {
        uint32_t u = std::bit_cast<uint32_t>(x);
        for (int k = 0; k < 4; ++k) b[k] = (unsigned char)((u >> (8 * k)) & 0xff);
      } else {
        uint64_t u = std::bit_cast<uint64_t>(x);
        for (int k = 0; k < 8; ++k) b[k] = (unsigned char)((u >> (8 * k)) & 0xff);
      }
      os.write(reinterpret_cast<const char*>(b), sizeof(S));
    }
  }
  if (!os) throw FormatError("write failed: " + path);
}

template <class S>
Tensor<S> read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8)) throw FormatError("tensor file truncated at magic: " + path);
  if (std::memcmp(magic, detail::kMagic, 8) != 0)
    throw FormatError("bad magic bytes in " + path);
  uint16_t version = detail::get_u16(is, "version");
  if (version != detail::kVersion)
    throw FormatError("unsupported version " + std::to_string(version) + " in " + path);
  uint16_t dtype = detail::get_u16(is, "dtype");
  if (dtype != 1 && dtype != 2)
    throw FormatError("unknown dtype tag " + std::to_string(dtype) + " in " + path);
  if (dtype != detail::dtype_tag<S>())
    throw FormatError("dtype tag " + std::to_string(dtype) + " does not match requested scalar in " +
                      path);
  uint16_t rank = detail::get_u16(is, "rank");
  Shape shape(rank);
  for (uint16_t i = 0; i < rank; ++i) {
    uint64_t e = detail::get_u64(is, "extents");
    shape[i] = int64_t(e);
  }
  int64_t count = numel(shape);
  auto data = std::vector<S>(size_t(count));
  if (count > 0) {
    if constexpr (std::endian::native == std::endian::little) {
      if (!is.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(S))))
        throw FormatError("payload truncated in " + path);
    } else {
      for (auto& x : data) {
        unsigned char b[sizeof(S)];
        if (!is.read(reinterpret_cast<char*>(b), sizeof(S)))
          throw FormatError("payload truncated in " + path);
        if constexpr (sizeof(S) == 4) {
          uint32_t u = 0;
          for (int k = 0; k < 4; ++k) u |= uint32_t(b[k]) << (8 * k);
          x = std::bit_cast<float>(u);
        } else {
          uint64_t u = 0;
          for (int k = 0; k < 8; ++k) u |= uint64_t(b[k]) << (8 * k);
          x = std::bit_cast<double>(u);
        }
      }
    }
  }
  is.peek();
  if (!is.eof()) throw FormatError("payload longer than extents describe in " + path);
  return Tensor<S>(std::move(shape), std::move(data));
}

}  // namespace mam2
