#pragma once

// Binary tensor container. Layout, all little-endian:
//
//   bytes 0..3   magic "PMKT"
//   bytes 4..7   format version (u32), currently 1
//   byte  8      dtype code (u8): 0 = float32, 1 = int32
//   byte  9      ndim (u8)
//   then         ndim dims, u64 each
//   then         payload, elements in row-major order
//
// Serialization goes through explicit byte packing rather than struct
// memcpy, so files are identical regardless of host padding or endianness.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pqkv/error.hpp"
#include "pqkv/tensor.hpp"

namespace pqkv {

inline constexpr char kTensorMagic[4] = {'P', 'M', 'K', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct ByteReader {
  const std::uint8_t* p;
  std::size_t n;
  std::size_t pos = 0;

  void need(std::size_t k, const char* what) const {
    if (pos + k > n) {
      throw LengthError(std::string("tensor file truncated while reading ") + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return p[pos++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> tensor_to_bytes(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(18 + 8 * t.rank() + 4 * t.elements());
  out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
  detail::put_u32(out, kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::uint64_t d : t.dims()) detail::put_u64(out, d);
  if (t.dtype() == Dtype::f32) {
    for (float f : t.f32()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  } else {
    for (std::int32_t v : t.i32()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Tensor tensor_from_bytes(const std::uint8_t* data, std::size_t size) {
  detail::ByteReader r{data, size};
  r.need(4, "magic");
  if (std::memcmp(data, kTensorMagic, 4) != 0) {
    throw FormatError("bad tensor file magic");
  }
  r.pos = 4;
  std::uint32_t version = r.u32("version");
  if (version != kTensorVersion) {
    throw FormatError("unsupported tensor file version " + std::to_string(version));
  }
  std::uint8_t dtype_code = r.u8("dtype");
  if (dtype_code > 1) {
    throw FormatError("unknown dtype code " + std::to_string(dtype_code));
  }
  Dtype dtype = static_cast<Dtype>(dtype_code);
  std::uint8_t ndim = r.u8("ndim");
  std::vector<std::uint64_t> dims(ndim);
  for (auto& d : dims) d = r.u64("dims");
  std::uint64_t n = checked_element_count(dims);
  r.need(static_cast<std::size_t>(4 * n), "payload");
  if (r.pos + 4 * n != size) {
    throw LengthError("tensor file has trailing bytes after payload");
  }
  if (dtype == Dtype::f32) {
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& f : v) f = std::bit_cast<float>(r.u32("payload"));
    return Tensor::from_f32(std::move(dims), std::move(v));
  }
  std::vector<std::int32_t> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = std::bit_cast<std::int32_t>(r.u32("payload"));
  return Tensor::from_i32(std::move(dims), std::move(v));
}

inline void write_tensor(const std::string& path, const Tensor& t) {
  std::vector<std::uint8_t> bytes = tensor_to_bytes(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("short write: " + path);
}

inline Tensor read_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for reading: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return tensor_from_bytes(bytes.data(), bytes.size());
}

}  // namespace pqkv
