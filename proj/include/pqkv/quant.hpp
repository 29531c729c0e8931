#pragma once

// Asymmetric uniform group-wise quantization and sub-byte code packing.
//
// One group of values x maps to integer codes
//     code = round((x - Z) / S),  Z = min(x),  S = (max(x) - min(x)) / (2^b - 1)
// with round-half-away-from-zero ties. A constant group stores S = 0 and
// all-zero codes, and dequantizes back to Z exactly.
//
// Groups are taken along one axis of a (tokens x channels) tensor:
//   token axis:   a group is up to group_size consecutive tokens within one
//                 channel; group index = channel * n_blocks + block.
//   channel axis: a group is up to group_size consecutive channels within
//                 one token; group index = token * n_blocks + block.
// Trailing partial groups use only their own min/max.
//
// Packing is little-endian within the byte: code j of a group occupies bits
// [j*b mod 8 ..] of byte floor(j*b/8). Each group is padded to a byte
// boundary. 16-bit codes are two bytes, low byte first.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqkv/error.hpp"
#include "pqkv/tensor.hpp"
#include "pqkv/tensor_io.hpp"

namespace pqkv {

enum class BitWidth : std::uint8_t { b2 = 2, b4 = 4, b8 = 8, b16 = 16 };

inline unsigned bits(BitWidth w) { return static_cast<unsigned>(w); }

inline std::uint32_t max_code(BitWidth w) {
  return (std::uint32_t{1} << bits(w)) - 1;
}

inline BitWidth bitwidth_from_int(int v) {
  switch (v) {
    case 2: return BitWidth::b2;
    case 4: return BitWidth::b4;
    case 8: return BitWidth::b8;
    case 16: return BitWidth::b16;
    default: break;
  }
  throw NumericError("bit width must be one of {2,4,8,16}, got " + std::to_string(v));
}

// The next width down the 16 -> 8 -> 4 -> 2 ladder.
inline BitWidth half_width(BitWidth w) {
  if (w == BitWidth::b2) throw NumericError("cannot halve a 2-bit width");
  return static_cast<BitWidth>(bits(w) / 2);
}

enum class GroupAxis : std::uint8_t { token, channel };

struct GroupSpec {
  GroupAxis axis = GroupAxis::token;
  std::size_t group_size = 128;
};

inline const char* axis_name(GroupAxis a) {
  return a == GroupAxis::token ? "token" : "channel";
}

inline GroupAxis axis_from_name(const std::string& s) {
  if (s == "token") return GroupAxis::token;
  if (s == "channel") return GroupAxis::channel;
  throw FormatError("unknown group axis '" + s + "'");
}

// Scale and zero point are kept in double precision in memory so that
// closed-form scale updates across repeated shrinks stay exact to within a
// few ulps; the storage budget still accounts them as two float32 values.
struct QuantParams {
  double scale = 0.0;
  double zero_point = 0.0;
};

inline double round_half_away(double v) { return std::round(v); }

// ---- group geometry -------------------------------------------------------

// Every group is an arithmetic progression over the flat row-major buffer.
struct GroupRef {
  std::size_t first = 0;
  std::size_t stride = 1;
  std::size_t len = 0;
};

inline std::size_t blocks_along(std::size_t extent, std::size_t group_size) {
  if (group_size == 0) throw ShapeError("group_size must be positive");
  return extent == 0 ? 0 : (extent + group_size - 1) / group_size;
}

inline std::size_t num_groups(std::size_t tokens, std::size_t channels,
                              const GroupSpec& spec) {
  if (spec.axis == GroupAxis::token) {
    return channels * blocks_along(tokens, spec.group_size);
  }
  return tokens * blocks_along(channels, spec.group_size);
}

// Invokes fn(GroupRef) in group-index order.
template <typename Fn>
inline void for_each_group(std::size_t tokens, std::size_t channels,
                           const GroupSpec& spec, Fn&& fn) {
  std::size_t gs = spec.group_size;
  if (spec.axis == GroupAxis::token) {
    std::size_t nb = blocks_along(tokens, gs);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t b = 0; b < nb; ++b) {
        std::size_t t0 = b * gs;
        std::size_t len = std::min(gs, tokens - t0);
        fn(GroupRef{t0 * channels + c, channels, len});
      }
    }
  } else {
    std::size_t nb = blocks_along(channels, gs);
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t b = 0; b < nb; ++b) {
        std::size_t c0 = b * gs;
        std::size_t len = std::min(gs, channels - c0);
        fn(GroupRef{t * channels + c0, 1, len});
      }
    }
  }
}

// ---- packing --------------------------------------------------------------

inline std::size_t packed_code_bytes(std::size_t len, BitWidth w) {
  return (len * bits(w) + 7) / 8;
}

inline void pack_into(const std::uint32_t* codes, std::size_t len, BitWidth w,
                      std::uint8_t* out) {
  unsigned b = bits(w);
  std::uint32_t cap = max_code(w);
  for (std::size_t j = 0; j < len; ++j) {
    if (codes[j] > cap) {
      throw NumericError("code " + std::to_string(codes[j]) + " out of range for " +
                         std::to_string(b) + "-bit packing");
    }
    std::size_t bitpos = j * b;
    if (b == 16) {
      out[bitpos / 8] = static_cast<std::uint8_t>(codes[j] & 0xff);
      out[bitpos / 8 + 1] = static_cast<std::uint8_t>(codes[j] >> 8);
    } else {
      out[bitpos / 8] |= static_cast<std::uint8_t>(codes[j] << (bitpos % 8));
    }
  }
}

inline std::vector<std::uint8_t> pack(const std::vector<std::uint32_t>& codes,
                                      BitWidth w) {
  std::vector<std::uint8_t> out(packed_code_bytes(codes.size(), w), 0);
  pack_into(codes.data(), codes.size(), w, out.data());
  return out;
}

inline void unpack_into(const std::uint8_t* bytes, std::size_t count, BitWidth w,
                        std::uint32_t* out) {
  unsigned b = bits(w);
  std::uint32_t mask = max_code(w);
  for (std::size_t j = 0; j < count; ++j) {
    std::size_t bitpos = j * b;
    if (b == 16) {
      out[j] = std::uint32_t(bytes[bitpos / 8]) |
               (std::uint32_t(bytes[bitpos / 8 + 1]) << 8);
    } else {
      out[j] = (bytes[bitpos / 8] >> (bitpos % 8)) & mask;
    }
  }
}

inline std::vector<std::uint32_t> unpack(const std::vector<std::uint8_t>& bytes,
                                         BitWidth w, std::size_t count) {
  if (bytes.size() != packed_code_bytes(count, w)) {
    throw LengthError("packed byte length does not match code count");
  }
  std::vector<std::uint32_t> out(count);
  unpack_into(bytes.data(), count, w, out.data());
  return out;
}

// ---- group quantization ---------------------------------------------------

// Strided core used by both the tensor quantizer and the cache.
inline QuantParams compute_params(const float* x, std::size_t stride,
                                  std::size_t len, BitWidth w) {
  double lo = x[0], hi = x[0];
  for (std::size_t j = 0; j < len; ++j) {
    double v = x[j * stride];
    if (!std::isfinite(v)) throw NumericError("non-finite value in quantization group");
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  QuantParams p;
  p.zero_point = lo;
  p.scale = (hi - lo) / static_cast<double>(max_code(w));
  return p;
}

inline void quantize_with_params(const float* x, std::size_t stride, std::size_t len,
                                 BitWidth w, const QuantParams& p, std::uint32_t* out) {
  std::uint32_t cap = max_code(w);
  if (p.scale <= 0.0) {
    for (std::size_t j = 0; j < len; ++j) out[j] = 0;
    return;
  }
  double inv = 1.0 / p.scale;
  for (std::size_t j = 0; j < len; ++j) {
    double q = round_half_away((static_cast<double>(x[j * stride]) - p.zero_point) * inv);
    if (q < 0.0) q = 0.0;
    if (q > static_cast<double>(cap)) q = static_cast<double>(cap);
    out[j] = static_cast<std::uint32_t>(q);
  }
}

inline void dequantize_with_params(const std::uint32_t* codes, std::size_t len,
                                   const QuantParams& p, std::size_t stride,
                                   float* out) {
  for (std::size_t j = 0; j < len; ++j) {
    out[j * stride] = static_cast<float>(p.zero_point + p.scale * codes[j]);
  }
}

inline float dequantize_code(std::uint32_t code, const QuantParams& p) {
  return static_cast<float>(p.zero_point + p.scale * code);
}

// Packs at the end of `out`, growing it by the group's padded byte length.
inline void pack_append(const std::vector<std::uint32_t>& codes, BitWidth w,
                        std::vector<std::uint8_t>& out) {
  std::size_t at = out.size();
  out.resize(at + packed_code_bytes(codes.size(), w), 0);
  pack_into(codes.data(), codes.size(), w, out.data() + at);
}

inline std::vector<std::uint32_t> unpack(const std::uint8_t* bytes, std::size_t byte_len,
                                         std::size_t count, BitWidth w) {
  if (byte_len != packed_code_bytes(count, w)) {
    throw LengthError("packed byte length does not match code count");
  }
  std::vector<std::uint32_t> out(count);
  unpack_into(bytes, count, w, out.data());
  return out;
}

struct GroupQuantResult {
  std::vector<std::uint32_t> codes;
  QuantParams params;
};

inline GroupQuantResult quantize_group(const std::vector<float>& x, BitWidth w) {
  if (x.empty()) throw ShapeError("cannot quantize an empty group");
  GroupQuantResult r;
  r.params = compute_params(x.data(), 1, x.size(), w);
  r.codes.resize(x.size());
  quantize_with_params(x.data(), 1, x.size(), w, r.params, r.codes.data());
  return r;
}

inline std::vector<float> dequantize_group(const std::vector<std::uint32_t>& codes,
                                           const QuantParams& p) {
  std::vector<float> out(codes.size());
  dequantize_with_params(codes.data(), codes.size(), p, 1, out.data());
  return out;
}

// ---- packed tensors -------------------------------------------------------

struct PackedGroup {
  QuantParams params;
  std::uint64_t len = 0;
  std::uint64_t byte_offset = 0;  // into PackedTensor::bytes
};

class PackedTensor {
 public:
  PackedTensor() = default;

  const std::vector<std::uint64_t>& dims() const { return dims_; }
  BitWidth bit_width() const { return width_; }
  const GroupSpec& group_spec() const { return spec_; }
  const std::vector<PackedGroup>& groups() const { return groups_; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::size_t num_groups() const { return groups_.size(); }
  std::size_t packed_byte_length() const { return bytes_.size(); }

  std::uint64_t tokens() const {
    if (dims_.empty()) throw ShapeError("packed tensor has no dims");
    return dims_[0];
  }
  std::uint64_t channels() const {
    std::uint64_t c = 1;
    for (std::size_t i = 1; i < dims_.size(); ++i) c *= dims_[i];
    return c;
  }

  std::vector<std::uint32_t> group_codes(std::size_t g) const {
    const PackedGroup& pg = groups_.at(g);
    std::vector<std::uint32_t> codes(static_cast<std::size_t>(pg.len));
    unpack_into(bytes_.data() + pg.byte_offset, codes.size(), width_, codes.data());
    return codes;
  }

  friend PackedTensor quantize_tensor(const Tensor& t, BitWidth w, const GroupSpec& spec);
  friend PackedTensor packed_from_parts(std::vector<std::uint64_t> dims, BitWidth w,
                                        GroupSpec spec,
                                        const std::vector<std::uint32_t>& elem_codes,
                                        const std::vector<QuantParams>& params);

 private:
  std::vector<std::uint64_t> dims_;
  BitWidth width_ = BitWidth::b16;
  GroupSpec spec_;
  std::vector<PackedGroup> groups_;
  std::vector<std::uint8_t> bytes_;
};

inline PackedTensor quantize_tensor(const Tensor& t, BitWidth w, const GroupSpec& spec) {
  if (t.dtype() != Dtype::f32) throw FormatError("quantize_tensor expects float32");
  if (t.elements() == 0) throw ShapeError("cannot quantize an empty tensor");
  std::size_t tokens = static_cast<std::size_t>(t.tokens());
  std::size_t channels = static_cast<std::size_t>(t.channels());
  const float* x = t.f32().data();

  PackedTensor p;
  p.dims_ = t.dims();
  p.width_ = w;
  p.spec_ = spec;
  p.groups_.reserve(num_groups(tokens, channels, spec));

  std::vector<std::uint32_t> scratch(spec.group_size);
  for_each_group(tokens, channels, spec, [&](const GroupRef& g) {
    QuantParams params = compute_params(x + g.first, g.stride, g.len, w);
    scratch.resize(g.len);
    quantize_with_params(x + g.first, g.stride, g.len, w, params, scratch.data());
    PackedGroup pg;
    pg.params = params;
    pg.len = g.len;
    pg.byte_offset = p.bytes_.size();
    p.bytes_.resize(p.bytes_.size() + packed_code_bytes(g.len, w), 0);
    pack_into(scratch.data(), g.len, w, p.bytes_.data() + pg.byte_offset);
    p.groups_.push_back(pg);
  });
  return p;
}

inline Tensor dequantize_tensor(const PackedTensor& p) {
  std::size_t tokens = static_cast<std::size_t>(p.tokens());
  std::size_t channels = static_cast<std::size_t>(p.channels());
  Tensor out(p.dims(), Dtype::f32);
  float* y = out.f32().data();
  std::size_t gi = 0;
  std::vector<std::uint32_t> scratch(p.group_spec().group_size);
  for_each_group(tokens, channels, p.group_spec(), [&](const GroupRef& g) {
    const PackedGroup& pg = p.groups()[gi++];
    scratch.resize(g.len);
    unpack_into(p.bytes().data() + pg.byte_offset, g.len, p.bit_width(), scratch.data());
    dequantize_with_params(scratch.data(), g.len, pg.params, g.stride, y + g.first);
  });
  return out;
}

// Rebuilds a PackedTensor from per-element codes laid out in row-major
// element order plus per-group params. Used by the file loader.
inline PackedTensor packed_from_parts(std::vector<std::uint64_t> dims, BitWidth w,
                                      GroupSpec spec,
                                      const std::vector<std::uint32_t>& elem_codes,
                                      const std::vector<QuantParams>& params) {
  PackedTensor p;
  p.dims_ = std::move(dims);
  p.width_ = w;
  p.spec_ = spec;
  std::size_t tokens = static_cast<std::size_t>(p.tokens());
  std::size_t channels = static_cast<std::size_t>(p.channels());
  if (elem_codes.size() != tokens * channels) {
    throw ShapeError("code payload does not match dims");
  }
  if (params.size() != num_groups(tokens, channels, spec)) {
    throw ShapeError("group parameter count does not match dims and group spec");
  }
  std::size_t gi = 0;
  std::vector<std::uint32_t> scratch(spec.group_size);
  for_each_group(tokens, channels, spec, [&](const GroupRef& g) {
    scratch.resize(g.len);
    for (std::size_t j = 0; j < g.len; ++j) scratch[j] = elem_codes[g.first + j * g.stride];
    PackedGroup pg;
    pg.params = params[gi++];
    pg.len = g.len;
    pg.byte_offset = p.bytes_.size();
    p.bytes_.resize(p.bytes_.size() + packed_code_bytes(g.len, w), 0);
    pack_into(scratch.data(), g.len, w, p.bytes_.data() + pg.byte_offset);
    p.groups_.push_back(pg);
  });
  return p;
}

// On disk a packed tensor is three TensorFiles plus a JSON sidecar:
//   <prefix>.codes.pmkt        int32, original dims, element order
//   <prefix>.scales.pmkt       float32, one per group
//   <prefix>.zero_points.pmkt  float32, one per group
//   <prefix>.json              dims, bit width, group spec
// Codes round-trip exactly; params round-trip at float32 precision.
inline void save_packed(const PackedTensor& p, const std::string& prefix) {
  std::size_t tokens = static_cast<std::size_t>(p.tokens());
  std::size_t channels = static_cast<std::size_t>(p.channels());
  std::vector<std::int32_t> codes(tokens * channels, 0);
  std::vector<float> scales, zeros;
  scales.reserve(p.num_groups());
  zeros.reserve(p.num_groups());
  std::size_t gi = 0;
  for_each_group(tokens, channels, p.group_spec(), [&](const GroupRef& g) {
    std::vector<std::uint32_t> gc = p.group_codes(gi);
    const PackedGroup& pg = p.groups()[gi];
    for (std::size_t j = 0; j < g.len; ++j) {
      codes[g.first + j * g.stride] = static_cast<std::int32_t>(gc[j]);
    }
    scales.push_back(static_cast<float>(pg.params.scale));
    zeros.push_back(static_cast<float>(pg.params.zero_point));
    ++gi;
  });
  write_tensor(prefix + ".codes.pmkt", Tensor::from_i32(p.dims(), std::move(codes)));
  write_tensor(prefix + ".scales.pmkt",
               Tensor::from_f32({p.num_groups()}, std::move(scales)));
  write_tensor(prefix + ".zero_points.pmkt",
               Tensor::from_f32({p.num_groups()}, std::move(zeros)));
  nlohmann::json meta;
  meta["format"] = "pqkv-packed";
  meta["version"] = 1;
  meta["dims"] = p.dims();
  meta["bit_width"] = bits(p.bit_width());
  meta["group_axis"] = axis_name(p.group_spec().axis);
  meta["group_size"] = p.group_spec().group_size;
  std::ofstream f(prefix + ".json", std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + prefix + ".json");
  f << meta.dump(2) << "\n";
}

inline PackedTensor load_packed(const std::string& prefix) {
  std::ifstream f(prefix + ".json");
  if (!f) throw Error("cannot open for reading: " + prefix + ".json");
  nlohmann::json meta;
  try {
    f >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad packed-tensor sidecar: ") + e.what());
  }
  if (meta.value("format", "") != "pqkv-packed" || meta.value("version", 0) != 1) {
    throw FormatError("unrecognized packed-tensor sidecar");
  }
  std::vector<std::uint64_t> dims = meta.at("dims").get<std::vector<std::uint64_t>>();
  BitWidth w = bitwidth_from_int(meta.at("bit_width").get<int>());
  GroupSpec spec{axis_from_name(meta.at("group_axis").get<std::string>()),
                 meta.at("group_size").get<std::size_t>()};

  Tensor codes_t = read_tensor(prefix + ".codes.pmkt");
  Tensor scales_t = read_tensor(prefix + ".scales.pmkt");
  Tensor zeros_t = read_tensor(prefix + ".zero_points.pmkt");
  if (codes_t.dims() != dims) throw FormatError("codes dims disagree with sidecar");
  if (scales_t.elements() != zeros_t.elements()) {
    throw FormatError("scales and zero_points disagree in length");
  }
  std::vector<std::uint32_t> codes(codes_t.i32().size());
  std::uint32_t cap = max_code(w);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    std::int32_t c = codes_t.i32()[i];
    if (c < 0 || static_cast<std::uint32_t>(c) > cap) {
      throw FormatError("stored code out of range for declared bit width");
    }
    codes[i] = static_cast<std::uint32_t>(c);
  }
  std::vector<QuantParams> params(scales_t.elements());
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].scale = scales_t.f32()[i];
    params[i].zero_point = zeros_t.f32()[i];
  }
  return packed_from_parts(std::move(dims), w, spec, codes, params);
}

}  // namespace pqkv
