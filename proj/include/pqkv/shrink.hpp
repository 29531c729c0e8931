#pragma once

// Integer-only bit-width halving for already-quantized codes, 2b -> b for
// b in {2,4,8}. Three strategies:
//
//   equivalent: code' = ((2^{2b} - 2^b + 1) * (code + 2^{b-1})) >> 3b
//               S' = (2^b + 1) * S,  Z' = Z
//               The multiplier satisfies (2^b+1)(2^{2b}-2^b+1) = 2^{3b}+1,
//               so the whole expression equals round(code / (2^b + 1)) with
//               half-away ties; exhaustive tests pin this identity.
//   direct:     code' = code >> b, same S' and Z' as equivalent. Cheapest,
//               but truncation biases values downward.
//   modified:   code' = code >> b, S' = 2^b * S, Z' = Z + (S' - S) / 2.
//               The zero-point shift recenters each bucket of 2^b source
//               levels on its mean, removing the truncation bias.
//
// Iterating a halving walks the ladder 16 -> 8 -> 4 -> 2. For the
// equivalent strategy the scale factors compose as
// (2^b+1)(2^{2b}+1)(2^{4b}+1) = (2^{8b}-1)/(2^b-1); a full 16 -> 2 chain
// multiplies S by 5 * 17 * 257 = 21845 = (2^16 - 1)/(2^2 - 1), exactly the
// scale a direct 2-bit quantization of the same range would use.

#include <cstdint>
#include <string>

#include "pqkv/error.hpp"
#include "pqkv/quant.hpp"

namespace pqkv {

enum class ShrinkStrategy : std::uint8_t { equivalent, direct, modified };

inline const char* strategy_name(ShrinkStrategy s) {
  switch (s) {
    case ShrinkStrategy::equivalent: return "equivalent";
    case ShrinkStrategy::direct: return "direct";
    case ShrinkStrategy::modified: return "modified";
  }
  return "?";
}

inline ShrinkStrategy strategy_from_name(const std::string& s) {
  if (s == "equivalent") return ShrinkStrategy::equivalent;
  if (s == "direct") return ShrinkStrategy::direct;
  if (s == "modified") return ShrinkStrategy::modified;
  throw FormatError("unknown shrink strategy '" + s + "'");
}

// One halving of a single code. `from` is the current width (4, 8 or 16).
inline std::uint32_t shrink_code_once(std::uint32_t code, BitWidth from,
                                      ShrinkStrategy st) {
  if (from == BitWidth::b2) throw NumericError("cannot shrink below 2 bits");
  if (code > max_code(from)) {
    throw NumericError("code " + std::to_string(code) + " exceeds " +
                       std::to_string(bits(from)) + "-bit range");
  }
  unsigned b = bits(from) / 2;
  if (st == ShrinkStrategy::equivalent) {
    std::uint64_t mult = (std::uint64_t{1} << (2 * b)) - (std::uint64_t{1} << b) + 1;
    std::uint64_t v = mult * (std::uint64_t{code} + (std::uint64_t{1} << (b - 1)));
    return static_cast<std::uint32_t>(v >> (3 * b));
  }
  return code >> b;
}

// Matching closed-form parameter update for one halving.
inline QuantParams shrink_params_once(const QuantParams& p, BitWidth from,
                                      ShrinkStrategy st) {
  if (from == BitWidth::b2) throw NumericError("cannot shrink below 2 bits");
  unsigned b = bits(from) / 2;
  double pow_b = static_cast<double>(std::uint64_t{1} << b);
  QuantParams q = p;
  if (st == ShrinkStrategy::modified) {
    q.scale = p.scale * pow_b;
    q.zero_point = p.zero_point + (q.scale - p.scale) / 2.0;
  } else {
    q.scale = p.scale * (pow_b + 1.0);
  }
  return q;
}

struct ShrinkResult {
  std::vector<std::uint32_t> codes;
  QuantParams params;
  BitWidth width = BitWidth::b8;
};

inline ShrinkResult shrink_group_once(const std::vector<std::uint32_t>& codes,
                                      const QuantParams& p, BitWidth from,
                                      ShrinkStrategy st) {
  ShrinkResult r;
  r.codes.resize(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    r.codes[i] = shrink_code_once(codes[i], from, st);
  }
  r.params = shrink_params_once(p, from, st);
  r.width = half_width(from);
  return r;
}

// Repeated halvings from `from` down to `to`.
inline ShrinkResult shrink_chain(std::vector<std::uint32_t> codes, QuantParams p,
                                 BitWidth from, BitWidth to, ShrinkStrategy st) {
  if (bits(to) > bits(from)) {
    throw NumericError("shrink target is wider than the source");
  }
  ShrinkResult r;
  r.codes = std::move(codes);
  r.params = p;
  r.width = from;
  while (r.width != to) {
    ShrinkResult step = shrink_group_once(r.codes, r.params, r.width, st);
    r = std::move(step);
  }
  return r;
}

}  // namespace pqkv
