#pragma once

// KV cache engines.
//
// BlockCache is the progressive engine. Appended tokens are staged: the cache
// keeps their float values but every read goes through a 16-bit quantize/
// dequantize round trip, so staging behaves exactly like stored 16-bit codes
// and is billed as such. When the byte ledger exceeds the budget the cache
// runs shrink epochs until it fits again. One epoch does one of two things:
//
//   * If staged tokens have fallen out of the attention window (the backlog),
//     the whole backlog becomes a new segment: fresh 16-bit group parameters
//     over the segment-local groups, then one shrink-chain step down to
//     8 bits. Group boundaries restart at the segment start.
//   * Otherwise every segment currently at the widest width above fbit
//     shrinks one tier in place via the configured strategy. Codes are
//     remapped integer-to-integer; parameters get their closed-form update.
//     No segment ever re-reads float data after creation.
//
// If neither move is possible (nothing staged outside the window, all
// segments already at fbit) the cache raises CapacityError instead of
// degrading further.
//
// The first keep_first tokens stay staged forever. Key groups run along the
// token axis per channel; value groups run along the channel axis per token.
// K and V share one segment list, so their widths move in lockstep.
//
// ImmediateCache is the comparison engine: tokens outside the retained
// window are quantized at fbit straight away (trailing key block re-derives
// its parameters while it is still filling, then freezes). ReferenceCache
// stores raw floats and only participates in accounting.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "pqkv/error.hpp"
#include "pqkv/quant.hpp"
#include "pqkv/shrink.hpp"
#include "pqkv/tensor.hpp"

namespace pqkv {

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

// Packed code bytes plus 8 bytes (two float32 parameters) per group.
inline std::uint64_t mem_bytes(std::uint64_t tokens, std::uint64_t heads,
                               std::uint64_t head_dim, BitWidth w, const GroupSpec& spec) {
  if (tokens == 0) return 0;
  std::uint64_t channels = heads * head_dim;
  if (channels == 0) return 0;
  std::uint64_t code_bytes = 0, groups = 0;
  if (spec.axis == GroupAxis::token) {
    std::uint64_t full = tokens / spec.group_size;
    std::uint64_t rem = tokens % spec.group_size;
    std::uint64_t per_channel = full * packed_code_bytes(spec.group_size, w) +
                                (rem ? packed_code_bytes(rem, w) : 0);
    code_bytes = channels * per_channel;
    groups = channels * blocks_along(tokens, spec.group_size);
  } else {
    std::uint64_t full = channels / spec.group_size;
    std::uint64_t rem = channels % spec.group_size;
    std::uint64_t per_token = full * packed_code_bytes(spec.group_size, w) +
                              (rem ? packed_code_bytes(rem, w) : 0);
    code_bytes = tokens * per_token;
    groups = tokens * blocks_along(channels, spec.group_size);
  }
  return code_bytes + 8 * groups;
}

// Raw unquantized storage at bits_per_element, no group parameters.
inline std::uint64_t mem_bytes_fp(std::uint64_t tokens, std::uint64_t heads,
                                  std::uint64_t head_dim, unsigned bits_per_element) {
  return tokens * heads * head_dim * bits_per_element / 8;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CacheConfig {
  BitWidth fbit = BitWidth::b2;
  std::uint64_t budget_bytes = 0;  // 0: derive from max_context, or unbounded
  std::size_t window = 128;
  std::size_t keep_first = 1;
  GroupSpec key_groups{GroupAxis::token, 128};
  GroupSpec value_groups{GroupAxis::channel, 128};
  ShrinkStrategy strategy = ShrinkStrategy::equivalent;
  std::uint64_t max_context = 0;

  void validate() const {
    if (fbit == BitWidth::b16) throw NumericError("fbit must be 2, 4 or 8");
    if (key_groups.group_size == 0 || value_groups.group_size == 0)
      throw NumericError("group_size must be positive");
  }
};

inline nlohmann::json cache_config_to_json(const CacheConfig& c) {
  return nlohmann::json{{"fbit", bits(c.fbit)},
                        {"budget_bytes", c.budget_bytes},
                        {"window", c.window},
                        {"keep_first", c.keep_first},
                        {"key_group_axis", axis_name(c.key_groups.axis)},
                        {"key_group_size", c.key_groups.group_size},
                        {"value_group_axis", axis_name(c.value_groups.axis)},
                        {"value_group_size", c.value_groups.group_size},
                        {"strategy", strategy_name(c.strategy)},
                        {"max_context", c.max_context}};
}

// Strict: unknown keys are rejected so config typos cannot pass silently.
inline CacheConfig cache_config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"fbit",           "budget_bytes",     "window",
                                "keep_first",     "key_group_axis",   "key_group_size",
                                "value_group_axis", "value_group_size", "strategy",
                                "max_context"};
  if (!j.is_object()) throw FormatError("cache config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw FormatError("unknown cache config key: " + it.key());
  }
  CacheConfig c;
  if (j.contains("fbit")) c.fbit = bitwidth_from_int(j.at("fbit").get<unsigned>());
  if (j.contains("budget_bytes")) c.budget_bytes = j.at("budget_bytes").get<std::uint64_t>();
  if (j.contains("window")) c.window = j.at("window").get<std::size_t>();
  if (j.contains("keep_first")) c.keep_first = j.at("keep_first").get<std::size_t>();
  if (j.contains("key_group_axis"))
    c.key_groups.axis = axis_from_name(j.at("key_group_axis").get<std::string>());
  if (j.contains("key_group_size"))
    c.key_groups.group_size = j.at("key_group_size").get<std::size_t>();
  if (j.contains("value_group_axis"))
    c.value_groups.axis = axis_from_name(j.at("value_group_axis").get<std::string>());
  if (j.contains("value_group_size"))
    c.value_groups.group_size = j.at("value_group_size").get<std::size_t>();
  if (j.contains("strategy"))
    c.strategy = strategy_from_name(j.at("strategy").get<std::string>());
  if (j.contains("max_context")) c.max_context = j.at("max_context").get<std::uint64_t>();
  c.validate();
  return c;
}

namespace detail {

// Bytes for a staged run of `len` tokens: 16-bit codes plus group parameters
// for both K (token-axis blocks from the run start) and V (per-token blocks).
inline std::uint64_t staged_run_bytes(std::uint64_t len, std::uint64_t channels,
                                      const GroupSpec& kg, const GroupSpec& vg) {
  if (len == 0) return 0;
  std::uint64_t k_groups = channels * blocks_along(len, kg.group_size);
  std::uint64_t v_groups = len * blocks_along(channels, vg.group_size);
  return 4 * len * channels + 8 * (k_groups + v_groups);
}

// Bytes for a quantized segment of `len` tokens at width w.
inline std::uint64_t segment_bytes(std::uint64_t len, std::uint64_t channels, BitWidth w,
                                   const GroupSpec& kg, const GroupSpec& vg) {
  if (len == 0) return 0;
  std::uint64_t kf = len / kg.group_size, krem = len % kg.group_size;
  std::uint64_t k_codes =
      channels * (kf * packed_code_bytes(kg.group_size, w) +
                  (krem ? packed_code_bytes(krem, w) : 0));
  std::uint64_t vf = channels / vg.group_size, vrem = channels % vg.group_size;
  std::uint64_t v_codes = len * (vf * packed_code_bytes(vg.group_size, w) +
                                 (vrem ? packed_code_bytes(vrem, w) : 0));
  std::uint64_t k_groups = channels * blocks_along(len, kg.group_size);
  std::uint64_t v_groups = len * blocks_along(channels, vg.group_size);
  return k_codes + v_codes + 8 * (k_groups + v_groups);
}

}  // namespace detail

// Budget sized so a max_context-token stream ends as: keep_first staged,
// window staged, everything between in fbit segments, plus headroom for the
// staged backlog that accumulates between shrink epochs and for per-segment
// parameter fragmentation.
inline std::uint64_t derive_budget(const CacheConfig& c, std::size_t heads,
                                   std::size_t head_dim) {
  if (c.max_context == 0) throw NumericError("derive_budget needs max_context > 0");
  std::uint64_t channels = std::uint64_t(heads) * head_dim;
  std::uint64_t n = c.max_context;
  std::uint64_t front = std::min<std::uint64_t>(c.keep_first, n);
  std::uint64_t win = std::min<std::uint64_t>(c.window, n - front);
  std::uint64_t mid = n - front - win;
  std::uint64_t slack = detail::staged_run_bytes(std::min<std::uint64_t>(n, 256), channels,
                                                 c.key_groups, c.value_groups);
  return detail::staged_run_bytes(front, channels, c.key_groups, c.value_groups) +
         detail::staged_run_bytes(win, channels, c.key_groups, c.value_groups) +
         detail::segment_bytes(mid, channels, c.fbit, c.key_groups, c.value_groups) + slack;
}

// ---------------------------------------------------------------------------
// Common interface
// ---------------------------------------------------------------------------

class KvCache {
 public:
  virtual ~KvCache() = default;

  // k and v each hold heads*head_dim values for one new token.
  virtual void append(const float* k, const float* v) = 0;

  virtual std::size_t tokens() const = 0;
  // Row-major [tokens x channels] views reflecting current storage widths.
  virtual const float* k_view() const = 0;
  virtual const float* v_view() const = 0;
  virtual std::uint64_t bytes_used() const = 0;
  // width (bits) -> token count; empty for raw-float storage.
  virtual std::map<unsigned, std::uint64_t> widths_present() const = 0;
  virtual nlohmann::json state_json() const = 0;

  void append(const std::vector<float>& k, const std::vector<float>& v, std::size_t channels) {
    if (k.size() != channels || v.size() != channels)
      throw ShapeError("append expects one token of heads*head_dim values");
    append(k.data(), v.data());
  }
};

// ---------------------------------------------------------------------------
// Progressive engine
// ---------------------------------------------------------------------------

struct SegGroup {
  QuantParams params;
  std::uint32_t len = 0;
  std::uint64_t byte_offset = 0;
};

struct Segment {
  std::uint64_t start = 0, end = 0;  // token range [start, end)
  BitWidth width = BitWidth::b8;
  std::vector<SegGroup> k_groups;  // channel-major: c * n_blocks + block
  std::vector<std::uint8_t> k_bytes;
  std::vector<SegGroup> v_groups;  // token-major: (t - start) * n_blocks + block
  std::vector<std::uint8_t> v_bytes;

  std::uint64_t tokens() const { return end - start; }
  std::uint64_t bytes() const {
    return k_bytes.size() + v_bytes.size() + 8 * (k_groups.size() + v_groups.size());
  }
  std::vector<std::uint32_t> k_codes(std::size_t g) const {
    const SegGroup& sg = k_groups.at(g);
    return unpack(k_bytes.data() + sg.byte_offset, packed_code_bytes(sg.len, width), sg.len,
                  width);
  }
  std::vector<std::uint32_t> v_codes(std::size_t g) const {
    const SegGroup& sg = v_groups.at(g);
    return unpack(v_bytes.data() + sg.byte_offset, packed_code_bytes(sg.len, width), sg.len,
                  width);
  }
};

struct EpochEvent {
  std::uint64_t step = 0;       // token count when the epoch ran
  unsigned from_width = 0;      // 16 for backlog conversion, else the shrunk width
  std::uint64_t bytes_before = 0;
  std::uint64_t bytes_after = 0;
};

class BlockCache : public KvCache {
 public:
  BlockCache(const CacheConfig& cfg, std::size_t heads, std::size_t head_dim)
      : cfg_(cfg), heads_(heads), head_dim_(head_dim), channels_(heads * head_dim) {
    cfg_.validate();
    if (channels_ == 0) throw ShapeError("cache needs heads*head_dim > 0");
    budget_ = cfg_.budget_bytes;
    if (budget_ == 0 && cfg_.max_context > 0) budget_ = derive_budget(cfg_, heads, head_dim);
  }

  using KvCache::append;

  void append(const float* k, const float* v) override {
    std::size_t idx = n_;
    fk_.insert(fk_.end(), k, k + channels_);
    fv_.insert(fv_.end(), v, v + channels_);
    mk_.resize(fk_.size());
    mv_.resize(fv_.size());
    ++n_;

    // The new token belongs to the front run while idx < keep_first;
    // otherwise it joins the tail run, whose blocks anchor at tail_begin().
    std::size_t run_start = idx < cfg_.keep_first ? 0 : tail_begin();
    remat_staged_k(run_start, n_, idx);
    remat_staged_v(idx);

    if (budget_ > 0) {
      while (bytes_used() > budget_) {
        if (!run_epoch()) {
          char msg[128];
          std::snprintf(msg, sizeof(msg),
                        "over budget at token %zu with every region at %u bits", n_,
                        unsigned(bits(cfg_.fbit)));
          throw CapacityError(msg, n_);
        }
      }
    }
  }

  std::size_t tokens() const override { return n_; }
  const float* k_view() const override { return mk_.data(); }
  const float* v_view() const override { return mv_.data(); }

  std::uint64_t bytes_used() const override {
    return detail::staged_run_bytes(front_len(), channels_, cfg_.key_groups,
                                    cfg_.value_groups) +
           detail::staged_run_bytes(n_ - tail_begin(), channels_, cfg_.key_groups,
                                    cfg_.value_groups) +
           seg_bytes_;
  }

  std::map<unsigned, std::uint64_t> widths_present() const override {
    std::map<unsigned, std::uint64_t> m;
    std::uint64_t staged = front_len() + (n_ - tail_begin());
    if (staged) m[16] += staged;
    for (const Segment& s : segs_) m[bits(s.width)] += s.tokens();
    return m;
  }

  nlohmann::json state_json() const override {
    nlohmann::json segs = nlohmann::json::array();
    for (const Segment& s : segs_)
      segs.push_back({{"start", s.start},
                      {"end", s.end},
                      {"width", bits(s.width)},
                      {"bytes", s.bytes()}});
    nlohmann::json epochs = nlohmann::json::array();
    for (const EpochEvent& e : epochs_)
      epochs.push_back({{"step", e.step},
                        {"from_width", e.from_width},
                        {"bytes_before", e.bytes_before},
                        {"bytes_after", e.bytes_after}});
    nlohmann::json widths = nlohmann::json::object();
    for (auto& [w, cnt] : widths_present()) widths[std::to_string(w)] = cnt;
    return nlohmann::json{{"policy", "progressive"},
                          {"tokens", n_},
                          {"bytes_used", bytes_used()},
                          {"budget_bytes", budget_},
                          {"staging",
                           {{"front_end", front_len()},
                            {"tail_start", tail_begin()},
                            {"tail_end", n_}}},
                          {"segments", segs},
                          {"epochs", epochs},
                          {"widths", widths}};
  }

  const CacheConfig& config() const { return cfg_; }
  std::uint64_t budget_bytes() const { return budget_; }
  const std::vector<Segment>& segments() const { return segs_; }
  const std::vector<EpochEvent>& epochs() const { return epochs_; }
  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t channels() const { return channels_; }

 private:
  std::size_t front_len() const { return std::min<std::size_t>(n_, cfg_.keep_first); }
  // First staged token after the front run and the segment region.
  std::size_t tail_begin() const { return std::max<std::size_t>(tail_start_, front_len()); }

  // One shrink epoch. Backlog conversion takes priority: the widest width
  // present in the non-retained region is 16 whenever staged tokens sit
  // outside the window.
  bool run_epoch() {
    std::uint64_t before = bytes_used();
    std::size_t backlog_end = n_ > cfg_.window ? n_ - cfg_.window : 0;
    std::size_t lo = tail_begin();
    if (backlog_end > lo) {
      convert_backlog(lo, backlog_end);
      epochs_.push_back({n_, 16, before, bytes_used()});
      return true;
    }
    unsigned widest = 0;
    for (const Segment& s : segs_)
      if (bits(s.width) > bits(cfg_.fbit)) widest = std::max(widest, unsigned(bits(s.width)));
    if (widest == 0) return false;
    for (Segment& s : segs_)
      if (bits(s.width) == widest) shrink_segment(s);
    epochs_.push_back({n_, widest, before, bytes_used()});
    return true;
  }

  // Staged tokens [lo, hi) become one new 8-bit segment. Codes are formed
  // exactly as the staging holds them (16-bit parameters over the segment's
  // own groups) and then pushed one tier down the shrink chain.
  void convert_backlog(std::size_t lo, std::size_t hi) {
    Segment seg;
    seg.start = lo;
    seg.end = hi;
    seg.width = half_width(BitWidth::b16);
    std::size_t len = hi - lo;
    std::size_t gk = cfg_.key_groups.group_size;
    std::size_t nbk = blocks_along(len, gk);
    std::vector<std::uint32_t> codes;
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t b = 0; b < nbk; ++b) {
        std::size_t bs = lo + b * gk;
        std::size_t blen = std::min(gk, hi - bs);
        const float* x = fk_.data() + bs * channels_ + c;
        QuantParams p16 = compute_params(x, channels_, blen, BitWidth::b16);
        codes.resize(blen);
        quantize_with_params(x, channels_, blen, BitWidth::b16, p16, codes.data());
        ShrinkResult r = shrink_group_once(codes, p16, BitWidth::b16, cfg_.strategy);
        SegGroup sg{r.params, std::uint32_t(blen), seg.k_bytes.size()};
        pack_append(r.codes, seg.width, seg.k_bytes);
        seg.k_groups.push_back(sg);
      }
    }
    std::size_t gv = cfg_.value_groups.group_size;
    std::size_t nbv = blocks_along(channels_, gv);
    for (std::size_t t = lo; t < hi; ++t) {
      for (std::size_t b = 0; b < nbv; ++b) {
        std::size_t cs = b * gv;
        std::size_t clen = std::min(gv, channels_ - cs);
        const float* x = fv_.data() + t * channels_ + cs;
        QuantParams p16 = compute_params(x, 1, clen, BitWidth::b16);
        codes.resize(clen);
        quantize_with_params(x, 1, clen, BitWidth::b16, p16, codes.data());
        ShrinkResult r = shrink_group_once(codes, p16, BitWidth::b16, cfg_.strategy);
        SegGroup sg{r.params, std::uint32_t(clen), seg.v_bytes.size()};
        pack_append(r.codes, seg.width, seg.v_bytes);
        seg.v_groups.push_back(sg);
      }
    }
    seg_bytes_ += seg.bytes();
    materialize_segment(seg);
    segs_.push_back(std::move(seg));
    tail_start_ = hi;
    // Tail groups regrouped from the new boundary: rebuild the whole tail view.
    remat_staged_k(tail_start_, n_, tail_start_);
  }

  void shrink_segment(Segment& seg) {
    seg_bytes_ -= seg.bytes();
    BitWidth to = half_width(seg.width);
    std::vector<std::uint8_t> kb, vb;
    for (SegGroup& sg : seg.k_groups) {
      std::vector<std::uint32_t> codes =
          unpack(seg.k_bytes.data() + sg.byte_offset, packed_code_bytes(sg.len, seg.width),
                 sg.len, seg.width);
      ShrinkResult r = shrink_group_once(codes, sg.params, seg.width, cfg_.strategy);
      sg.params = r.params;
      sg.byte_offset = kb.size();
      pack_append(r.codes, to, kb);
    }
    for (SegGroup& sg : seg.v_groups) {
      std::vector<std::uint32_t> codes =
          unpack(seg.v_bytes.data() + sg.byte_offset, packed_code_bytes(sg.len, seg.width),
                 sg.len, seg.width);
      ShrinkResult r = shrink_group_once(codes, sg.params, seg.width, cfg_.strategy);
      sg.params = r.params;
      sg.byte_offset = vb.size();
      pack_append(r.codes, to, vb);
    }
    seg.k_bytes = std::move(kb);
    seg.v_bytes = std::move(vb);
    seg.width = to;
    seg_bytes_ += seg.bytes();
    materialize_segment(seg);
  }

  void materialize_segment(const Segment& seg) {
    std::size_t len = seg.tokens();
    std::size_t gk = cfg_.key_groups.group_size;
    std::size_t nbk = blocks_along(len, gk);
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t b = 0; b < nbk; ++b) {
        const SegGroup& sg = seg.k_groups[c * nbk + b];
        std::vector<std::uint32_t> codes = seg.k_codes(c * nbk + b);
        std::size_t bs = seg.start + b * gk;
        for (std::size_t i = 0; i < sg.len; ++i)
          mk_[(bs + i) * channels_ + c] = dequantize_code(codes[i], sg.params);
      }
    }
    std::size_t gv = cfg_.value_groups.group_size;
    std::size_t nbv = blocks_along(channels_, gv);
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t b = 0; b < nbv; ++b) {
        const SegGroup& sg = seg.v_groups[t * nbv + b];
        std::vector<std::uint32_t> codes = seg.v_codes(t * nbv + b);
        std::size_t base = (seg.start + t) * channels_ + b * gv;
        for (std::size_t i = 0; i < sg.len; ++i)
          mv_[base + i] = dequantize_code(codes[i], sg.params);
      }
    }
  }

  // Refresh the 16-bit materialization of staged K blocks in the run
  // [run_start, run_end) that contain tokens >= from_token.
  void remat_staged_k(std::size_t run_start, std::size_t run_end, std::size_t from_token) {
    if (run_end <= run_start) return;
    std::size_t gk = cfg_.key_groups.group_size;
    std::size_t first_block =
        from_token > run_start ? (from_token - run_start) / gk : 0;
    std::vector<std::uint32_t> codes(gk);
    for (std::size_t bs = run_start + first_block * gk; bs < run_end; bs += gk) {
      std::size_t blen = std::min(gk, run_end - bs);
      for (std::size_t c = 0; c < channels_; ++c) {
        const float* x = fk_.data() + bs * channels_ + c;
        QuantParams p = compute_params(x, channels_, blen, BitWidth::b16);
        quantize_with_params(x, channels_, blen, BitWidth::b16, p, codes.data());
        for (std::size_t i = 0; i < blen; ++i)
          mk_[(bs + i) * channels_ + c] = dequantize_code(codes[i], p);
      }
    }
  }

  void remat_staged_v(std::size_t t) {
    std::size_t gv = cfg_.value_groups.group_size;
    std::vector<std::uint32_t> codes(gv);
    for (std::size_t cs = 0; cs < channels_; cs += gv) {
      std::size_t clen = std::min(gv, channels_ - cs);
      const float* x = fv_.data() + t * channels_ + cs;
      QuantParams p = compute_params(x, 1, clen, BitWidth::b16);
      quantize_with_params(x, 1, clen, BitWidth::b16, p, codes.data());
      for (std::size_t i = 0; i < clen; ++i)
        mv_[t * channels_ + cs + i] = dequantize_code(codes[i], p);
    }
  }

  CacheConfig cfg_;
  std::size_t heads_, head_dim_, channels_;
  std::uint64_t budget_ = 0;
  std::size_t n_ = 0;
  std::size_t tail_start_ = 0;  // first token after the segment region
  std::vector<float> fk_, fv_;  // originals, read only through 16-bit staging
  std::vector<float> mk_, mv_;  // materialized views
  std::vector<Segment> segs_;
  std::uint64_t seg_bytes_ = 0;
  std::vector<EpochEvent> epochs_;
};

// ---------------------------------------------------------------------------
// Quantize-on-arrival comparison engine
// ---------------------------------------------------------------------------

class ImmediateCache : public KvCache {
 public:
  ImmediateCache(const CacheConfig& cfg, std::size_t heads, std::size_t head_dim)
      : cfg_(cfg), heads_(heads), head_dim_(head_dim), channels_(heads * head_dim) {
    cfg_.validate();
    if (channels_ == 0) throw ShapeError("cache needs heads*head_dim > 0");
    budget_ = cfg_.budget_bytes;
    if (budget_ == 0 && cfg_.max_context > 0) budget_ = derive_budget(cfg_, heads, head_dim);
  }

  using KvCache::append;

  void append(const float* k, const float* v) override {
    std::size_t idx = n_;
    fk_.insert(fk_.end(), k, k + channels_);
    fv_.insert(fv_.end(), v, v + channels_);
    mk_.resize(fk_.size());
    mv_.resize(fv_.size());
    ++n_;

    std::size_t re_old = region_end_;
    region_end_ = std::max<std::size_t>(front_len(), n_ > cfg_.window ? n_ - cfg_.window : 0);
    if (idx < front_len()) {
      remat_staged_k(0, front_len(), idx);
      remat_staged_v16(idx);
    } else {
      remat_staged_v16(idx);
    }
    // Tokens that crossed into the quantized region get their V groups at
    // fbit; the trailing K block re-derives parameters while still filling.
    // region_end_ tracks max(front_len, ...), so while the front is still
    // filling it can move without any token actually entering the region.
    for (std::size_t t = std::max(re_old, front_len()); t < region_end_; ++t)
      remat_region_v(t);
    if (region_end_ > cfg_.keep_first) remat_region_k_trailing();
    // The staged tail is anchored at region_end_, which moves: rebuild it.
    if (n_ > region_end_) remat_staged_k(region_end_, n_, region_end_);

    if (budget_ > 0 && bytes_used() > budget_) {
      char msg[128];
      std::snprintf(msg, sizeof(msg), "over budget at token %zu at %u bits", n_,
                    unsigned(bits(cfg_.fbit)));
      throw CapacityError(msg, n_);
    }
  }

  std::size_t tokens() const override { return n_; }
  const float* k_view() const override { return mk_.data(); }
  const float* v_view() const override { return mv_.data(); }

  std::uint64_t bytes_used() const override {
    std::size_t fe = front_len();
    std::uint64_t region_len = region_end_ > fe ? region_end_ - fe : 0;
    return detail::staged_run_bytes(fe, channels_, cfg_.key_groups, cfg_.value_groups) +
           detail::staged_run_bytes(n_ - region_end_, channels_, cfg_.key_groups,
                                    cfg_.value_groups) +
           detail::segment_bytes(region_len, channels_, cfg_.fbit, cfg_.key_groups,
                                 cfg_.value_groups);
  }

  std::map<unsigned, std::uint64_t> widths_present() const override {
    std::map<unsigned, std::uint64_t> m;
    std::size_t fe = front_len();
    std::uint64_t staged = fe + (n_ - region_end_);
    if (staged) m[16] += staged;
    if (region_end_ > fe) m[bits(cfg_.fbit)] += region_end_ - fe;
    return m;
  }

  nlohmann::json state_json() const override {
    nlohmann::json widths = nlohmann::json::object();
    for (auto& [w, cnt] : widths_present()) widths[std::to_string(w)] = cnt;
    return nlohmann::json{{"policy", "immediate"},
                          {"tokens", n_},
                          {"bytes_used", bytes_used()},
                          {"budget_bytes", budget_},
                          {"region", {{"start", front_len()}, {"end", region_end_}}},
                          {"widths", widths}};
  }

 private:
  std::size_t front_len() const { return std::min<std::size_t>(n_, cfg_.keep_first); }

  void remat_staged_k(std::size_t run_start, std::size_t run_end, std::size_t from_token) {
    if (run_end <= run_start) return;
    std::size_t gk = cfg_.key_groups.group_size;
    std::size_t first_block = from_token > run_start ? (from_token - run_start) / gk : 0;
    std::vector<std::uint32_t> codes(gk);
    for (std::size_t bs = run_start + first_block * gk; bs < run_end; bs += gk) {
      std::size_t blen = std::min(gk, run_end - bs);
      for (std::size_t c = 0; c < channels_; ++c) {
        const float* x = fk_.data() + bs * channels_ + c;
        QuantParams p = compute_params(x, channels_, blen, BitWidth::b16);
        quantize_with_params(x, channels_, blen, BitWidth::b16, p, codes.data());
        for (std::size_t i = 0; i < blen; ++i)
          mk_[(bs + i) * channels_ + c] = dequantize_code(codes[i], p);
      }
    }
  }

  void remat_staged_v16(std::size_t t) {
    std::size_t gv = cfg_.value_groups.group_size;
    std::vector<std::uint32_t> codes(gv);
    for (std::size_t cs = 0; cs < channels_; cs += gv) {
      std::size_t clen = std::min(gv, channels_ - cs);
      const float* x = fv_.data() + t * channels_ + cs;
      QuantParams p = compute_params(x, 1, clen, BitWidth::b16);
      quantize_with_params(x, 1, clen, BitWidth::b16, p, codes.data());
      for (std::size_t i = 0; i < clen; ++i)
        mv_[t * channels_ + cs + i] = dequantize_code(codes[i], p);
    }
  }

  void remat_region_v(std::size_t t) {
    std::size_t gv = cfg_.value_groups.group_size;
    std::vector<std::uint32_t> codes(gv);
    for (std::size_t cs = 0; cs < channels_; cs += gv) {
      std::size_t clen = std::min(gv, channels_ - cs);
      const float* x = fv_.data() + t * channels_ + cs;
      QuantParams p = compute_params(x, 1, clen, cfg_.fbit);
      quantize_with_params(x, 1, clen, cfg_.fbit, p, codes.data());
      for (std::size_t i = 0; i < clen; ++i)
        mv_[t * channels_ + cs + i] = dequantize_code(codes[i], p);
    }
  }

  // Region K blocks are anchored at keep_first. Only the block containing
  // region_end_-1 can still change; earlier blocks are complete and frozen.
  void remat_region_k_trailing() {
    std::size_t gk = cfg_.key_groups.group_size;
    std::size_t rs = cfg_.keep_first;
    std::size_t last = region_end_ - 1;
    std::size_t bs = rs + ((last - rs) / gk) * gk;
    std::size_t blen = region_end_ - bs;
    std::vector<std::uint32_t> codes(blen);
    for (std::size_t c = 0; c < channels_; ++c) {
      const float* x = fk_.data() + bs * channels_ + c;
      QuantParams p = compute_params(x, channels_, blen, cfg_.fbit);
      quantize_with_params(x, channels_, blen, cfg_.fbit, p, codes.data());
      for (std::size_t i = 0; i < blen; ++i)
        mk_[(bs + i) * channels_ + c] = dequantize_code(codes[i], p);
    }
  }

  CacheConfig cfg_;
  std::size_t heads_, head_dim_, channels_;
  std::uint64_t budget_ = 0;
  std::size_t n_ = 0;
  std::size_t region_end_ = 0;  // quantized region is [keep_first, region_end_)
  std::vector<float> fk_, fv_;
  std::vector<float> mk_, mv_;
};

// ---------------------------------------------------------------------------
// Raw-float reference
// ---------------------------------------------------------------------------

class ReferenceCache : public KvCache {
 public:
  ReferenceCache(std::size_t heads, std::size_t head_dim)
      : channels_(heads * head_dim) {
    if (channels_ == 0) throw ShapeError("cache needs heads*head_dim > 0");
  }

  using KvCache::append;

  void append(const float* k, const float* v) override {
    fk_.insert(fk_.end(), k, k + channels_);
    fv_.insert(fv_.end(), v, v + channels_);
    ++n_;
  }

  std::size_t tokens() const override { return n_; }
  const float* k_view() const override { return fk_.data(); }
  const float* v_view() const override { return fv_.data(); }
  // Accounted as 16 bits per element with no side data.
  std::uint64_t bytes_used() const override { return 2 * std::uint64_t(n_) * channels_; }
  std::map<unsigned, std::uint64_t> widths_present() const override { return {}; }
  nlohmann::json state_json() const override {
    return nlohmann::json{
        {"policy", "fp_reference"}, {"tokens", n_}, {"bytes_used", bytes_used()}};
  }

 private:
  std::size_t channels_;
  std::size_t n_ = 0;
  std::vector<float> fk_, fv_;
};

}  // namespace pqkv
