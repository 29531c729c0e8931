#pragma once

// Decode-loop simulation: streams synthetic KV tokens into one cache per
// block, issues a fresh query every step, and logs how far each policy's
// attention output drifts from an exact float cache fed the same stream.
// Queries come from the same generator family as the keys but on their own
// seed lane, so changing the policy never perturbs the data.

#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pqkv/attention.hpp"
#include "pqkv/cache.hpp"
#include "pqkv/error.hpp"
#include "pqkv/shrink.hpp"
#include "pqkv/synth.hpp"

namespace pqkv {

enum class Policy { fp_reference, immediate, progressive };

inline std::string policy_name(Policy p) {
  switch (p) {
    case Policy::fp_reference: return "fp_reference";
    case Policy::immediate: return "immediate";
    default: return "progressive";
  }
}

inline Policy policy_from_name(const std::string& s) {
  if (s == "fp_reference") return Policy::fp_reference;
  if (s == "immediate") return Policy::immediate;
  if (s == "progressive") return Policy::progressive;
  throw FormatError("unknown policy: " + s);
}

struct SimConfig {
  Policy policy = Policy::progressive;
  std::uint64_t seed = 1;
  std::size_t steps = 512;
  std::size_t blocks = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  CacheConfig cache;
  std::vector<std::size_t> outlier_channels;
  double outlier_scale = 1.0;

  void validate() const {
    if (steps == 0) throw ShapeError("simulation needs at least one step");
    if (blocks == 0) throw ShapeError("simulation needs at least one block");
    if (heads == 0 || head_dim == 0) throw ShapeError("head geometry must be nonzero");
    cache.validate();
  }
};

inline nlohmann::json sim_config_to_json(const SimConfig& c) {
  return nlohmann::json{{"policy", policy_name(c.policy)},
                        {"seed", c.seed},
                        {"steps", c.steps},
                        {"blocks", c.blocks},
                        {"heads", c.heads},
                        {"head_dim", c.head_dim},
                        {"cache", cache_config_to_json(c.cache)},
                        {"outlier_channels", c.outlier_channels},
                        {"outlier_scale", c.outlier_scale}};
}

inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("simulation config must be a JSON object");
  static const char* known[] = {"policy", "seed",  "steps",            "blocks",
                                "heads",  "head_dim", "cache",         "outlier_channels",
                                "outlier_scale"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw FormatError("unknown simulation config key: " + it.key());
  }
  SimConfig c;
  if (j.contains("policy")) c.policy = policy_from_name(j.at("policy").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("steps")) c.steps = j.at("steps").get<std::size_t>();
  if (j.contains("blocks")) c.blocks = j.at("blocks").get<std::size_t>();
  if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
  if (j.contains("head_dim")) c.head_dim = j.at("head_dim").get<std::size_t>();
  if (j.contains("cache")) c.cache = cache_config_from_json(j.at("cache"));
  if (j.contains("outlier_channels"))
    c.outlier_channels = j.at("outlier_channels").get<std::vector<std::size_t>>();
  if (j.contains("outlier_scale")) c.outlier_scale = j.at("outlier_scale").get<double>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

struct TraceRow {
  std::uint64_t step = 0;  // 0-based decode step
  std::size_t block = 0;
  std::uint64_t bytes = 0;
  std::map<unsigned, std::uint64_t> widths;  // empty means raw float storage
  double mse = 0.0;
  double max_abs = 0.0;
  double cum_mse = 0.0;  // running mean of mse over steps so far
};

struct DecodeTrace {
  SimConfig config;
  std::vector<TraceRow> rows;  // step-major, then block

  std::uint64_t peak_bytes() const {
    std::uint64_t peak = 0;
    for (const TraceRow& r : rows) peak = std::max(peak, r.bytes);
    return peak;
  }
};

inline std::string width_map_string(const std::map<unsigned, std::uint64_t>& widths) {
  if (widths.empty()) return "fp";
  std::string out;
  for (auto it = widths.rbegin(); it != widths.rend(); ++it) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s%u:%llu", out.empty() ? "" : ";", it->first,
                  (unsigned long long)it->second);
    out += buf;
  }
  return out;
}

inline std::map<unsigned, std::uint64_t> width_map_parse(const std::string& s) {
  std::map<unsigned, std::uint64_t> widths;
  if (s == "fp") return widths;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ';')) {
    unsigned w;
    unsigned long long n;
    if (std::sscanf(part.c_str(), "%u:%llu", &w, &n) != 2)
      throw FormatError("bad width map entry: " + part);
    widths[w] = n;
  }
  if (widths.empty()) throw FormatError("empty width map");
  return widths;
}

inline const char* kTraceCsvHeader = "step,block,bytes,width_map,mse,max_abs,cum_mse";

inline std::string trace_to_csv(const DecodeTrace& t) {
  std::string out = kTraceCsvHeader;
  out += '\n';
  for (const TraceRow& r : t.rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%zu,%llu,%s,%.17g,%.17g,%.17g\n",
                  (unsigned long long)r.step, r.block, (unsigned long long)r.bytes,
                  width_map_string(r.widths).c_str(), r.mse, r.max_abs, r.cum_mse);
    out += buf;
  }
  return out;
}

// Parses what trace_to_csv wrote; the config is not part of the CSV.
inline std::vector<TraceRow> trace_rows_from_csv(const std::string& csv) {
  std::stringstream ss(csv);
  std::string line;
  if (!std::getline(ss, line) || line != kTraceCsvHeader)
    throw FormatError("missing or wrong trace header");
  std::vector<TraceRow> rows;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    TraceRow r;
    char wm[128];
    unsigned long long step, bytes;
    std::size_t block;
    if (std::sscanf(line.c_str(), "%llu,%zu,%llu,%127[^,],%lg,%lg,%lg", &step, &block,
                    &bytes, wm, &r.mse, &r.max_abs, &r.cum_mse) != 7)
      throw FormatError("bad trace row: " + line);
    r.step = step;
    r.block = block;
    r.bytes = bytes;
    r.widths = width_map_parse(wm);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw FormatError("trace has no rows");
  return rows;
}

inline nlohmann::json trace_to_json(const DecodeTrace& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const TraceRow& r : t.rows) {
    rows.push_back(nlohmann::json{{"step", r.step},
                                  {"block", r.block},
                                  {"bytes", r.bytes},
                                  {"width_map", width_map_string(r.widths)},
                                  {"mse", r.mse},
                                  {"max_abs", r.max_abs},
                                  {"cum_mse", r.cum_mse}});
  }
  return nlohmann::json{{"config", sim_config_to_json(t.config)}, {"rows", rows}};
}

inline DecodeTrace trace_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("config") || !j.contains("rows") || j.size() != 2)
    throw FormatError("trace must hold exactly config and rows");
  DecodeTrace t;
  t.config = sim_config_from_json(j.at("config"));
  for (const nlohmann::json& rj : j.at("rows")) {
    TraceRow r;
    r.step = rj.at("step").get<std::uint64_t>();
    r.block = rj.at("block").get<std::size_t>();
    r.bytes = rj.at("bytes").get<std::uint64_t>();
    r.widths = width_map_parse(rj.at("width_map").get<std::string>());
    r.mse = rj.at("mse").get<double>();
    r.max_abs = rj.at("max_abs").get<double>();
    r.cum_mse = rj.at("cum_mse").get<double>();
    t.rows.push_back(std::move(r));
  }
  if (t.rows.empty()) throw FormatError("trace has no rows");
  return t;
}

// ---------------------------------------------------------------------------
// Decode loop
// ---------------------------------------------------------------------------

namespace detail {

inline std::unique_ptr<KvCache> make_cache(const SimConfig& c) {
  switch (c.policy) {
    case Policy::fp_reference:
      return std::make_unique<ReferenceCache>(c.heads, c.head_dim);
    case Policy::immediate:
      return std::make_unique<ImmediateCache>(c.cache, c.heads, c.head_dim);
    default:
      return std::make_unique<BlockCache>(c.cache, c.heads, c.head_dim);
  }
}

inline KvStreamConfig block_stream(const SimConfig& c, std::size_t block,
                                   std::uint64_t lane) {
  KvStreamConfig sc;
  sc.seed = splitmix64(c.seed ^ (0xb10c << 8)) ^ (lane * 0x10001ull + block);
  sc.heads = c.heads;
  sc.head_dim = c.head_dim;
  sc.outlier_channels = c.outlier_channels;
  sc.outlier_scale = c.outlier_scale;
  return sc;
}

}  // namespace detail

// block_fbits, when given, overrides the floor width per block (one entry per
// block), the shape an allocation plan hands back.
inline DecodeTrace run_decode(const SimConfig& cfg,
                              const std::vector<BitWidth>* block_fbits = nullptr) {
  cfg.validate();
  if (block_fbits && block_fbits->size() != cfg.blocks)
    throw ShapeError("allocation plan size does not match block count");
  std::size_t channels = cfg.heads * cfg.head_dim;

  struct Lane {
    std::unique_ptr<KvCache> cache;
    std::unique_ptr<ReferenceCache> exact;
    std::unique_ptr<KvStreamGen> kv, queries;
    double mse_sum = 0.0;
  };
  std::vector<Lane> lanes(cfg.blocks);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    SimConfig lane_cfg = cfg;
    if (block_fbits) lane_cfg.cache.fbit = (*block_fbits)[b];
    lane_cfg.cache.validate();
    lanes[b].cache = detail::make_cache(lane_cfg);
    lanes[b].exact = std::make_unique<ReferenceCache>(cfg.heads, cfg.head_dim);
    lanes[b].kv = std::make_unique<KvStreamGen>(detail::block_stream(cfg, b, 1));
    lanes[b].queries = std::make_unique<KvStreamGen>(detail::block_stream(cfg, b, 2));
  }

  DecodeTrace trace;
  trace.config = cfg;
  trace.rows.reserve(cfg.steps * cfg.blocks);
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      Lane& lane = lanes[b];
      KvStep kv = lane.kv->next();
      KvStep qs = lane.queries->next();
      lane.cache->append(kv.k.data(), kv.v.data());
      lane.exact->append(kv.k.data(), kv.v.data());

      std::size_t n = lane.cache->tokens();
      std::vector<double> got = attention_decode(qs.k.data(), lane.cache->k_view(),
                                                 lane.cache->v_view(), n, cfg.heads,
                                                 cfg.head_dim);
      std::vector<double> want = attention_decode(qs.k.data(), lane.exact->k_view(),
                                                  lane.exact->v_view(), n, cfg.heads,
                                                  cfg.head_dim);
      TraceRow row;
      row.step = step;
      row.block = b;
      row.bytes = lane.cache->bytes_used();
      row.widths = lane.cache->widths_present();
      for (std::size_t i = 0; i < channels; ++i) {
        double d = got[i] - want[i];
        row.mse += d * d;
        row.max_abs = std::max(row.max_abs, std::abs(d));
      }
      row.mse /= double(channels);
      lane.mse_sum += row.mse;
      row.cum_mse = lane.mse_sum / double(step + 1);
      trace.rows.push_back(std::move(row));
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Strategy comparison
// ---------------------------------------------------------------------------

struct StrategyReport {
  ShrinkStrategy strategy = ShrinkStrategy::equivalent;
  double k_mse = 0.0;       // final stored K against the float stream
  double v_mse = 0.0;
  double attn_mse = 0.0;    // last-step attention error
  double code_exact = 1.0;  // stored segment codes equal to one-shot requantization
  double code_within_one = 1.0;
  std::uint64_t segment_tokens = 0;
};

inline nlohmann::json strategy_report_to_json(const StrategyReport& r) {
  return nlohmann::json{{"strategy", strategy_name(r.strategy)},
                        {"k_mse", r.k_mse},
                        {"v_mse", r.v_mse},
                        {"attn_mse", r.attn_mse},
                        {"code_exact", r.code_exact},
                        {"code_within_one", r.code_within_one},
                        {"segment_tokens", r.segment_tokens}};
}

namespace detail {

// Requantizes the original floats of one stored group in a single shot at the
// segment's final width and counts code agreement with the chained path.
inline void count_code_match(const std::vector<std::uint32_t>& stored,
                             const float* first, std::size_t stride, BitWidth w,
                             std::uint64_t& exact, std::uint64_t& near,
                             std::uint64_t& total) {
  QuantParams p = compute_params(first, stride, stored.size(), w);
  std::vector<std::uint32_t> one_shot(stored.size());
  quantize_with_params(first, stride, stored.size(), w, p, one_shot.data());
  for (std::size_t i = 0; i < stored.size(); ++i) {
    std::uint64_t diff = stored[i] > one_shot[i] ? stored[i] - one_shot[i]
                                                 : one_shot[i] - stored[i];
    exact += diff == 0;
    near += diff <= 1;
    ++total;
  }
}

}  // namespace detail

// Runs the same stream through the progressive cache once per shrink
// strategy. Rankings in the report are informational; the hard guarantees
// (scale chaining, code agreement for the equivalent strategy) are asserted
// by the tests that consume this.
inline std::vector<StrategyReport> compare_strategies(const SimConfig& base) {
  base.validate();
  std::size_t channels = base.heads * base.head_dim;

  auto stream_cfg = detail::block_stream(base, 0, 1);
  std::vector<KvStep> stream = synth_kv_stream(stream_cfg, base.steps);
  KvStreamGen queries(detail::block_stream(base, 0, 2));
  std::vector<float> q_last;
  for (std::size_t s = 0; s < base.steps; ++s) q_last = queries.next().k;

  std::vector<float> flat_k(base.steps * channels), flat_v(base.steps * channels);
  for (std::size_t s = 0; s < base.steps; ++s) {
    std::copy(stream[s].k.begin(), stream[s].k.end(), flat_k.begin() + s * channels);
    std::copy(stream[s].v.begin(), stream[s].v.end(), flat_v.begin() + s * channels);
  }
  std::vector<double> want =
      attention_decode(q_last.data(), flat_k.data(), flat_v.data(), base.steps,
                       base.heads, base.head_dim);

  std::vector<StrategyReport> out;
  for (ShrinkStrategy st :
       {ShrinkStrategy::equivalent, ShrinkStrategy::direct, ShrinkStrategy::modified}) {
    SimConfig cfg = base;
    cfg.cache.strategy = st;
    BlockCache cache(cfg.cache, cfg.heads, cfg.head_dim);
    for (std::size_t s = 0; s < base.steps; ++s)
      cache.append(stream[s].k.data(), stream[s].v.data());

    StrategyReport rep;
    rep.strategy = st;
    const float* mk = cache.k_view();
    const float* mv = cache.v_view();
    for (std::size_t i = 0; i < flat_k.size(); ++i) {
      double dk = double(mk[i]) - double(flat_k[i]);
      double dv = double(mv[i]) - double(flat_v[i]);
      rep.k_mse += dk * dk;
      rep.v_mse += dv * dv;
    }
    rep.k_mse /= double(flat_k.size());
    rep.v_mse /= double(flat_v.size());

    std::vector<double> got = attention_decode(q_last.data(), mk, mv, base.steps,
                                               base.heads, base.head_dim);
    for (std::size_t i = 0; i < channels; ++i) {
      double d = got[i] - want[i];
      rep.attn_mse += d * d;
    }
    rep.attn_mse /= double(channels);

    std::uint64_t exact = 0, near = 0, total = 0;
    std::size_t gk = cfg.cache.key_groups.group_size;
    std::size_t gv = cfg.cache.value_groups.group_size;
    for (const Segment& seg : cache.segments()) {
      rep.segment_tokens += seg.tokens();
      std::size_t nbk = (seg.tokens() + gk - 1) / gk;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t b = 0; b < nbk; ++b) {
          std::vector<std::uint32_t> codes = seg.k_codes(c * nbk + b);
          const float* first = flat_k.data() + (seg.start + b * gk) * channels + c;
          detail::count_code_match(codes, first, channels, seg.width, exact, near, total);
        }
      std::size_t nbv = (channels + gv - 1) / gv;
      for (std::uint64_t t = seg.start; t < seg.end; ++t)
        for (std::size_t b = 0; b < nbv; ++b) {
          std::vector<std::uint32_t> codes = seg.v_codes((t - seg.start) * nbv + b);
          const float* first = flat_v.data() + t * channels + b * gv;
          detail::count_code_match(codes, first, 1, seg.width, exact, near, total);
        }
    }
    if (total > 0) {
      rep.code_exact = double(exact) / double(total);
      rep.code_within_one = double(near) / double(total);
    }
    out.push_back(rep);
  }
  return out;
}

}  // namespace pqkv
