// Command line front end for the cache toolkit. Exit codes: 0 on success,
// 1 for usage and input problems, 2 when a run is infeasible at the given
// budget (allocation below the feasibility floor, or the cache running out
// of shrink room mid-stream).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pqkv/pqkv.hpp"

using namespace pqkv;

namespace {

bool g_json_errors = false;

void report_error(const char* kind, const std::string& msg,
                  const std::function<void(nlohmann::json&)>& extra = {}) {
  if (g_json_errors) {
    nlohmann::json j{{"error", kind}, {"message", msg}};
    if (extra) extra(j);
    std::cerr << j.dump() << "\n";
  } else {
    std::cerr << "pqkv: " << msg << "\n";
  }
}

void write_out(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
    if (!content.empty() && content.back() != '\n') std::cout << "\n";
    return;
  }
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw Error("cannot open for writing: " + path);
  f << content;
}

nlohmann::json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open for reading: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return j;
}

GroupAxis axis_from_name(const std::string& s) {
  if (s == "token") return GroupAxis::token;
  if (s == "channel") return GroupAxis::channel;
  throw FormatError("unknown group axis: " + s + " (want token or channel)");
}

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                         const char* what) {
  if (!j.is_object()) throw FormatError(std::string(what) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw FormatError(std::string("unknown ") + what + " key: " + it.key());
  }
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

struct QuantizeOpts {
  std::string in, out;
  int bits = 4;
  std::string axis = "token";
  std::size_t group_size = 128;
};

int run_quantize(const QuantizeOpts& o) {
  Tensor t = read_tensor(o.in);
  BitWidth w = bitwidth_from_int(o.bits);
  GroupSpec spec{axis_from_name(o.axis), o.group_size};
  if (spec.group_size == 0) throw ShapeError("group size must be positive");
  PackedTensor p = quantize_tensor(t, w, spec);
  save_packed(p, o.out);
  nlohmann::json summary{{"input", o.in},
                         {"dims", t.dims()},
                         {"bits", o.bits},
                         {"axis", o.axis},
                         {"group_size", o.group_size},
                         {"groups", p.num_groups()},
                         {"code_bytes", p.packed_byte_length()},
                         {"mem_bytes", mem_bytes(t.tokens(), 1, t.channels(), w, spec)},
                         {"files",
                          {o.out + ".json", o.out + ".codes.pmkt", o.out + ".scales.pmkt",
                           o.out + ".zero_points.pmkt"}}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// shrink-ablate
// ---------------------------------------------------------------------------

struct AblateOpts {
  int from_bits = 8;
  std::string out;
};

int run_shrink_ablate(const AblateOpts& o) {
  BitWidth from = bitwidth_from_int(o.from_bits);
  if (from == BitWidth::b2) throw NumericError("2-bit codes have no narrower target");
  std::string csv = "code,equivalent,direct,modified\n";
  for (std::uint32_t code = 0; code <= max_code(from); ++code) {
    char buf[80];
    std::snprintf(buf, sizeof buf, "%u,%u,%u,%u\n", code,
                  shrink_code_once(code, from, ShrinkStrategy::equivalent),
                  shrink_code_once(code, from, ShrinkStrategy::direct),
                  shrink_code_once(code, from, ShrinkStrategy::modified));
    csv += buf;
  }
  write_out(o.out, csv);
  return 0;
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

struct ProfileOpts {
  std::string config, out, k_file, v_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> blocks, tokens;
  std::vector<int> bits;
};

ProfileConfig profile_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"seed", "blocks", "tokens", "heads", "head_dim", "queries",
                       "options", "key_group_axis", "key_group_size", "value_group_axis",
                       "value_group_size"},
                      "profile config");
  ProfileConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("blocks")) c.blocks = j.at("blocks").get<std::size_t>();
  if (j.contains("tokens")) c.tokens = j.at("tokens").get<std::size_t>();
  if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
  if (j.contains("head_dim")) c.head_dim = j.at("head_dim").get<std::size_t>();
  if (j.contains("queries")) c.queries = j.at("queries").get<std::size_t>();
  if (j.contains("options")) {
    c.options.clear();
    for (int b : j.at("options").get<std::vector<int>>())
      c.options.push_back(bitwidth_from_int(b));
  }
  if (j.contains("key_group_axis"))
    c.key_groups.axis = axis_from_name(j.at("key_group_axis").get<std::string>());
  if (j.contains("key_group_size"))
    c.key_groups.group_size = j.at("key_group_size").get<std::size_t>();
  if (j.contains("value_group_axis"))
    c.value_groups.axis = axis_from_name(j.at("value_group_axis").get<std::string>());
  if (j.contains("value_group_size"))
    c.value_groups.group_size = j.at("value_group_size").get<std::size_t>();
  return c;
}

int run_profile(const ProfileOpts& o) {
  ProfileConfig c;
  if (!o.config.empty()) c = profile_config_from_json(load_json(o.config));
  if (o.seed) c.seed = *o.seed;
  if (o.blocks) c.blocks = *o.blocks;
  if (o.tokens) c.tokens = *o.tokens;
  if (!o.bits.empty()) {
    c.options.clear();
    for (int b : o.bits) c.options.push_back(bitwidth_from_int(b));
  }

  SensitivityTable table;
  if (o.k_file.empty() != o.v_file.empty())
    throw FormatError("file mode needs both --k and --v");
  if (!o.k_file.empty()) {
    Tensor kt = read_tensor(o.k_file), vt = read_tensor(o.v_file);
    if (!kt.same_shape(vt)) throw ShapeError("K and V files disagree on shape");
    std::size_t heads = kt.dims().size() == 3 ? kt.dims()[1] : 1;
    std::size_t head_dim = std::size_t(kt.channels()) / heads;
    std::size_t tokens = kt.tokens();
    std::size_t blocks = o.blocks.value_or(1);
    if (blocks == 0 || blocks > tokens)
      throw ShapeError("block count must be between 1 and the token count");
    table.options = c.options;
    std::size_t per = tokens / blocks;
    for (std::size_t b = 0; b < blocks; ++b) {
      std::size_t lo = b * per;
      std::size_t hi = (b + 1 == blocks) ? tokens : lo + per;
      std::size_t channels = heads * head_dim;
      std::vector<float> kf(kt.f32().begin() + lo * channels,
                            kt.f32().begin() + hi * channels);
      std::vector<float> vf(vt.f32().begin() + lo * channels,
                            vt.f32().begin() + hi * channels);
      append_block_scores(table, kf, vf, hi - lo, heads, head_dim, c.queries,
                          splitmix64(c.seed) ^ b, c.key_groups, c.value_groups);
    }
    table.validate();
  } else {
    table = build_sensitivity_table(c);
  }
  write_out(o.out, sensitivity_table_to_json(table).dump(2));
  return 0;
}

// ---------------------------------------------------------------------------
// allocate
// ---------------------------------------------------------------------------

struct AllocateOpts {
  std::string table, out;
  std::uint64_t budget = 0;
};

int run_allocate(const AllocateOpts& o) {
  SensitivityTable t = sensitivity_table_from_json(load_json(o.table));
  AllocationPlan plan = solve_allocation(t, o.budget);
  write_out(o.out, allocation_plan_to_json(plan).dump(2));
  return 0;
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

struct CalibrateOpts {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> bits;
  std::optional<std::size_t> points;
};

struct CalibrateConfig {
  std::uint64_t seed = 1;
  // Deployment shape this calibration stands in for; only the sampled
  // subset below is actually drawn.
  std::size_t sequences = 512;
  std::size_t tokens_per_sequence = 2048;
  double position_scale = 4.0;
  std::size_t sample_tokens = 256;
  std::size_t queries = 32;
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  int bits = 2;
  GroupSpec groups{GroupAxis::channel, 0};  // 0 means one group per token
  std::size_t points = 20;
  std::vector<std::size_t> outlier_channels;
  double outlier_scale = 1.0;
};

CalibrateConfig calibrate_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"seed", "sequences", "tokens_per_sequence", "position_scale",
                       "sample_tokens", "queries", "heads", "head_dim", "bits",
                       "group_axis", "group_size", "points", "outlier_channels",
                       "outlier_scale"},
                      "calibration config");
  CalibrateConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("sequences")) c.sequences = j.at("sequences").get<std::size_t>();
  if (j.contains("tokens_per_sequence"))
    c.tokens_per_sequence = j.at("tokens_per_sequence").get<std::size_t>();
  if (j.contains("position_scale")) c.position_scale = j.at("position_scale").get<double>();
  if (j.contains("sample_tokens")) c.sample_tokens = j.at("sample_tokens").get<std::size_t>();
  if (j.contains("queries")) c.queries = j.at("queries").get<std::size_t>();
  if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
  if (j.contains("head_dim")) c.head_dim = j.at("head_dim").get<std::size_t>();
  if (j.contains("bits")) c.bits = j.at("bits").get<int>();
  if (j.contains("group_axis"))
    c.groups.axis = axis_from_name(j.at("group_axis").get<std::string>());
  if (j.contains("group_size")) c.groups.group_size = j.at("group_size").get<std::size_t>();
  if (j.contains("points")) c.points = j.at("points").get<std::size_t>();
  if (j.contains("outlier_channels"))
    c.outlier_channels = j.at("outlier_channels").get<std::vector<std::size_t>>();
  if (j.contains("outlier_scale")) c.outlier_scale = j.at("outlier_scale").get<double>();
  return c;
}

int run_calibrate(const CalibrateOpts& o) {
  CalibrateConfig c;
  if (!o.config.empty()) c = calibrate_config_from_json(load_json(o.config));
  if (o.seed) c.seed = *o.seed;
  if (o.bits) c.bits = *o.bits;
  if (o.points) c.points = *o.points;
  if (c.sequences == 0 || c.tokens_per_sequence == 0 || !(c.position_scale > 0.0))
    throw NumericError("deployment shape must be positive");
  if (c.sample_tokens == 0 || c.queries == 0)
    throw ShapeError("calibration needs sample tokens and queries");

  std::size_t channels = c.heads * c.head_dim;
  GroupSpec spec = c.groups;
  if (spec.group_size == 0) spec.group_size = channels;

  KvStreamConfig kv_cfg;
  kv_cfg.seed = splitmix64(c.seed) ^ 0xca11ull;
  kv_cfg.heads = c.heads;
  kv_cfg.head_dim = c.head_dim;
  kv_cfg.outlier_channels = c.outlier_channels;
  kv_cfg.outlier_scale = c.outlier_scale;
  auto steps = synth_kv_stream(kv_cfg, c.sample_tokens);
  std::vector<float> k(c.sample_tokens * channels), v(c.sample_tokens * channels);
  for (std::size_t i = 0; i < c.sample_tokens; ++i) {
    std::copy(steps[i].k.begin(), steps[i].k.end(), k.begin() + i * channels);
    std::copy(steps[i].v.begin(), steps[i].v.end(), v.begin() + i * channels);
  }
  KvStreamConfig q_cfg = kv_cfg;
  q_cfg.seed = splitmix64(c.seed) ^ 0x9e55ull;
  KvStreamGen q_gen(q_cfg);
  std::vector<float> q(c.queries * channels);
  for (std::size_t i = 0; i < c.queries; ++i) {
    KvStep s = q_gen.next();
    std::copy(s.k.begin(), s.k.end(), q.begin() + i * channels);
  }

  CalibResult r =
      grid_search_alpha(q, c.queries, k, v, c.sample_tokens, channels,
                        group_quantizer(bitwidth_from_int(c.bits), spec), c.points);
  write_out(o.out, calib_result_to_json(r).dump(2));
  return 0;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateOpts {
  std::string config, policy, plan, calibration, csv, out;
  std::optional<std::uint64_t> seed;
};

int run_simulate(const SimulateOpts& o) {
  SimConfig cfg = sim_config_from_json(load_json(o.config));
  if (!o.policy.empty()) cfg.policy = policy_from_name(o.policy);
  if (o.seed) cfg.seed = *o.seed;

  std::vector<BitWidth> fbits;
  if (!o.plan.empty()) {
    AllocationPlan plan = allocation_plan_from_json(load_json(o.plan));
    fbits = plan.choice;
  }
  if (!o.calibration.empty()) {
    CalibResult cal = calib_result_from_json(load_json(o.calibration));
    (void)cal;  // validated for shape; keys are not rescaled inside the decode loop
  }

  DecodeTrace t = run_decode(cfg, fbits.empty() ? nullptr : &fbits);
  if (!o.out.empty()) write_out(o.out, trace_to_json(t).dump(2));
  if (!o.csv.empty()) write_out(o.csv, trace_to_csv(t));
  if (o.out.empty() && o.csv.empty()) write_out("", trace_to_csv(t));
  return 0;
}

// ---------------------------------------------------------------------------
// state-dump
// ---------------------------------------------------------------------------

struct StateDumpOpts {
  std::string config, policy = "progressive", out;
  std::uint64_t seed = 1;
  std::size_t steps = 64, heads = 1, head_dim = 16;
};

int run_state_dump(const StateDumpOpts& o) {
  CacheConfig cc;
  if (!o.config.empty()) cc = cache_config_from_json(load_json(o.config));
  cc.validate();
  if (o.steps == 0) throw ShapeError("state dump needs at least one step");

  SimConfig sim;
  sim.policy = policy_from_name(o.policy);
  sim.cache = cc;
  sim.heads = o.heads;
  sim.head_dim = o.head_dim;
  std::unique_ptr<KvCache> cache;
  switch (sim.policy) {
    case Policy::fp_reference:
      cache = std::make_unique<ReferenceCache>(o.heads, o.head_dim);
      break;
    case Policy::immediate:
      cache = std::make_unique<ImmediateCache>(cc, o.heads, o.head_dim);
      break;
    default:
      cache = std::make_unique<BlockCache>(cc, o.heads, o.head_dim);
  }

  KvStreamConfig sc;
  sc.seed = o.seed;
  sc.heads = o.heads;
  sc.head_dim = o.head_dim;
  KvStreamGen gen(sc);
  for (std::size_t i = 0; i < o.steps; ++i) {
    KvStep s = gen.next();
    cache->append(s.k.data(), s.v.data());
  }
  write_out(o.out, cache->state_json().dump(2));
  return 0;
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

int run_selftest() {
  int failures = 0;
  auto report = [&](const char* name, bool ok) {
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << name << "\n";
    failures += ok ? 0 : 1;
  };

  {
    bool ok = true;
    for (BitWidth from : {BitWidth::b4, BitWidth::b8, BitWidth::b16}) {
      std::uint32_t divisor = max_code(from) / max_code(half_width(from));
      for (std::uint32_t code = 0; code <= max_code(from) && ok; ++code) {
        std::uint32_t want =
            std::uint32_t(std::round(double(code) / double(divisor)));
        ok = ok && shrink_code_once(code, from, ShrinkStrategy::equivalent) == want;
        ok = ok && shrink_code_once(code, from, ShrinkStrategy::direct) ==
                       (code >> (bits(from) / 2));
      }
    }
    report("code shrink identities", ok);
  }

  {
    bool ok = true;
    Rng rng(404);
    for (int trial = 0; trial < 25 && ok; ++trial) {
      SensitivityTable t;
      t.options = {BitWidth::b2, BitWidth::b4, BitWidth::b8};
      std::size_t blocks = 2 + std::size_t(rng.uniform() * 8.0);
      std::uint64_t floor = 0;
      for (std::size_t i = 0; i < blocks; ++i) {
        std::uint64_t m = 1 + std::uint64_t(rng.uniform() * 30.0);
        std::vector<double> s;
        std::vector<std::uint64_t> mem;
        for (int j = 0; j < 3; ++j) {
          s.push_back(double(std::uint64_t(rng.uniform() * 500.0)));
          mem.push_back(m);
          m += 1 + std::uint64_t(rng.uniform() * 30.0);
        }
        floor += mem.front();
        t.s.push_back(s);
        t.mem.push_back(mem);
      }
      std::uint64_t budget = floor + std::uint64_t(rng.uniform() * 120.0);
      AllocationPlan a = solve_allocation(t, budget);
      AllocationPlan b = brute_force_allocation(t, budget);
      ok = a.choice == b.choice && a.objective == b.objective &&
           a.bytes_used == b.bytes_used;
    }
    report("allocation against exhaustive search", ok);
  }

  {
    bool ok = true;
    Rng rng(505);
    for (BitWidth w : {BitWidth::b2, BitWidth::b4, BitWidth::b8, BitWidth::b16}) {
      for (int trial = 0; trial < 200 && ok; ++trial) {
        std::vector<float> x(32);
        for (float& v : x) v = float(rng.gaussian() * 3.0);
        GroupQuantResult g = quantize_group(x, w);
        std::vector<float> back = dequantize_group(g.codes, g.params);
        for (std::size_t i = 0; i < x.size() && ok; ++i)
          ok = std::abs(back[i] - x[i]) <=
               g.params.scale / 2.0 + 1e-6 * (g.params.scale * max_code(w) + 1.0);
      }
    }
    report("group round trip error bound", ok);
  }

  if (failures) {
    report_error("selftest", "self test failed");
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"progressive mixed-precision KV cache toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_flag("--json-errors", g_json_errors, "emit errors as JSON on stderr");

  std::function<int()> action;

  auto qo = std::make_shared<QuantizeOpts>();
  CLI::App* q = app.add_subcommand("quantize", "group-quantize a tensor file");
  q->add_option("--in", qo->in, "input .pmkt tensor")->required();
  q->add_option("--out", qo->out, "output file prefix")->required();
  q->add_option("--bits", qo->bits, "target width (2, 4, 8, 16)");
  q->add_option("--axis", qo->axis, "group axis: token or channel");
  q->add_option("--group-size", qo->group_size, "elements per group");
  q->callback([qo, &action] { action = [qo] { return run_quantize(*qo); }; });

  auto ao = std::make_shared<AblateOpts>();
  CLI::App* ab = app.add_subcommand("shrink-ablate",
                                    "dump the code mapping of one shrink step as CSV");
  ab->add_option("--from-bits", ao->from_bits, "source width (4, 8, 16)");
  ab->add_option("--out", ao->out, "output file (default stdout)");
  ab->callback([ao, &action] { action = [ao] { return run_shrink_ablate(*ao); }; });

  auto po = std::make_shared<ProfileOpts>();
  CLI::App* pr = app.add_subcommand("profile",
                                    "score per-block sensitivity at each width");
  pr->add_option("--config", po->config, "profile config JSON");
  pr->add_option("--seed", po->seed, "override config seed");
  pr->add_option("--blocks", po->blocks, "block count");
  pr->add_option("--tokens", po->tokens, "tokens per synthetic block");
  pr->add_option("--bits", po->bits, "candidate widths")->expected(-1);
  pr->add_option("--k", po->k_file, "key tensor file instead of synthetic data");
  pr->add_option("--v", po->v_file, "value tensor file instead of synthetic data");
  pr->add_option("--out", po->out, "output file (default stdout)");
  pr->callback([po, &action] { action = [po] { return run_profile(*po); }; });

  auto alo = std::make_shared<AllocateOpts>();
  CLI::App* al = app.add_subcommand("allocate", "choose per-block widths under a budget");
  al->add_option("--table", alo->table, "sensitivity table JSON")->required();
  al->add_option("--budget-bytes", alo->budget, "byte budget")->required();
  al->add_option("--out", alo->out, "output file (default stdout)");
  al->callback([alo, &action] { action = [alo] { return run_allocate(*alo); }; });

  auto co = std::make_shared<CalibrateOpts>();
  CLI::App* ca = app.add_subcommand("calibrate",
                                    "grid-search the outlier reparameterization");
  ca->add_option("--config", co->config, "calibration config JSON");
  ca->add_option("--seed", co->seed, "override config seed");
  ca->add_option("--bits", co->bits, "storage width under test");
  ca->add_option("--points", co->points, "grid resolution");
  ca->add_option("--out", co->out, "output file (default stdout)");
  ca->callback([co, &action] { action = [co] { return run_calibrate(*co); }; });

  auto so = std::make_shared<SimulateOpts>();
  CLI::App* si = app.add_subcommand("simulate", "run the decode loop and trace errors");
  si->add_option("--config", so->config, "simulation config JSON")->required();
  si->add_option("--policy", so->policy, "override policy");
  si->add_option("--seed", so->seed, "override config seed");
  si->add_option("--plan", so->plan, "allocation plan JSON (per-block floor widths)");
  si->add_option("--calibration", so->calibration, "calibration result JSON");
  si->add_option("--csv", so->csv, "trace CSV output file");
  si->add_option("--out", so->out, "trace JSON output file");
  si->callback([so, &action] { action = [so] { return run_simulate(*so); }; });

  auto sd = std::make_shared<StateDumpOpts>();
  CLI::App* st = app.add_subcommand("state-dump", "stream tokens and dump cache state");
  st->add_option("--config", sd->config, "cache config JSON");
  st->add_option("--policy", sd->policy, "fp_reference, immediate, or progressive");
  st->add_option("--steps", sd->steps, "tokens to append");
  st->add_option("--seed", sd->seed, "stream seed");
  st->add_option("--heads", sd->heads, "head count");
  st->add_option("--head-dim", sd->head_dim, "channels per head");
  st->add_option("--out", sd->out, "output file (default stdout)");
  st->callback([sd, &action] { action = [sd] { return run_state_dump(*sd); }; });

  CLI::App* se = app.add_subcommand("selftest", "run built-in consistency checks");
  se->callback([&action] { action = [] { return run_selftest(); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    return action ? action() : 1;
  } catch (const InfeasibleError& e) {
    report_error("infeasible", e.what(), [&](nlohmann::json& j) {
      j["min_feasible_bytes"] = e.min_feasible_bytes;
    });
    return 2;
  } catch (const CapacityError& e) {
    report_error("capacity", e.what(),
                 [&](nlohmann::json& j) { j["step"] = e.step; });
    return 2;
  } catch (const Error& e) {
    report_error("input", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
}
