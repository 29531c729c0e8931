#pragma once

// Loss sensitivity to KV quantization. A block's score at width b is the
// gradient-weighted L1 norm of the quantization error,
//
//   s = sum |gK * (K - deq(quant_b(K)))| + sum |gV * (V - deq(quant_b(V)))|
//
// with gradients supplied from outside or derived from the toy attention
// loss below. fd_gradient is the validation oracle for analytic gradients;
// taylor_check compares the first-order prediction against the true loss
// change under quantization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "pqkv/attention.hpp"
#include "pqkv/cache.hpp"
#include "pqkv/error.hpp"
#include "pqkv/quant.hpp"
#include "pqkv/synth.hpp"
#include "pqkv/tensor.hpp"

namespace pqkv {

inline double weighted_l1(const std::vector<float>& g, const std::vector<float>& delta) {
  if (g.size() != delta.size()) throw ShapeError("gradient/delta length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    acc += std::abs(double(g[i]) * double(delta[i]));
  return acc;
}

namespace detail {

inline std::vector<float> quant_error(const Tensor& x, BitWidth b, const GroupSpec& spec) {
  PackedTensor p = quantize_tensor(x, b, spec);
  Tensor back = dequantize_tensor(p);
  const std::vector<float>& orig = x.f32();
  const std::vector<float>& deq = back.f32();
  std::vector<float> delta(orig.size());
  for (std::size_t i = 0; i < orig.size(); ++i) delta[i] = orig[i] - deq[i];
  return delta;
}

}  // namespace detail

inline double sensitivity(const Tensor& k, const Tensor& v, const Tensor& g_k,
                          const Tensor& g_v, BitWidth b, const GroupSpec& key_groups,
                          const GroupSpec& value_groups) {
  if (!k.same_shape(g_k) || !v.same_shape(g_v))
    throw ShapeError("gradient shape does not match its tensor");
  return weighted_l1(g_k.f32(), detail::quant_error(k, b, key_groups)) +
         weighted_l1(g_v.f32(), detail::quant_error(v, b, value_groups));
}

// Central differences with per-element step h = 1e-4 * max(1, |x|). The
// difference is divided by the realized float step (x_plus - x_minus in
// double), not by 2h: float rounding of the perturbed points would otherwise
// cap accuracy well above the 1e-4 validation tolerance.
template <typename F>
std::vector<double> fd_gradient(F&& f, const std::vector<float>& x) {
  std::vector<double> g(x.size());
  std::vector<float> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double xi = x[i];
    double h = 1e-4 * std::max(1.0, std::abs(xi));
    float xp = float(xi + h), xm = float(xi - h);
    probe[i] = xp;
    double fp = f(probe);
    probe[i] = xm;
    double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("loss is not finite near the evaluation point");
    g[i] = (fp - fm) / (double(xp) - double(xm));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Toy attention loss
// ---------------------------------------------------------------------------

// L = 1/2 || softmax(Q K^T / sqrt(d)) V - T ||_F^2 over a single head.
// Closed-form gradients; fd_gradient validates them in tests.
struct ToyAttentionLoss {
  std::size_t n_q = 0, n_k = 0, d = 0;
  std::vector<float> q;       // n_q x d
  std::vector<float> target;  // n_q x d

  static ToyAttentionLoss make(std::uint64_t seed, std::size_t n_q, std::size_t n_k,
                               std::size_t d) {
    ToyAttentionLoss t;
    t.n_q = n_q;
    t.n_k = n_k;
    t.d = d;
    Rng rng(splitmix64(seed) ^ 0x7107ull);
    t.q.resize(n_q * d);
    t.target.resize(n_q * d);
    for (float& x : t.q) x = float(rng.gaussian());
    for (float& x : t.target) x = float(0.5 * rng.gaussian());
    return t;
  }

  double loss(const std::vector<float>& k, const std::vector<float>& v) const {
    check(k, v);
    std::vector<double> out = attention_ref(q.data(), n_q, k.data(), v.data(), n_k, d);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      double r = out[i] - target[i];
      acc += r * r;
    }
    return 0.5 * acc;
  }

  // dL/dV = P^T R, dL/dK = (softmax-backward(R V^T))^T Q / sqrt(d),
  // where P = softmax(Q K^T / sqrt(d)) and R = P V - T.
  void gradients(const std::vector<float>& k, const std::vector<float>& v,
                 std::vector<double>& g_k, std::vector<double>& g_v) const {
    check(k, v);
    std::vector<double> p(n_q * n_k);
    matmul_abt(q.data(), n_q, k.data(), n_k, d, p.data());
    double inv_temp = 1.0 / std::sqrt(double(d));
    softmax_rows(p.data(), n_q, n_k, inv_temp);

    std::vector<double> r(n_q * d);
    for (std::size_t i = 0; i < n_q; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n_k; ++j) acc += p[i * n_k + j] * double(v[j * d + c]);
        r[i * d + c] = acc - double(target[i * d + c]);
      }

    g_v.assign(n_k * d, 0.0);
    for (std::size_t j = 0; j < n_k; ++j)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n_q; ++i) acc += p[i * n_k + j] * r[i * d + c];
        g_v[j * d + c] = acc;
      }

    // dL/dP, then the softmax Jacobian row by row, fused into dL/dA.
    std::vector<double> da(n_q * n_k);
    for (std::size_t i = 0; i < n_q; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n_k; ++j) {
        double dp = 0.0;
        for (std::size_t c = 0; c < d; ++c) dp += r[i * d + c] * double(v[j * d + c]);
        da[i * n_k + j] = dp;
        dot += dp * p[i * n_k + j];
      }
      for (std::size_t j = 0; j < n_k; ++j)
        da[i * n_k + j] = p[i * n_k + j] * (da[i * n_k + j] - dot);
    }

    g_k.assign(n_k * d, 0.0);
    for (std::size_t j = 0; j < n_k; ++j)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n_q; ++i) acc += da[i * n_k + j] * double(q[i * d + c]);
        g_k[j * d + c] = acc * inv_temp;
      }
  }

 private:
  void check(const std::vector<float>& k, const std::vector<float>& v) const {
    if (k.size() != n_k * d || v.size() != n_k * d)
      throw ShapeError("K/V size does not match the loss shape");
  }
};

// ---------------------------------------------------------------------------
// First-order Taylor check
// ---------------------------------------------------------------------------

struct TaylorResult {
  double predicted = 0.0;  // sum G.(Q_b(X) - X) over K and V
  double actual = 0.0;     // loss(Q_b(K), Q_b(V)) - loss(K, V)
};

// `loss` is any scalar function of flat (K, V) vectors shaped tokens x
// channels. Gradients come from finite differences, per the validation
// contract; quantization uses the same group geometry as the cache.
template <typename LossFn>
TaylorResult taylor_check(LossFn&& loss, const Tensor& k, const Tensor& v, BitWidth b,
                          const GroupSpec& key_groups, const GroupSpec& value_groups) {
  const std::vector<float>& kf = k.f32();
  const std::vector<float>& vf = v.f32();
  double base = loss(kf, vf);
  if (!std::isfinite(base)) throw NumericError("loss is not finite at the base point");

  std::vector<double> g_k =
      fd_gradient([&](const std::vector<float>& kk) { return loss(kk, vf); }, kf);
  std::vector<double> g_v =
      fd_gradient([&](const std::vector<float>& vv) { return loss(kf, vv); }, vf);

  std::vector<float> dk = detail::quant_error(k, b, key_groups);
  std::vector<float> dv = detail::quant_error(v, b, value_groups);

  TaylorResult r;
  // quant_error holds X - Q(X); Taylor expands along Q(X) - X.
  for (std::size_t i = 0; i < dk.size(); ++i) r.predicted -= g_k[i] * double(dk[i]);
  for (std::size_t i = 0; i < dv.size(); ++i) r.predicted -= g_v[i] * double(dv[i]);

  std::vector<float> kq(kf.size()), vq(vf.size());
  for (std::size_t i = 0; i < kf.size(); ++i) kq[i] = kf[i] - dk[i];
  for (std::size_t i = 0; i < vf.size(); ++i) vq[i] = vf[i] - dv[i];
  double moved = loss(kq, vq);
  if (!std::isfinite(moved)) throw NumericError("loss is not finite at the quantized point");
  r.actual = moved - base;
  return r;
}

// ---------------------------------------------------------------------------
// Sensitivity table
// ---------------------------------------------------------------------------

struct SensitivityTable {
  std::vector<BitWidth> options;             // ascending widths
  std::vector<std::vector<double>> s;        // blocks x options
  std::vector<std::vector<std::uint64_t>> mem;  // blocks x options

  std::size_t blocks() const { return s.size(); }

  void validate() const {
    if (options.empty()) throw FormatError("sensitivity table has no bit-width options");
    if (s.empty()) throw FormatError("sensitivity table has no blocks");
    for (std::size_t j = 1; j < options.size(); ++j)
      if (bits(options[j]) <= bits(options[j - 1]))
        throw FormatError("bit-width options must be strictly ascending");
    if (s.size() != mem.size()) throw FormatError("s and mem row counts differ");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].size() != options.size() || mem[i].size() != options.size())
        throw FormatError("table row width does not match option count");
      for (double v : s[i])
        if (!(v >= 0.0)) throw FormatError("sensitivity values must be nonnegative");
      for (std::size_t j = 1; j < options.size(); ++j)
        if (mem[i][j] <= mem[i][j - 1])
          throw FormatError("memory must increase with bit-width in every block");
    }
  }
};

inline nlohmann::json sensitivity_table_to_json(const SensitivityTable& t) {
  t.validate();
  nlohmann::json opts = nlohmann::json::array();
  for (BitWidth w : t.options) opts.push_back(bits(w));
  return nlohmann::json{
      {"blocks", t.blocks()}, {"options", opts}, {"s", t.s}, {"mem", t.mem}};
}

inline SensitivityTable sensitivity_table_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("sensitivity table must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "blocks" && it.key() != "options" && it.key() != "s" &&
        it.key() != "mem")
      throw FormatError("unknown sensitivity table key: " + it.key());
  }
  SensitivityTable t;
  for (unsigned b : j.at("options").get<std::vector<unsigned>>())
    t.options.push_back(bitwidth_from_int(b));
  t.s = j.at("s").get<std::vector<std::vector<double>>>();
  t.mem = j.at("mem").get<std::vector<std::vector<std::uint64_t>>>();
  t.validate();
  if (j.at("blocks").get<std::size_t>() != t.blocks())
    throw FormatError("declared block count does not match table rows");
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic profiler
// ---------------------------------------------------------------------------

struct ProfileConfig {
  std::uint64_t seed = 1;
  std::size_t blocks = 4;
  std::size_t tokens = 256;
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  std::size_t queries = 16;
  std::vector<BitWidth> options{BitWidth::b2, BitWidth::b4, BitWidth::b8};
  GroupSpec key_groups{GroupAxis::token, 128};
  GroupSpec value_groups{GroupAxis::channel, 128};
};

// Scores one block's KV matrices at every candidate width and appends the
// row pair to the table. Gradients come from the toy attention loss seeded
// per block.
inline void append_block_scores(SensitivityTable& t, const std::vector<float>& kf,
                                const std::vector<float>& vf, std::size_t tokens,
                                std::size_t heads, std::size_t head_dim,
                                std::size_t queries, std::uint64_t seed,
                                const GroupSpec& key_groups, const GroupSpec& value_groups) {
  std::size_t channels = heads * head_dim;
  if (tokens == 0 || kf.size() != tokens * channels || vf.size() != kf.size())
    throw ShapeError("block K/V must be nonempty tokens x channels matrices");
  ToyAttentionLoss loss = ToyAttentionLoss::make(seed, queries, tokens, channels);
  std::vector<double> g_k, g_v;
  loss.gradients(kf, vf, g_k, g_v);
  std::vector<float> gkf(g_k.begin(), g_k.end()), gvf(g_v.begin(), g_v.end());

  std::vector<std::size_t> dims{tokens, heads, head_dim};
  Tensor kt = Tensor::from_f32(dims, kf), vt = Tensor::from_f32(dims, vf);
  Tensor gkt = Tensor::from_f32(dims, gkf), gvt = Tensor::from_f32(dims, gvf);

  std::vector<double> row_s;
  std::vector<std::uint64_t> row_m;
  for (BitWidth b : t.options) {
    row_s.push_back(sensitivity(kt, vt, gkt, gvt, b, key_groups, value_groups));
    row_m.push_back(mem_bytes(tokens, heads, head_dim, b, key_groups) +
                    mem_bytes(tokens, heads, head_dim, b, value_groups));
  }
  t.s.push_back(std::move(row_s));
  t.mem.push_back(std::move(row_m));
}

// Streams per-block synthetic KV, differentiates the toy attention loss at
// the float point, and scores every (block, width) pair. Gradient magnitudes
// differ across blocks because each block draws its own channel scales, which
// is what gives the allocator something to trade off.
inline SensitivityTable build_sensitivity_table(const ProfileConfig& cfg) {
  if (cfg.blocks == 0 || cfg.tokens == 0) throw ShapeError("profile needs blocks and tokens");
  SensitivityTable t;
  t.options = cfg.options;
  std::size_t channels = cfg.heads * cfg.head_dim;
  for (std::size_t blk = 0; blk < cfg.blocks; ++blk) {
    KvStreamConfig sc;
    sc.seed = splitmix64(cfg.seed) ^ (0x9000ull + blk);
    sc.heads = cfg.heads;
    sc.head_dim = cfg.head_dim;
    auto steps = synth_kv_stream(sc, cfg.tokens);
    std::vector<float> kf(cfg.tokens * channels), vf(cfg.tokens * channels);
    for (std::size_t i = 0; i < cfg.tokens; ++i) {
      std::copy(steps[i].k.begin(), steps[i].k.end(), kf.begin() + i * channels);
      std::copy(steps[i].v.begin(), steps[i].v.end(), vf.begin() + i * channels);
    }
    append_block_scores(t, kf, vf, cfg.tokens, cfg.heads, cfg.head_dim, cfg.queries,
                        sc.seed, cfg.key_groups, cfg.value_groups);
  }
  t.validate();
  return t;
}

}  // namespace pqkv
