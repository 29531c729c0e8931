#pragma once

// Rotary position handling and outlier-channel calibration. Rotation runs in
// double regardless of storage type; position interpolation folds into the
// angle as a plain scale factor, so stretching a context by s means feeding
// positions in compressed units while channel periods shrink by s.
//
// The reparameterization trades key outliers against quantization error:
// keys are divided per channel by lambda_i = maxabs_i^alpha before
// quantization and queries are multiplied by the same factors, which cancels
// exactly in infinite precision and concentrates the group ranges otherwise.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

#include "json.hpp"
#include "pqkv/attention.hpp"
#include "pqkv/error.hpp"
#include "pqkv/quant.hpp"

namespace pqkv {

struct RopeConfig {
  std::size_t d = 64;      // rotated channel count, even
  double theta = 10000.0;  // frequency base
  double scale = 1.0;      // position interpolation factor

  void validate() const {
    if (d == 0 || d % 2 != 0) throw ShapeError("rotary dimension must be even and positive");
    if (!(theta > 1.0)) throw NumericError("rotary base must exceed 1");
    if (!(scale > 0.0)) throw NumericError("position scale must be positive");
  }
};

// Period, in position units, of the rotation applied to channel pair i.
inline double channel_period(std::size_t i, const RopeConfig& cfg) {
  cfg.validate();
  if (i >= cfg.d / 2) throw ShapeError("channel pair index out of range");
  double freq = std::pow(cfg.theta, -2.0 * double(i) / double(cfg.d));
  return 2.0 * std::numbers::pi / (cfg.scale * freq);
}

// Rotates rows of x (one row of cfg.d channels per position). Channel i pairs
// with channel i + d/2.
inline std::vector<float> rope(const std::vector<float>& x,
                               const std::vector<std::int64_t>& positions,
                               const RopeConfig& cfg) {
  cfg.validate();
  if (x.size() != positions.size() * cfg.d)
    throw ShapeError("rotary input size does not match positions * d");
  std::size_t half = cfg.d / 2;
  std::vector<double> freq(half);
  for (std::size_t i = 0; i < half; ++i)
    freq[i] = std::pow(cfg.theta, -2.0 * double(i) / double(cfg.d));
  std::vector<float> out(x.size());
  for (std::size_t row = 0; row < positions.size(); ++row) {
    const float* src = x.data() + row * cfg.d;
    float* dst = out.data() + row * cfg.d;
    double m = cfg.scale * double(positions[row]);
    for (std::size_t i = 0; i < half; ++i) {
      double a = m * freq[i];
      double c = std::cos(a), s = std::sin(a);
      double lo = src[i], hi = src[i + half];
      dst[i] = float(lo * c - hi * s);
      dst[i + half] = float(lo * s + hi * c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outlier reparameterization
// ---------------------------------------------------------------------------

// Dequantized view of a tokens x channels matrix after storage quantization.
// The identity function models the quantizer being disabled.
using QuantizeFn = std::function<std::vector<float>(const std::vector<float>&,
                                                    std::size_t tokens,
                                                    std::size_t channels)>;

inline QuantizeFn identity_quantizer() {
  return [](const std::vector<float>& x, std::size_t, std::size_t) { return x; };
}

inline QuantizeFn group_quantizer(BitWidth w, GroupSpec spec) {
  return [w, spec](const std::vector<float>& x, std::size_t tokens, std::size_t channels) {
    Tensor t = Tensor::from_f32({tokens, channels}, x);
    return dequantize_tensor(quantize_tensor(t, w, spec)).f32();
  };
}

// lambda_i = (max_m |K_mi|)^alpha, floored so dead channels stay invertible.
inline std::vector<double> reparam_factors(const std::vector<float>& k_calib,
                                           std::size_t channels, double alpha) {
  if (channels == 0 || k_calib.empty() || k_calib.size() % channels != 0)
    throw ShapeError("calibration keys must be a nonempty tokens x channels matrix");
  std::vector<double> lambda(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double peak = 0.0;
    for (std::size_t t = 0; t < k_calib.size() / channels; ++t)
      peak = std::max(peak, std::abs(double(k_calib[t * channels + c])));
    lambda[c] = std::max(std::pow(peak, alpha), 1e-5);
  }
  return lambda;
}

struct ReparamScores {
  std::vector<double> reparam;  // (Q Lambda) (quant(K inv-Lambda))^T
  std::vector<double> exact;    // Q K^T
  std::size_t n_q = 0, n_k = 0;
};

inline ReparamScores reparam_apply(const std::vector<float>& q, std::size_t n_q,
                                   const std::vector<float>& k, std::size_t n_k,
                                   std::size_t channels, const std::vector<double>& lambda,
                                   const QuantizeFn& quantize) {
  if (q.size() != n_q * channels || k.size() != n_k * channels)
    throw ShapeError("query/key size does not match token counts");
  if (lambda.size() != channels) throw ShapeError("one factor per channel required");

  ReparamScores r;
  r.n_q = n_q;
  r.n_k = n_k;
  r.exact.resize(n_q * n_k);
  matmul_abt(q.data(), n_q, k.data(), n_k, channels, r.exact.data());

  std::vector<float> q_up(q.size()), k_down(k.size());
  for (std::size_t t = 0; t < n_q; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      q_up[t * channels + c] = float(double(q[t * channels + c]) * lambda[c]);
  for (std::size_t t = 0; t < n_k; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      k_down[t * channels + c] = float(double(k[t * channels + c]) / lambda[c]);

  std::vector<float> k_stored = quantize(k_down, n_k, channels);
  if (k_stored.size() != k.size()) throw ShapeError("quantizer changed the key shape");
  r.reparam.resize(n_q * n_k);
  matmul_abt(q_up.data(), n_q, k_stored.data(), n_k, channels, r.reparam.data());
  return r;
}

// ---------------------------------------------------------------------------
// Alpha grid search
// ---------------------------------------------------------------------------

struct CalibResult {
  double alpha = 0.0;
  std::vector<double> lambda;
  std::vector<double> losses;  // one per grid point, alpha = i / (points - 1)
};

inline nlohmann::json calib_result_to_json(const CalibResult& r) {
  return nlohmann::json{{"alpha", r.alpha}, {"lambda", r.lambda}, {"losses", r.losses}};
}

inline CalibResult calib_result_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("calibration result must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "alpha" && it.key() != "lambda" && it.key() != "losses")
      throw FormatError("unknown calibration key: " + it.key());
  CalibResult r;
  r.alpha = j.at("alpha").get<double>();
  r.lambda = j.at("lambda").get<std::vector<double>>();
  r.losses = j.at("losses").get<std::vector<double>>();
  if (!(r.alpha >= 0.0 && r.alpha <= 1.0)) throw FormatError("alpha must lie in [0, 1]");
  return r;
}

// Attention-output distance between the reparameterized quantized path and
// the exact path, for one candidate alpha.
inline double reparam_loss(const std::vector<float>& q, std::size_t n_q,
                           const std::vector<float>& k, const std::vector<float>& v,
                           std::size_t n_k, std::size_t channels, double alpha,
                           const QuantizeFn& quantize) {
  std::vector<double> lambda = reparam_factors(k, channels, alpha);
  ReparamScores sc = reparam_apply(q, n_q, k, n_k, channels, lambda, quantize);
  double inv_temp = 1.0 / std::sqrt(double(channels));
  softmax_rows(sc.reparam.data(), n_q, n_k, inv_temp);
  softmax_rows(sc.exact.data(), n_q, n_k, inv_temp);
  double acc = 0.0;
  for (std::size_t i = 0; i < n_q; ++i)
    for (std::size_t c = 0; c < channels; ++c) {
      double got = 0.0, want = 0.0;
      for (std::size_t j = 0; j < n_k; ++j) {
        got += sc.reparam[i * n_k + j] * double(v[j * channels + c]);
        want += sc.exact[i * n_k + j] * double(v[j * channels + c]);
      }
      double diff = got - want;
      acc += diff * diff;
    }
  return std::sqrt(acc);
}

// Evenly spaced alphas over [0, 1] inclusive; ties go to the lowest alpha.
inline CalibResult grid_search_alpha(const std::vector<float>& q, std::size_t n_q,
                                     const std::vector<float>& k,
                                     const std::vector<float>& v, std::size_t n_k,
                                     std::size_t channels, const QuantizeFn& quantize,
                                     std::size_t points = 20) {
  if (points < 2) throw ShapeError("grid search needs at least two points");
  CalibResult r;
  std::size_t best = 0;
  for (std::size_t i = 0; i < points; ++i) {
    double alpha = double(i) / double(points - 1);
    double loss = reparam_loss(q, n_q, k, v, n_k, channels, alpha, quantize);
    if (!std::isfinite(loss)) throw NumericError("calibration loss is not finite");
    r.losses.push_back(loss);
    if (loss < r.losses[best]) best = i;
  }
  r.alpha = double(best) / double(points - 1);
  r.lambda = reparam_factors(k, channels, r.alpha);
  return r;
}

}  // namespace pqkv
