#pragma once

// Deterministic synthetic K/V streams for the decode simulator and tests.
//
// Values are Gaussian with a per-channel scale drawn log-uniformly from
// [0.7, 1.5], plus a slow sinusoidal per-token drift (period 1024 tokens)
// so groups taken along the token axis see a moving range instead of a
// stationary one. Channels listed as outliers have the whole signal
// multiplied by outlier_scale, which multiplies their standard deviation
// by exactly that factor.
//
// Randomness is hand-rolled (mt19937_64 + polar Gaussian) rather than
// std::normal_distribution, whose output is implementation-defined;
// identical parameters must reproduce identical streams run to run.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "pqkv/error.hpp"

namespace pqkv {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform in [0, 1) with 53-bit resolution.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Marsaglia polar method; caches the spare deviate.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct KvStreamConfig {
  std::uint64_t seed = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  std::vector<std::size_t> outlier_channels;
  double outlier_scale = 1.0;
  double drift_period = 1024.0;
  double drift_amplitude = 0.6;  // relative to the channel scale

  std::size_t channels() const { return heads * head_dim; }
};

struct KvStep {
  std::vector<float> k, v;
};

class KvStreamGen {
 public:
  explicit KvStreamGen(const KvStreamConfig& cfg)
      : cfg_(cfg),
        k_rng_(splitmix64(cfg.seed) ^ 0x4bULL),
        v_rng_(splitmix64(cfg.seed) ^ 0x56ULL) {
    if (cfg.heads == 0 || cfg.head_dim == 0) {
      throw ShapeError("stream needs heads >= 1 and head_dim >= 1");
    }
    std::size_t c = cfg_.channels();
    for (std::size_t ch : cfg_.outlier_channels) {
      if (ch >= c) throw ShapeError("outlier channel index out of range");
    }
    Rng init(splitmix64(cfg.seed) ^ 0x70ULL);
    k_scale_.resize(c);
    v_scale_.resize(c);
    k_phase_.resize(c);
    v_phase_.resize(c);
    for (std::size_t i = 0; i < c; ++i) {
      k_scale_[i] = std::exp(init.uniform(std::log(0.7), std::log(1.5)));
      v_scale_[i] = std::exp(init.uniform(std::log(0.7), std::log(1.5)));
      k_phase_[i] = init.uniform(0.0, 2.0 * 3.14159265358979323846);
      v_phase_[i] = init.uniform(0.0, 2.0 * 3.14159265358979323846);
    }
    mult_.assign(c, 1.0);
    for (std::size_t ch : cfg_.outlier_channels) mult_[ch] = cfg_.outlier_scale;
  }

  KvStep next() {
    std::size_t c = cfg_.channels();
    KvStep s;
    s.k.resize(c);
    s.v.resize(c);
    double w = 2.0 * 3.14159265358979323846 / cfg_.drift_period;
    double t = static_cast<double>(step_);
    for (std::size_t i = 0; i < c; ++i) {
      double drift = cfg_.drift_amplitude * k_scale_[i] * std::sin(w * t + k_phase_[i]);
      s.k[i] = static_cast<float>(mult_[i] * (k_scale_[i] * k_rng_.gaussian() + drift));
    }
    for (std::size_t i = 0; i < c; ++i) {
      double drift = cfg_.drift_amplitude * v_scale_[i] * std::sin(w * t + v_phase_[i]);
      s.v[i] = static_cast<float>(mult_[i] * (v_scale_[i] * v_rng_.gaussian() + drift));
    }
    ++step_;
    return s;
  }

  const KvStreamConfig& config() const { return cfg_; }

 private:
  KvStreamConfig cfg_;
  Rng k_rng_, v_rng_;
  std::vector<double> k_scale_, v_scale_, k_phase_, v_phase_, mult_;
  std::uint64_t step_ = 0;
};

inline std::vector<KvStep> synth_kv_stream(const KvStreamConfig& cfg, std::size_t steps) {
  KvStreamGen gen(cfg);
  std::vector<KvStep> out;
  out.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) out.push_back(gen.next());
  return out;
}

}  // namespace pqkv
