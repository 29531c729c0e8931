#pragma once

// Scaled dot-product attention, computed in double regardless of input
// precision. Scores subtract the row max before exponentiation.

#include <cmath>
#include <cstddef>
#include <vector>

#include "pqkv/error.hpp"

namespace pqkv {

// out[i*m + j] = sum_k A[i*d + k] * B[j*d + k]
inline void matmul_abt(const float* a, std::size_t n, const float* b, std::size_t m,
                       std::size_t d, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const float* ai = a + i * d;
    for (std::size_t j = 0; j < m; ++j) {
      const float* bj = b + j * d;
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += double(ai[k]) * double(bj[k]);
      out[i * m + j] = acc;
    }
  }
}

inline void softmax_rows(double* p, std::size_t n, std::size_t m, double inv_temp) {
  for (std::size_t i = 0; i < n; ++i) {
    double* row = p + i * m;
    double mx = row[0] * inv_temp;
    for (std::size_t j = 0; j < m; ++j) {
      row[j] *= inv_temp;
      if (row[j] > mx) mx = row[j];
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < m; ++j) row[j] /= sum;
  }
}

// Single-head attention over row-major matrices: Q is n_q x d, K and V are
// n_k x d. Returns the n_q x d output.
inline std::vector<double> attention_ref(const float* q, std::size_t n_q, const float* k,
                                         const float* v, std::size_t n_k, std::size_t d) {
  if (n_q == 0 || n_k == 0 || d == 0) throw ShapeError("attention needs nonempty inputs");
  std::vector<double> p(n_q * n_k);
  matmul_abt(q, n_q, k, n_k, d, p.data());
  softmax_rows(p.data(), n_q, n_k, 1.0 / std::sqrt(double(d)));
  std::vector<double> out(n_q * d, 0.0);
  for (std::size_t i = 0; i < n_q; ++i) {
    for (std::size_t j = 0; j < n_k; ++j) {
      double w = p[i * n_k + j];
      const float* vj = v + j * d;
      double* oi = out.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) oi[c] += w * double(vj[c]);
    }
  }
  return out;
}

// One decode-step query against a cache view laid out tokens x channels,
// channels = heads * head_dim, attending per head over its slice.
inline std::vector<double> attention_decode(const float* q, const float* k_view,
                                            const float* v_view, std::size_t n,
                                            std::size_t heads, std::size_t head_dim) {
  if (n == 0) throw ShapeError("attention over an empty cache");
  std::size_t channels = heads * head_dim;
  std::vector<double> out(channels, 0.0);
  std::vector<double> scores(n);
  double inv_temp = 1.0 / std::sqrt(double(head_dim));
  for (std::size_t h = 0; h < heads; ++h) {
    std::size_t off = h * head_dim;
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      const float* kj = k_view + j * channels + off;
      double acc = 0.0;
      for (std::size_t c = 0; c < head_dim; ++c) acc += double(q[off + c]) * double(kj[c]);
      acc *= inv_temp;
      scores[j] = acc;
      if (acc > mx) mx = acc;
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      sum += scores[j];
    }
    double inv_sum = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) {
      double w = scores[j] * inv_sum;
      const float* vj = v_view + j * channels + off;
      for (std::size_t c = 0; c < head_dim; ++c) out[off + c] += w * double(vj[c]);
    }
  }
  return out;
}

}  // namespace pqkv
