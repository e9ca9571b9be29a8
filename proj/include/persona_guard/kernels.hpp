#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>

// Dense CPU kernels for the transformer and the persona classifiers.
// Row-major throughout; linear weights are stored (in, out) so the forward
// inner loop runs over contiguous outputs. Every kernel that produces a
// gradient accumulates into its destination.

namespace persona_guard::kernels {

template <std::floating_point Real>
inline Real dot(const Real* a, const Real* b, int n) {
  Real acc = 0;
#pragma omp simd reduction(+ : acc)
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <std::floating_point Real>
inline void axpy(Real* y, Real alpha, const Real* x, int n) {
#pragma omp simd
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// out[T,N] = in[T,K] * W[K,N] + bias[N]
template <std::floating_point Real>
void linear_forward(Real* out, const Real* in, const Real* weight, const Real* bias, int rows,
                    int in_dim, int out_dim) {
  for (int t = 0; t < rows; ++t) {
    Real* o = out + static_cast<std::ptrdiff_t>(t) * out_dim;
    if (bias != nullptr) {
      std::copy(bias, bias + out_dim, o);
    } else {
      std::fill(o, o + out_dim, Real(0));
    }
    const Real* x = in + static_cast<std::ptrdiff_t>(t) * in_dim;
    for (int k = 0; k < in_dim; ++k) {
      const Real xk = x[k];
      if (xk == Real(0)) continue;
      axpy(o, xk, weight + static_cast<std::ptrdiff_t>(k) * out_dim, out_dim);
    }
  }
}

template <std::floating_point Real>
void linear_backward(Real* d_in, Real* d_weight, Real* d_bias, const Real* d_out, const Real* in,
                     const Real* weight, int rows, int in_dim, int out_dim) {
  for (int t = 0; t < rows; ++t) {
    const Real* g = d_out + static_cast<std::ptrdiff_t>(t) * out_dim;
    const Real* x = in + static_cast<std::ptrdiff_t>(t) * in_dim;
    if (d_in != nullptr) {
      Real* dx = d_in + static_cast<std::ptrdiff_t>(t) * in_dim;
      for (int k = 0; k < in_dim; ++k)
        dx[k] += dot(g, weight + static_cast<std::ptrdiff_t>(k) * out_dim, out_dim);
    }
    if (d_weight != nullptr) {
      for (int k = 0; k < in_dim; ++k) {
        if (x[k] == Real(0)) continue;
        axpy(d_weight + static_cast<std::ptrdiff_t>(k) * out_dim, x[k], g, out_dim);
      }
    }
    if (d_bias != nullptr) axpy(d_bias, Real(1), g, out_dim);
  }
}

template <std::floating_point Real>
void layernorm_forward(Real* out, Real* mean, Real* rstd, const Real* in, const Real* weight,
                       const Real* bias, int rows, int dim) {
  constexpr Real eps = Real(1e-5);
  for (int t = 0; t < rows; ++t) {
    const Real* x = in + static_cast<std::ptrdiff_t>(t) * dim;
    Real m = 0;
    for (int i = 0; i < dim; ++i) m += x[i];
    m /= static_cast<Real>(dim);
    Real v = 0;
    for (int i = 0; i < dim; ++i) v += (x[i] - m) * (x[i] - m);
    v /= static_cast<Real>(dim);
    const Real s = Real(1) / std::sqrt(v + eps);
    Real* o = out + static_cast<std::ptrdiff_t>(t) * dim;
    for (int i = 0; i < dim; ++i) o[i] = (x[i] - m) * s * weight[i] + bias[i];
    mean[t] = m;
    rstd[t] = s;
  }
}

template <std::floating_point Real>
void layernorm_backward(Real* d_in, Real* d_weight, Real* d_bias, const Real* d_out,
                        const Real* in, const Real* weight, const Real* mean, const Real* rstd,
                        int rows, int dim) {
  for (int t = 0; t < rows; ++t) {
    const Real* g = d_out + static_cast<std::ptrdiff_t>(t) * dim;
    const Real* x = in + static_cast<std::ptrdiff_t>(t) * dim;
    Real* dx = d_in + static_cast<std::ptrdiff_t>(t) * dim;
    const Real m = mean[t];
    const Real s = rstd[t];
    Real g_mean = 0;
    Real g_norm_mean = 0;
    for (int i = 0; i < dim; ++i) {
      const Real norm = (x[i] - m) * s;
      const Real gn = weight[i] * g[i];
      g_mean += gn;
      g_norm_mean += gn * norm;
    }
    g_mean /= static_cast<Real>(dim);
    g_norm_mean /= static_cast<Real>(dim);
    for (int i = 0; i < dim; ++i) {
      const Real norm = (x[i] - m) * s;
      const Real gn = weight[i] * g[i];
      d_bias[i] += g[i];
      d_weight[i] += norm * g[i];
      dx[i] += (gn - g_mean - norm * g_norm_mean) * s;
    }
  }
}

// tanh approximation, as in GPT-2
template <std::floating_point Real>
void gelu_forward(Real* out, const Real* in, std::size_t n) {
  constexpr Real c = Real(0.7978845608028654);
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = in[i];
    out[i] = Real(0.5) * x * (Real(1) + std::tanh(c * (x + Real(0.044715) * x * x * x)));
  }
}

template <std::floating_point Real>
void gelu_backward(Real* d_in, const Real* in, const Real* d_out, std::size_t n) {
  constexpr Real c = Real(0.7978845608028654);
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = in[i];
    const Real u = c * (x + Real(0.044715) * x * x * x);
    const Real th = std::tanh(u);
    const Real sech2 = Real(1) - th * th;
    const Real local = Real(0.5) * (Real(1) + th) +
                       Real(0.5) * x * sech2 * c * (Real(1) + Real(3) * Real(0.044715) * x * x);
    d_in[i] += local * d_out[i];
  }
}

/// Numerically stable softmax in place; returns log-sum-exp.
template <std::floating_point Real>
Real softmax_inplace(Real* v, int n) {
  Real mx = v[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
  Real sum = 0;
  for (int i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - mx);
    sum += v[i];
  }
  const Real inv = Real(1) / sum;
  for (int i = 0; i < n; ++i) v[i] *= inv;
  return mx + std::log(sum);
}

/// Causal multi-head attention.
/// qkv[T, 3C] holds (q | k | v); probs[H, T, T] caches the attention weights.
template <std::floating_point Real>
void attention_forward(Real* out, Real* probs, const Real* qkv, int rows, int dim, int heads) {
  const int hs = dim / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hs));
  const std::ptrdiff_t stride = 3 * dim;
  std::fill(out, out + static_cast<std::ptrdiff_t>(rows) * dim, Real(0));
  for (int h = 0; h < heads; ++h) {
    for (int t = 0; t < rows; ++t) {
      const Real* q = qkv + t * stride + h * hs;
      Real* p = probs + (static_cast<std::ptrdiff_t>(h) * rows + t) * rows;
      for (int s = 0; s <= t; ++s) p[s] = dot(q, qkv + s * stride + dim + h * hs, hs) * scale;
      softmax_inplace(p, t + 1);
      for (int s = t + 1; s < rows; ++s) p[s] = 0;
      Real* o = out + static_cast<std::ptrdiff_t>(t) * dim + h * hs;
      for (int s = 0; s <= t; ++s) axpy(o, p[s], qkv + s * stride + 2 * dim + h * hs, hs);
    }
  }
}

template <std::floating_point Real>
void attention_backward(Real* d_qkv, Real* scratch_rows, const Real* d_out, const Real* qkv,
                        const Real* probs, int rows, int dim, int heads) {
  const int hs = dim / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hs));
  const std::ptrdiff_t stride = 3 * dim;
  for (int h = 0; h < heads; ++h) {
    for (int t = 0; t < rows; ++t) {
      const Real* p = probs + (static_cast<std::ptrdiff_t>(h) * rows + t) * rows;
      const Real* g = d_out + static_cast<std::ptrdiff_t>(t) * dim + h * hs;
      Real* dp = scratch_rows;
      Real weighted = 0;
      for (int s = 0; s <= t; ++s) {
        dp[s] = dot(g, qkv + s * stride + 2 * dim + h * hs, hs);
        axpy(d_qkv + s * stride + 2 * dim + h * hs, p[s], g, hs);
        weighted += p[s] * dp[s];
      }
      const Real* q = qkv + t * stride + h * hs;
      Real* dq = d_qkv + t * stride + h * hs;
      for (int s = 0; s <= t; ++s) {
        const Real ds = p[s] * (dp[s] - weighted) * scale;
        if (ds == Real(0)) continue;
        axpy(dq, ds, qkv + s * stride + dim + h * hs, hs);
        axpy(d_qkv + s * stride + dim + h * hs, ds, q, hs);
      }
    }
  }
}

}  // namespace persona_guard::kernels
