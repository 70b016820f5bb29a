// Compiled with -mavx2 -mfma; only reached after a CPUID check.
#include "jrs/simd/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace jrs::simd {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

inline double hsum_pd(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d h = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, h));
}

void tap_dot_row(float* out, std::size_t n, const float* in,
                 const std::ptrdiff_t* off, const float* w, std::size_t ntaps,
                 float bias) {
  std::size_t x = 0;
  const __m256 vb = _mm256_set1_ps(bias);
  for (; x + 32 <= n; x += 32) {
    __m256 a0 = vb, a1 = vb, a2 = vb, a3 = vb;
    for (std::size_t t = 0; t < ntaps; ++t) {
      const __m256 wt = _mm256_set1_ps(w[t]);
      const float* src = in + off[t] + x;
      a0 = _mm256_fmadd_ps(wt, _mm256_loadu_ps(src), a0);
      a1 = _mm256_fmadd_ps(wt, _mm256_loadu_ps(src + 8), a1);
      a2 = _mm256_fmadd_ps(wt, _mm256_loadu_ps(src + 16), a2);
      a3 = _mm256_fmadd_ps(wt, _mm256_loadu_ps(src + 24), a3);
    }
    _mm256_storeu_ps(out + x, a0);
    _mm256_storeu_ps(out + x + 8, a1);
    _mm256_storeu_ps(out + x + 16, a2);
    _mm256_storeu_ps(out + x + 24, a3);
  }
  for (; x + 16 <= n; x += 16) {
    __m256 a0 = vb, a1 = vb;
    for (std::size_t t = 0; t < ntaps; ++t) {
      const __m256 wt = _mm256_set1_ps(w[t]);
      const float* src = in + off[t] + x;
      a0 = _mm256_fmadd_ps(wt, _mm256_loadu_ps(src), a0);
      a1 = _mm256_fmadd_ps(wt, _mm256_loadu_ps(src + 8), a1);
    }
    _mm256_storeu_ps(out + x, a0);
    _mm256_storeu_ps(out + x + 8, a1);
  }
  for (; x + 8 <= n; x += 8) {
    __m256 a0 = vb;
    for (std::size_t t = 0; t < ntaps; ++t)
      a0 = _mm256_fmadd_ps(_mm256_set1_ps(w[t]),
                           _mm256_loadu_ps(in + off[t] + x), a0);
    _mm256_storeu_ps(out + x, a0);
  }
  if (x < n) {
    float tail[8];
    for (std::size_t i = x; i < n; ++i) tail[i - x] = bias;
    for (std::size_t t = 0; t < ntaps; ++t) {
      const float wt = w[t];
      const float* src = in + off[t];
      for (std::size_t i = x; i < n; ++i) tail[i - x] += wt * src[i];
    }
    for (std::size_t i = x; i < n; ++i) out[i] = tail[i - x];
  }
}

void tap_grad_row(double* acc, const float* g, std::size_t n, const float* in,
                  const std::ptrdiff_t* off, std::size_t ntaps) {
  for (std::size_t t = 0; t < ntaps; ++t) {
    const float* src = in + off[t];
    __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
    std::size_t x = 0;
    for (; x + 16 <= n; x += 16) {
      s0 = _mm256_fmadd_ps(_mm256_loadu_ps(g + x), _mm256_loadu_ps(src + x), s0);
      s1 = _mm256_fmadd_ps(_mm256_loadu_ps(g + x + 8),
                           _mm256_loadu_ps(src + x + 8), s1);
    }
    for (; x + 8 <= n; x += 8)
      s0 = _mm256_fmadd_ps(_mm256_loadu_ps(g + x), _mm256_loadu_ps(src + x), s0);
    float s = hsum(_mm256_add_ps(s0, s1));
    for (; x < n; ++x) s += g[x] * src[x];
    acc[t] += s;
  }
}

void axpy(float* y, const float* x, float a, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i),
                                            _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

void leaky_relu(float* y, const float* x, float slope, std::size_t n) {
  const __m256 vs = _mm256_set1_ps(slope);
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 neg = _mm256_cmp_ps(v, zero, _CMP_LT_OQ);
    _mm256_storeu_ps(y + i, _mm256_blendv_ps(v, _mm256_mul_ps(v, vs), neg));
  }
  for (; i < n; ++i) y[i] = x[i] >= 0.0f ? x[i] : slope * x[i];
}

void leaky_relu_grad(float* g, const float* x, float slope, std::size_t n) {
  const __m256 vs = _mm256_set1_ps(slope);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 neg = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_LT_OQ);
    const __m256 f = _mm256_blendv_ps(one, vs, neg);
    _mm256_storeu_ps(g + i, _mm256_mul_ps(_mm256_loadu_ps(g + i), f));
  }
  for (; i < n; ++i)
    if (x[i] < 0.0f) g[i] *= slope;
}

void scale_shift(float* y, const float* x, float a, float b, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a), vb = _mm256_set1_ps(b);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vb));
  for (; i < n; ++i) y[i] = a * x[i] + b;
}

void sum_sumsq(const float* x, std::size_t n, double* sum, double* sumsq) {
  __m256d s = _mm256_setzero_pd(), q = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
    s = _mm256_add_pd(s, v);
    q = _mm256_fmadd_pd(v, v, q);
  }
  double ss = hsum_pd(s), qq = hsum_pd(q);
  for (; i < n; ++i) {
    ss += x[i];
    qq += static_cast<double>(x[i]) * x[i];
  }
  *sum = ss;
  *sumsq = qq;
}

double dot(const float* x, const float* y, std::size_t n) {
  __m256d s = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    s = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm_loadu_ps(x + i)),
                        _mm256_cvtps_pd(_mm_loadu_ps(y + i)), s);
  double r = hsum_pd(s);
  for (; i < n; ++i) r += static_cast<double>(x[i]) * y[i];
  return r;
}

void rmsprop_update(float* p, float* ms, const float* g, float lr, float rho,
                    float eps, std::size_t n) {
  const __m256 vrho = _mm256_set1_ps(rho), v1mrho = _mm256_set1_ps(1.0f - rho);
  const __m256 vlr = _mm256_set1_ps(lr), veps = _mm256_set1_ps(eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 gi = _mm256_loadu_ps(g + i);
    __m256 m = _mm256_mul_ps(vrho, _mm256_loadu_ps(ms + i));
    m = _mm256_fmadd_ps(_mm256_mul_ps(v1mrho, gi), gi, m);
    _mm256_storeu_ps(ms + i, m);
    const __m256 step = _mm256_div_ps(_mm256_mul_ps(vlr, gi),
                                      _mm256_add_ps(_mm256_sqrt_ps(m), veps));
    _mm256_storeu_ps(p + i, _mm256_sub_ps(_mm256_loadu_ps(p + i), step));
  }
  for (; i < n; ++i) {
    ms[i] = rho * ms[i] + (1.0f - rho) * g[i] * g[i];
    p[i] -= lr * g[i] / (std::sqrt(ms[i]) + eps);
  }
}

void clip(float* p, float c, std::size_t n) {
  const __m256 hi = _mm256_set1_ps(c), lo = _mm256_set1_ps(-c);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(p + i,
                     _mm256_min_ps(hi, _mm256_max_ps(lo, _mm256_loadu_ps(p + i))));
  for (; i < n; ++i) p[i] = std::clamp(p[i], -c, c);
}

}  // namespace

const KernelTable& avx2_kernel_table() {
  static const KernelTable table{
      "avx2",     tap_dot_row,     tap_grad_row, axpy,
      leaky_relu, leaky_relu_grad, scale_shift,  sum_sumsq,
      dot,        rmsprop_update,  clip};
  return table;
}

}  // namespace jrs::simd
