#include "jrs/simd/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace jrs::simd {
namespace {

void tap_dot_row(float* out, std::size_t n, const float* in,
                 const std::ptrdiff_t* off, const float* w, std::size_t ntaps,
                 float bias) {
  for (std::size_t x = 0; x < n; ++x) out[x] = bias;
  for (std::size_t t = 0; t < ntaps; ++t) {
    const float wt = w[t];
    const float* src = in + off[t];
    for (std::size_t x = 0; x < n; ++x) out[x] += wt * src[x];
  }
}

void tap_grad_row(double* acc, const float* g, std::size_t n, const float* in,
                  const std::ptrdiff_t* off, std::size_t ntaps) {
  for (std::size_t t = 0; t < ntaps; ++t) {
    const float* src = in + off[t];
    float s = 0.0f;
    for (std::size_t x = 0; x < n; ++x) s += g[x] * src[x];
    acc[t] += s;
  }
}

void axpy(float* y, const float* x, float a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void leaky_relu(float* y, const float* x, float slope, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0f ? x[i] : slope * x[i];
}

void leaky_relu_grad(float* g, const float* x, float slope, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] < 0.0f) g[i] *= slope;
}

void scale_shift(float* y, const float* x, float a, float b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i] + b;
}

void sum_sumsq(const float* x, std::size_t n, double* sum, double* sumsq) {
  double s = 0.0, q = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += x[i];
    q += static_cast<double>(x[i]) * x[i];
  }
  *sum = s;
  *sumsq = q;
}

double dot(const float* x, const float* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]) * y[i];
  return s;
}

void rmsprop_update(float* p, float* ms, const float* g, float lr, float rho,
                    float eps, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    ms[i] = rho * ms[i] + (1.0f - rho) * g[i] * g[i];
    p[i] -= lr * g[i] / (std::sqrt(ms[i]) + eps);
  }
}

void clip(float* p, float c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) p[i] = std::clamp(p[i], -c, c);
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{
      "scalar",       tap_dot_row, tap_grad_row,   axpy,
      leaky_relu,     leaky_relu_grad, scale_shift, sum_sumsq,
      dot,            rmsprop_update,  clip};
  return table;
}

}  // namespace jrs::simd
