#pragma once

// Inner-loop kernels used by the convolution layers, optimizer and losses.
//
// Every kernel has a portable scalar reference implementation and, on x86-64,
// an AVX2/FMA variant. The active table is chosen once at startup from CPUID
// and can be overridden (tests pin both and compare them).

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace jrs::simd {

struct KernelTable {
  std::string_view name;

  // out[x] = bias + sum_t w[t] * in[off[t] + x],  x in [0, n)
  // The core of a padded 3D convolution: one output row, all taps.
  void (*tap_dot_row)(float* out, std::size_t n, const float* in,
                      const std::ptrdiff_t* off, const float* w,
                      std::size_t ntaps, float bias);

  // acc[t] += sum_x g[x] * in[off[t] + x]   (weight gradient of a row)
  void (*tap_grad_row)(double* acc, const float* g, std::size_t n,
                       const float* in, const std::ptrdiff_t* off,
                       std::size_t ntaps);

  // y[i] += a * x[i]
  void (*axpy)(float* y, const float* x, float a, std::size_t n);

  // y[i] = x[i] >= 0 ? x[i] : slope * x[i]
  void (*leaky_relu)(float* y, const float* x, float slope, std::size_t n);

  // g[i] *= (x[i] >= 0 ? 1 : slope)
  void (*leaky_relu_grad)(float* g, const float* x, float slope,
                          std::size_t n);

  // y[i] = a * x[i] + b
  void (*scale_shift)(float* y, const float* x, float a, float b,
                      std::size_t n);

  // sum and sum of squares, accumulated in double
  void (*sum_sumsq)(const float* x, std::size_t n, double* sum,
                    double* sumsq);

  // sum x[i]*y[i] in double
  double (*dot)(const float* x, const float* y, std::size_t n);

  // RMSProp: ms = rho*ms + (1-rho) g^2 ; p -= lr * g / (sqrt(ms) + eps)
  void (*rmsprop_update)(float* p, float* ms, const float* g, float lr,
                         float rho, float eps, std::size_t n);

  // p[i] = clamp(p[i], -c, c)
  void (*clip)(float* p, float c, std::size_t n);
};

const KernelTable& scalar_kernels();

// AVX2 table, or nullptr when the build or the CPU lacks AVX2+FMA.
const KernelTable* avx2_kernels();

// Active table (AVX2 when available, else scalar).
const KernelTable& kernels();

// Force a backend. Returns false if the named backend is unavailable.
bool set_backend(std::string_view name);

}  // namespace jrs::simd
