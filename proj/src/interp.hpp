#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "jrs/volgrid.hpp"

namespace jrs::detail {

// Trilinear stencil at a continuous voxel index, clamp-to-edge.
// `inside[a]` is false when the coordinate was clamped on axis a, in which
// case the sample is locally constant along that axis.
struct Stencil {
  std::size_t idx[8];
  double w[8];
  double frac[3];
  int i0[3], i1[3];
  bool inside[3];
};

inline void axis_coord(double p, int n, int& lo, int& hi, double& f, bool& inside) {
  const double maxp = static_cast<double>(n - 1);
  inside = p >= 0.0 && p <= maxp;
  // NaN positions (diverged fields) read the first voxel instead of wild memory
  const double c = std::isnan(p) ? 0.0 : std::clamp(p, 0.0, maxp);
  lo = static_cast<int>(std::floor(c));
  if (lo > n - 1) lo = n - 1;
  hi = std::min(lo + 1, n - 1);
  f = c - lo;
  if (lo == hi) f = 0.0;
}

inline Stencil make_stencil(const Dims3& d, double px, double py, double pz) {
  Stencil s;
  const double p[3] = {px, py, pz};
  for (int a = 0; a < 3; ++a) axis_coord(p[a], d[a], s.i0[a], s.i1[a], s.frac[a], s.inside[a]);
  int k = 0;
  for (int cz = 0; cz < 2; ++cz)
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx, ++k) {
        const int x = cx ? s.i1[0] : s.i0[0];
        const int y = cy ? s.i1[1] : s.i0[1];
        const int z = cz ? s.i1[2] : s.i0[2];
        s.idx[k] = linear_index(d, x, y, z);
        s.w[k] = (cx ? s.frac[0] : 1.0 - s.frac[0]) * (cy ? s.frac[1] : 1.0 - s.frac[1]) *
                 (cz ? s.frac[2] : 1.0 - s.frac[2]);
      }
  return s;
}

inline double apply(const Stencil& s, const float* data) {
  double v = 0.0;
  for (int k = 0; k < 8; ++k) v += s.w[k] * data[s.idx[k]];
  return v;
}

// d(sample)/d(p_axis) for the stencil; zero on clamped axes.
inline void gradient(const Stencil& s, const float* data, double g[3]) {
  double v[8];
  for (int k = 0; k < 8; ++k) v[k] = data[s.idx[k]];
  const double fx = s.frac[0], fy = s.frac[1], fz = s.frac[2];
  // corners ordered (x fastest): k = cx + 2 cy + 4 cz
  const double dx = (1 - fy) * (1 - fz) * (v[1] - v[0]) + fy * (1 - fz) * (v[3] - v[2]) +
                    (1 - fy) * fz * (v[5] - v[4]) + fy * fz * (v[7] - v[6]);
  const double dy = (1 - fx) * (1 - fz) * (v[2] - v[0]) + fx * (1 - fz) * (v[3] - v[1]) +
                    (1 - fx) * fz * (v[6] - v[4]) + fx * fz * (v[7] - v[5]);
  const double dz = (1 - fx) * (1 - fy) * (v[4] - v[0]) + fx * (1 - fy) * (v[5] - v[1]) +
                    (1 - fx) * fy * (v[6] - v[2]) + fx * fy * (v[7] - v[3]);
  g[0] = s.inside[0] && s.i0[0] != s.i1[0] ? dx : 0.0;
  g[1] = s.inside[1] && s.i0[1] != s.i1[1] ? dy : 0.0;
  g[2] = s.inside[2] && s.i0[2] != s.i1[2] ? dz : 0.0;
}

}  // namespace jrs::detail
