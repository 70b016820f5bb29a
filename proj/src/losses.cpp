#include "jrs/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "jrs/simd/kernels.hpp"

namespace jrs {

namespace {
void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
}  // namespace

double ncc(std::span<const float> a, std::span<const float> b, std::span<float> grad_a, double scale) {
  require_same(a.size(), b.size(), "ncc");
  if (a.size() < 2) throw std::invalid_argument("ncc needs at least two voxels");
  if (!grad_a.empty()) require_same(grad_a.size(), a.size(), "ncc gradient");

  const auto& k = simd::kernels();
  const std::size_t n = a.size();
  double sa, qa, sb, qb;
  k.sum_sumsq(a.data(), n, &sa, &qa);
  k.sum_sumsq(b.data(), n, &sb, &qb);
  const double ma = sa / n, mb = sb / n;
  const double va = qa - sa * ma, vb = qb - sb * mb;  // n * variance
  if (va / n < kNccMinVariance || vb / n < kNccMinVariance) return 0.0;
  const double cov = k.dot(a.data(), b.data(), n) - sa * mb;
  const double denom = std::sqrt(va * vb);
  const double r = cov / denom;

  if (!grad_a.empty()) {
    // dr/da_i = (b_i - mb) / denom - r (a_i - ma) / va
    const double c1 = scale / denom, c2 = scale * r / va;
    for (std::size_t i = 0; i < n; ++i)
      grad_a[i] += static_cast<float>(c1 * (b[i] - mb) - c2 * (a[i] - ma));
  }
  return r;
}

double soft_dice(std::span<const float> p, std::span<const float> q, int channels, std::span<float> grad_p,
                 double scale) {
  require_same(p.size(), q.size(), "soft_dice");
  if (channels < 1 || p.size() % channels != 0) throw std::invalid_argument("soft_dice: bad channel count");
  if (!grad_p.empty()) require_same(grad_p.size(), p.size(), "soft_dice gradient");
  const std::size_t n = p.size() / channels;
  const auto& k = simd::kernels();

  struct Sums {
    double sp, sq, spq;
  };
  std::vector<Sums> sums;
  std::vector<int> present;
  for (int l = 1; l < channels; ++l) {
    const float* pl = p.data() + l * n;
    const float* ql = q.data() + l * n;
    double sp, sq, dummy;
    k.sum_sumsq(pl, n, &sp, &dummy);
    k.sum_sumsq(ql, n, &sq, &dummy);
    if (sp + sq <= 0.0) continue;
    sums.push_back({sp, sq, k.dot(pl, ql, n)});
    present.push_back(l);
  }
  if (present.empty()) return 1.0;

  const double m = static_cast<double>(present.size());
  double dice = 0.0;
  for (std::size_t j = 0; j < present.size(); ++j) {
    const auto& s = sums[j];
    const double den = s.sp + s.sq + kDiceEpsilon;
    dice += 2.0 * s.spq / den;
    if (!grad_p.empty()) {
      // d/dp_i [2 spq / den] = 2 q_i / den - 2 spq / den^2
      const double a = scale * 2.0 / (den * m);
      const double b = scale * 2.0 * s.spq / (den * den * m);
      const float* ql = q.data() + present[j] * n;
      float* gl = grad_p.data() + present[j] * n;
      for (std::size_t i = 0; i < n; ++i) gl[i] += static_cast<float>(a * ql[i] - b);
    }
  }
  return dice / m;
}

SimilarityTerms similarity_loss(std::span<const float> fixed, std::span<const float> warped,
                                std::span<const float> fixed_seg, std::span<const float> warped_seg, int channels,
                                std::span<float> grad_warped, std::span<float> grad_warped_seg, double scale) {
  require_same(fixed.size(), warped.size(), "similarity_loss images");
  require_same(fixed_seg.size(), warped_seg.size(), "similarity_loss segmentations");
  if (fixed_seg.size() != fixed.size() * static_cast<std::size_t>(channels))
    throw std::invalid_argument("similarity_loss: segmentation stack does not match image shape");
  SimilarityTerms t;
  t.ncc_term = 1.0 - ncc(warped, fixed, grad_warped, -scale);
  t.dice_term = 1.0 - soft_dice(warped_seg, fixed_seg, channels, grad_warped_seg, -scale);
  return t;
}

double bending_energy(const DVF& dvf, std::span<float> grad, double scale) {
  const Dims3 d = dvf.dims;
  if (d.x < 3 || d.y < 3 || d.z < 3) throw std::invalid_argument("bending_energy needs >= 3 voxels per axis");
  if (!grad.empty()) require_same(grad.size(), dvf.disp.size(), "bending_energy gradient");

  const double hx = dvf.spacing[0], hy = dvf.spacing[1], hz = dvf.spacing[2];
  const std::ptrdiff_t sx = 1, sy = d.x, sz = static_cast<std::ptrdiff_t>(d.x) * d.y;
  const double interior = static_cast<double>(d.x - 2) * (d.y - 2) * (d.z - 2);
  const double norm = 1.0 / (3.0 * interior);
  const double kx = 1.0 / (hx * hx), ky = 1.0 / (hy * hy), kz = 1.0 / (hz * hz);
  const double kxy = 1.0 / (4 * hx * hy), kxz = 1.0 / (4 * hx * hz), kyz = 1.0 / (4 * hy * hz);
  const bool want = !grad.empty();
  const double g = scale * norm;

  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const float* u = dvf.component(c);
    float* gu = want ? grad.data() + c * dvf.voxels() : nullptr;
    for (int z = 1; z < d.z - 1; ++z)
      for (int y = 1; y < d.y - 1; ++y)
        for (int x = 1; x < d.x - 1; ++x) {
          const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(linear_index(d, x, y, z));
          const double c0 = u[i];
          const double uxx = (u[i + sx] - 2 * c0 + u[i - sx]) * kx;
          const double uyy = (u[i + sy] - 2 * c0 + u[i - sy]) * ky;
          const double uzz = (u[i + sz] - 2 * c0 + u[i - sz]) * kz;
          const double uxy = (static_cast<double>(u[i + sx + sy]) - u[i + sx - sy] - u[i - sx + sy] + u[i - sx - sy]) * kxy;
          const double uxz = (static_cast<double>(u[i + sx + sz]) - u[i + sx - sz] - u[i - sx + sz] + u[i - sx - sz]) * kxz;
          const double uyz = (static_cast<double>(u[i + sy + sz]) - u[i + sy - sz] - u[i - sy + sz] + u[i - sy - sz]) * kyz;
          total += uxx * uxx + uyy * uyy + uzz * uzz + 2 * (uxy * uxy + uxz * uxz + uyz * uyz);
          if (!want) continue;
          // d/du of the squared second differences
          const double ax = 2 * g * uxx * kx, ay = 2 * g * uyy * ky, az = 2 * g * uzz * kz;
          gu[i + sx] += static_cast<float>(ax);
          gu[i - sx] += static_cast<float>(ax);
          gu[i + sy] += static_cast<float>(ay);
          gu[i - sy] += static_cast<float>(ay);
          gu[i + sz] += static_cast<float>(az);
          gu[i - sz] += static_cast<float>(az);
          gu[i] += static_cast<float>(-2 * (ax + ay + az));
          const double bxy = 4 * g * uxy * kxy, bxz = 4 * g * uxz * kxz, byz = 4 * g * uyz * kyz;
          gu[i + sx + sy] += static_cast<float>(bxy);
          gu[i - sx - sy] += static_cast<float>(bxy);
          gu[i + sx - sy] -= static_cast<float>(bxy);
          gu[i - sx + sy] -= static_cast<float>(bxy);
          gu[i + sx + sz] += static_cast<float>(bxz);
          gu[i - sx - sz] += static_cast<float>(bxz);
          gu[i + sx - sz] -= static_cast<float>(bxz);
          gu[i - sx + sz] -= static_cast<float>(bxz);
          gu[i + sy + sz] += static_cast<float>(byz);
          gu[i - sy - sz] += static_cast<float>(byz);
          gu[i + sy - sz] -= static_cast<float>(byz);
          gu[i - sy + sz] -= static_cast<float>(byz);
        }
  }
  return total * norm;
}

double wgan_critic_loss(std::span<const float> d_fake, std::span<const float> d_real, std::span<float> grad_fake,
                        std::span<float> grad_real) {
  if (d_fake.empty() || d_real.empty()) throw std::invalid_argument("wgan_critic_loss: empty score grid");
  double sf = 0.0, sr = 0.0;
  for (float v : d_fake) sf += v;
  for (float v : d_real) sr += v;
  const double nf = static_cast<double>(d_fake.size()), nr = static_cast<double>(d_real.size());
  if (!grad_fake.empty())
    for (auto& g : grad_fake) g += static_cast<float>(1.0 / nf);
  if (!grad_real.empty())
    for (auto& g : grad_real) g -= static_cast<float>(1.0 / nr);
  return sf / nf - sr / nr;
}

double wgan_generator_loss(std::span<const float> d_fake, std::span<float> grad_fake, double scale, double sign) {
  if (d_fake.empty()) throw std::invalid_argument("wgan_generator_loss: empty score grid");
  double s = 0.0;
  for (float v : d_fake) s += v;
  const double n = static_cast<double>(d_fake.size());
  if (!grad_fake.empty())
    for (auto& g : grad_fake) g += static_cast<float>(scale * sign / n);
  return sign * s / n;
}

LossBreakdown generator_total_loss(const LossBreakdown& parts, double lambda1, double lambda2) {
  LossBreakdown out = parts;
  out.total = parts.sim_ncc + parts.sim_dsc + lambda1 * parts.smooth + lambda2 * parts.adv;
  return out;
}

}  // namespace jrs
