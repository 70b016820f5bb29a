#include "jrs/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace jrs {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

// Scalar field in [-1, 1]: uniform control values, trilinear upsampling.
std::vector<float> control_field(const Dims3& d, const Vec3& sp, double cs, std::mt19937_64& rng) {
  int n[3];
  for (int a = 0; a < 3; ++a) n[a] = static_cast<int>(std::ceil((d[a] - 1) * sp[a] / cs)) + 1;
  n[0] = std::max(n[0], 2);
  n[1] = std::max(n[1], 2);
  n[2] = std::max(n[2], 2);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> ctrl(static_cast<std::size_t>(n[0]) * n[1] * n[2]);
  for (auto& v : ctrl) v = u(rng);
  auto c = [&](int i, int j, int k) { return ctrl[(static_cast<std::size_t>(k) * n[1] + j) * n[0] + i]; };

  std::vector<float> out(d.count());
  for (int z = 0; z < d.z; ++z) {
    const double tz = z * sp[2] / cs;
    const int k = std::min(static_cast<int>(tz), n[2] - 2);
    const double fz = tz - k;
    for (int y = 0; y < d.y; ++y) {
      const double ty = y * sp[1] / cs;
      const int j = std::min(static_cast<int>(ty), n[1] - 2);
      const double fy = ty - j;
      for (int x = 0; x < d.x; ++x) {
        const double tx = x * sp[0] / cs;
        const int i = std::min(static_cast<int>(tx), n[0] - 2);
        const double fx = tx - i;
        double v = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              v += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz) * c(i + dx, j + dy, k + dz);
        out[linear_index(d, x, y, z)] = static_cast<float>(v);
      }
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma_vox) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma_vox * sigma_vox));
  for (auto& v : k) v /= s;
  return k;
}

}  // namespace

Volume gaussian_smooth(const Volume& vol, double sigma_mm) {
  if (sigma_mm <= 0.0) return vol;
  Volume cur = vol, next = vol;
  const Dims3 d = vol.dims;
  for (int axis = 0; axis < 3; ++axis) {
    const auto k = gaussian_kernel(sigma_mm / vol.spacing[axis]);
    const int r = static_cast<int>(k.size() / 2);
    const int n = d[axis];
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d.x : static_cast<std::size_t>(d.x) * d.y;
    for (int z = 0; z < d.z; ++z)
      for (int y = 0; y < d.y; ++y)
        for (int x = 0; x < d.x; ++x) {
          const int p = axis == 0 ? x : axis == 1 ? y : z;
          const std::size_t base = linear_index(d, x, y, z) - p * stride;
          double s = 0.0;
          for (int t = -r; t <= r; ++t) s += k[t + r] * cur.data[base + std::clamp(p + t, 0, n - 1) * stride];
          next.data[linear_index(d, x, y, z)] = static_cast<float>(s);
        }
    std::swap(cur, next);
  }
  return cur;
}

DVF random_smooth_dvf(const Dims3& dims, const Vec3& spacing, double max_mm, double control_spacing_mm,
                      std::uint64_t seed) {
  for (int a = 0; a < 3; ++a)
    if (control_spacing_mm < 2.0 * spacing[a])
      throw std::invalid_argument("control spacing must cover at least 2 voxels");
  DVF f(dims, spacing);
  if (max_mm <= 0.0) return f;
  std::mt19937_64 rng(seed);
  for (int c = 0; c < 3; ++c) {
    const auto comp = control_field(dims, spacing, control_spacing_mm, rng);
    std::copy(comp.begin(), comp.end(), f.component(c));
  }
  const double m = f.max_magnitude();
  if (m > 0.0)
    for (auto& v : f.disp) v = static_cast<float>(v * (max_mm / m));
  return f;
}

Volume disturb(const Volume& vol, const DisturbConfig& cfg, DisturbTrace* trace) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // fixed draw order keeps every component's randomness independent of the others' activation
  const bool want[4] = {u01(rng) < cfg.activation_prob, u01(rng) < cfg.activation_prob,
                        u01(rng) < cfg.activation_prob, u01(rng) < cfg.activation_prob};
  const double gamma = cfg.gamma_range.first + (cfg.gamma_range.second - cfg.gamma_range.first) * u01(rng);
  const double def_scale = u01(rng);

  DisturbTrace t;
  Volume out = vol;
  if (want[0] && cfg.smooth_std > 0.0) {
    out = gaussian_smooth(out, cfg.smooth_std);
    t.smoothed = true;
  }
  if (want[1] && cfg.noise_std > 0.0) {
    std::mt19937_64 nrng(mix_seed(cfg.seed, 1));
    std::normal_distribution<double> n01;
    for (auto& v : out.data) {
      double z;
      do z = n01(nrng);
      while (std::abs(z) > 4.0);
      v = static_cast<float>(v + cfg.noise_std * z);
    }
    t.noised = true;
  }
  if (want[2] && (cfg.gamma_range.first != 0.0 || cfg.gamma_range.second != 0.0)) {
    const double e = std::exp2(gamma);
    for (auto& v : out.data) {
      const double r = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
      v = static_cast<float>(2.0 * std::pow(r, e) - 1.0);
    }
    t.gamma_applied = true;
    t.gamma = gamma;
  }
  if (want[3] && cfg.max_def_mm > 0.0) {
    double cs = cfg.control_spacing_mm;
    for (int a = 0; a < 3; ++a) cs = std::max(cs, 2.0 * vol.spacing[a]);
    t.deformation = random_smooth_dvf(vol.dims, vol.spacing, def_scale * cfg.max_def_mm, cs, mix_seed(cfg.seed, 2));
    t.deformation.origin = vol.origin;
    out = warp_trilinear(out, t.deformation);
    t.deformed = true;
  }
  if (trace) *trace = std::move(t);
  return out;
}

// --- Phantoms -------------------------------------------------------------------

std::vector<OrganSpec> PhantomSpec::default_organs() {
  // Pelvis-like layout on a 64 mm cube: x left-right, y anterior-posterior, z inferior-superior.
  return {
      {"prostate", Primitive::kEllipsoid, 0.40f, {0, -4, -9}, 1.5, {4, 3.5, 4}, {5, 4.5, 5}, 1},
      {"seminal_vesicles", Primitive::kTube, 0.65f, {0, 4, 1}, 1.5, {8, 2.5, 2.5}, {10, 3, 3}, 1},
      {"lymph_nodes", Primitive::kSphere, 0.20f, {16, -4, 6}, 1.5, {3, 3, 3}, {3.5, 3.5, 3.5}, 2},
      {"rectum", Primitive::kTube, -0.55f, {0, 13, -4}, 1.5, {4, 3.5, 16}, {5, 4.5, 20}, 1},
      {"bladder", Primitive::kEllipsoid, 0.10f, {0, -9, 12}, 1.5, {7, 6, 6}, {8.5, 7, 7}, 1},
  };
}

namespace {

constexpr float kAir = -1.0f;
constexpr float kSoftTissue = -0.15f;

bool inside(const OrganSpec& o, const Vec3& c, const Vec3& r, const Vec3& p) {
  const double dx = (p[0] - c[0]) / r[0], dy = (p[1] - c[1]) / r[1], dz = (p[2] - c[2]) / r[2];
  if (o.shape != Primitive::kTube) return dx * dx + dy * dy + dz * dz <= 1.0;
  // cylinder along the longest radius axis, flat ends
  const int axis = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  const double q[3] = {dx, dy, dz};
  double cross = 0.0;
  for (int a = 0; a < 3; ++a)
    if (a != axis) cross += q[a] * q[a];
  return cross <= 1.0 && std::abs(q[axis]) <= 1.0;
}

struct Anatomy {
  Volume image;
  Segmentation seg;
};

// False when primitives overlap or leave the torso.
bool build_anatomy(const PhantomSpec& spec, std::mt19937_64& rng, Anatomy& out) {
  const Dims3 d = spec.dims;
  const Vec3 sp = spec.spacing;
  const Vec3 half{0.5 * (d.x - 1) * sp[0], 0.5 * (d.y - 1) * sp[1], 0.5 * (d.z - 1) * sp[2]};
  out.image = Volume(d, sp, {0, 0, 0}, kAir);
  out.seg = Segmentation(d, sp);
  out.seg.label_names[0] = "background";

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const auto texture = control_field(d, sp, 8.0, rng);
  const Vec3 torso_r{0.46 * d.x * sp[0], 0.36 * d.y * sp[1], 10.0 * d.z * sp[2]};
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const double px = x * sp[0] - half[0], py = y * sp[1] - half[1];
        if ((px * px) / (torso_r[0] * torso_r[0]) + (py * py) / (torso_r[1] * torso_r[1]) <= 1.0)
          out.image.at(x, y, z) = kSoftTissue;
      }

  for (std::size_t k = 0; k < spec.organs.size(); ++k) {
    const OrganSpec& o = spec.organs[k];
    const int label = static_cast<int>(k + 1);
    out.seg.label_names[label] = o.name;
    for (int copy = 0; copy < o.count; ++copy) {
      Vec3 c = o.center_mm, r;
      if (copy % 2 == 1) c[0] = -c[0];  // mirrored pair
      for (int a = 0; a < 3; ++a) {
        c[a] += o.jitter_mm * (2.0 * u01(rng) - 1.0) + half[a];
        r[a] = o.size_min_mm[a] + (o.size_max_mm[a] - o.size_min_mm[a]) * u01(rng);
      }
      for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
          for (int x = 0; x < d.x; ++x) {
            const Vec3 p{x * sp[0], y * sp[1], z * sp[2]};
            if (!inside(o, c, r, p)) continue;
            // one-voxel gap to any other structure, and inside the torso
            if (out.image.at(x, y, z) == kAir) return false;
            for (int dz = -1; dz <= 1; ++dz)
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                  const int xx = std::clamp(x + dx, 0, d.x - 1), yy = std::clamp(y + dy, 0, d.y - 1),
                            zz = std::clamp(z + dz, 0, d.z - 1);
                  const int l = out.seg.at(xx, yy, zz);
                  if (l != 0 && l != label) return false;
                }
            out.seg.at(x, y, z) = static_cast<std::uint8_t>(label);
            out.image.at(x, y, z) = o.intensity;
          }
    }
  }
  for (std::size_t i = 0; i < out.image.data.size(); ++i)
    if (out.image.data[i] != kAir) out.image.data[i] += 0.08f * texture[i];
  return true;
}

void add_noise(Volume& v, double std, std::uint64_t seed) {
  if (std <= 0.0) return;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for (auto& x : v.data) x = std::clamp(static_cast<float>(x + n(rng)), -1.0f, 1.0f);
}

}  // namespace

PhantomPair make_phantom_pair(const PhantomSpec& spec) {
  if (!spec.dims.valid()) throw std::invalid_argument("phantom dims must be positive");
  for (int attempt = 0; attempt < 100; ++attempt) {
    const std::uint64_t sub = mix_seed(spec.seed, attempt);
    std::mt19937_64 rng(sub);
    Anatomy a;
    if (!build_anatomy(spec, rng, a)) continue;
    DVF gt = random_smooth_dvf(spec.dims, spec.spacing, spec.amplitude_mm, spec.control_spacing_mm, mix_seed(sub, 7));
    if (spec.amplitude_mm > 0.0) {
      const Volume j = jacobian_determinant(gt);
      if (*std::min_element(j.data.begin(), j.data.end()) <= 0.0f) continue;
    }
    PhantomPair p;
    p.moving = warp_trilinear(a.image, gt);
    p.moving_seg = warp_labels(a.seg, gt);
    p.fixed = std::move(a.image);
    p.fixed_seg = std::move(a.seg);
    p.gt_dvf = std::move(gt);
    add_noise(p.fixed, spec.noise_std, mix_seed(sub, 11));
    add_noise(p.moving, spec.noise_std, mix_seed(sub, 13));
    return p;
  }
  throw Error("phantom generation failed: no valid layout in 100 attempts (seed " + std::to_string(spec.seed) + ")");
}

}  // namespace jrs
