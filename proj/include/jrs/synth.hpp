#pragma once

// Disturbance pipeline for the critic's "real" pairs, random smooth fields and
// the seeded phantom generator used in place of clinical scans.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jrs/warpfield.hpp"

namespace jrs {

struct DisturbConfig {
  double noise_std = 0.04;   // additive noise, [-1,1] intensity scale
  double smooth_std = 0.04;  // Gaussian kernel sigma, mm
  std::pair<double, double> gamma_range{-0.4, 0.4};
  double max_def_mm = 0.5;
  double control_spacing_mm = 8.0;
  double activation_prob = 0.5;  // per component
  std::uint64_t seed = 0;
};

// What one call to disturb() actually did.
struct DisturbTrace {
  bool smoothed = false, noised = false, gamma_applied = false, deformed = false;
  double gamma = 0.0;  // exponent is 2^gamma
  DVF deformation;     // empty unless deformed
};

// smooth -> noise -> gamma -> deform, each active with activation_prob.
// Components with zero amplitude are skipped. Noise is truncated at 4 sigma.
Volume disturb(const Volume& vol, const DisturbConfig& cfg, DisturbTrace* trace = nullptr);

// Separable Gaussian blur, sigma in mm, clamp-to-edge.
Volume gaussian_smooth(const Volume& vol, double sigma_mm);

// Uniform random vectors on a control grid with `control_spacing_mm` pitch,
// trilinearly upsampled and rescaled so the largest magnitude is max_mm.
DVF random_smooth_dvf(const Dims3& dims, const Vec3& spacing, double max_mm, double control_spacing_mm,
                      std::uint64_t seed);

enum class Primitive { kEllipsoid, kTube, kSphere };

struct OrganSpec {
  std::string name;
  Primitive shape = Primitive::kEllipsoid;
  float intensity = 0.0f;
  Vec3 center_mm{0, 0, 0};  // relative to the grid center
  double jitter_mm = 2.0;   // center jitter per axis
  Vec3 size_min_mm{4, 4, 4}, size_max_mm{6, 6, 6};  // radii; tubes: (radius, radius, half length)
  int count = 1;            // several copies, e.g. lymph nodes
};

struct PhantomSpec {
  Dims3 dims{64, 64, 64};
  Vec3 spacing{1.0, 1.0, 1.0};
  double amplitude_mm = 5.0;
  double control_spacing_mm = 16.0;
  double noise_std = 0.02;
  std::vector<OrganSpec> organs = default_organs();
  std::uint64_t seed = 0;

  static std::vector<OrganSpec> default_organs();
};

struct PhantomPair {
  Volume fixed;
  Segmentation fixed_seg;
  Volume moving;
  Segmentation moving_seg;
  DVF gt_dvf;  // moving = fixed warped by gt_dvf
};

// Throws Error when no valid layout/deformation is found within 100 sub-seeds.
PhantomPair make_phantom_pair(const PhantomSpec& spec);

// Deterministic seed mixing (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace jrs
