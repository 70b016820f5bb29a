#pragma once

// Training objectives. Every loss returns its value and, when a gradient
// span is supplied, *accumulates* scale * dLoss/dInput into it.

#include <cstddef>
#include <span>

#include "jrs/warpfield.hpp"

namespace jrs {

struct LossBreakdown {
  double sim_ncc = 0.0;  // 1 - NCC
  double sim_dsc = 0.0;  // 1 - soft Dice
  double smooth = 0.0;   // bending energy
  double adv = 0.0;      // generator adversarial term
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    sim_ncc += o.sim_ncc;
    sim_dsc += o.sim_dsc;
    smooth += o.smooth;
    adv += o.adv;
    total += o.total;
    return *this;
  }
};

inline constexpr double kDiceEpsilon = 1e-6;
inline constexpr double kNccMinVariance = 1e-12;

// Sign applied to mean critic score in the generator's adversarial loss.
// -1 gives the usual WGAN direction (generator raises the critic score of its
// outputs); +1 reproduces the literal form E[D(fake)].
inline constexpr double kGeneratorAdversarialSign = -1.0;

// Global Pearson correlation. 0 when either input has variance < 1e-12.
double ncc(std::span<const float> a, std::span<const float> b, std::span<float> grad_a = {},
           double scale = 1.0);

// Mean over foreground channels (1..channels-1) of 2 sum(pq) / (sum p + sum q + eps).
// p and q are planar stacks of `channels` probability maps. Channels empty in
// both inputs are left out of the mean; if every foreground channel is empty
// the result is 1.
double soft_dice(std::span<const float> p, std::span<const float> q, int channels,
                 std::span<float> grad_p = {}, double scale = 1.0);

struct SimilarityTerms {
  double ncc_term = 0.0;   // 1 - ncc(warped, fixed)
  double dice_term = 0.0;  // 1 - soft_dice(warped_seg, fixed_seg)
  double total() const { return ncc_term + dice_term; }
};

// (1 - DSC(S_m o phi, S_f)) + (1 - NCC(I_m o phi, I_f)).
// Gradients (scaled) accumulate w.r.t. the warped image and warped label stack.
SimilarityTerms similarity_loss(std::span<const float> fixed, std::span<const float> warped,
                                std::span<const float> fixed_seg, std::span<const float> warped_seg,
                                int channels, std::span<float> grad_warped = {},
                                std::span<float> grad_warped_seg = {}, double scale = 1.0);

// Mean over interior voxels and the three components of
// u_xx^2 + u_yy^2 + u_zz^2 + 2 u_xy^2 + 2 u_xz^2 + 2 u_yz^2, second
// differences in mm. Needs >= 3 voxels per axis.
double bending_energy(const DVF& dvf, std::span<float> grad = {}, double scale = 1.0);

// mean(d_fake) - mean(d_real)
double wgan_critic_loss(std::span<const float> d_fake, std::span<const float> d_real,
                        std::span<float> grad_fake = {}, std::span<float> grad_real = {});

// sign * mean(d_fake)
double wgan_generator_loss(std::span<const float> d_fake, std::span<float> grad_fake = {},
                           double scale = 1.0, double sign = kGeneratorAdversarialSign);

// total = sim_ncc + sim_dsc + lambda1 * smooth + lambda2 * adv
LossBreakdown generator_total_loss(const LossBreakdown& parts, double lambda1 = 1.0, double lambda2 = 0.01);

}  // namespace jrs
