#pragma once

// Dense displacement fields, differentiable trilinear warping and Jacobian
// analysis.
//
// A DVF maps fixed-grid voxel x to the moving-image location
// x + disp(x) / spacing. Displacements are in millimeters. The DVF grid may be
// a centered crop of the warped image grid (the generator predicts a field
// smaller than its input patch); the crop offset is (image - dvf) / 2 per axis.

#include <filesystem>
#include <span>
#include <vector>

#include "jrs/volgrid.hpp"

namespace jrs {

struct DVF {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<float> disp;  // component-planar: disp[c * N + i], c in {x, y, z}

  DVF() = default;
  explicit DVF(Dims3 d, Vec3 sp = {1.0, 1.0, 1.0}, Vec3 org = {0.0, 0.0, 0.0})
      : dims(d), spacing(sp), origin(org), disp(3 * d.count(), 0.0f) {}

  std::size_t voxels() const { return dims.count(); }
  float* component(int c) { return disp.data() + c * voxels(); }
  const float* component(int c) const { return disp.data() + c * voxels(); }
  float& at(int c, int x, int y, int z) { return component(c)[linear_index(dims, x, y, z)]; }
  float at(int c, int x, int y, int z) const { return component(c)[linear_index(dims, x, y, z)]; }

  float max_magnitude() const;
};

// Centered-crop offset of a DVF grid inside an image grid; throws Error when
// the two grids are not in a centered crop relationship.
Dims3 crop_offset(const Dims3& image, const Dims3& dvf);

Volume warp_trilinear(const Volume& vol, const DVF& dvf);

// Per-voxel argmax of trilinearly warped one-hot channels (ties -> lower id).
Segmentation warp_labels(const Segmentation& seg, const DVF& dvf);

// One-hot channels, planar: out[l * N + i].
std::vector<float> one_hot(const Segmentation& seg, int num_labels);

// Multi-channel warp core. `src` holds `channels` planes on `src_dims`;
// `out` receives `channels` planes on dvf.dims.
void warp_channels(std::span<const float> src, int channels, const Dims3& src_dims,
                   const Vec3& src_spacing, const DVF& dvf, std::span<float> out);

// Adjoint of warp_channels. Accumulates into grad_disp (3 planes on dvf.dims,
// mm units) and, when non-empty, into grad_src.
void warp_channels_backward(std::span<const float> src, int channels, const Dims3& src_dims,
                            const Vec3& src_spacing, const DVF& dvf,
                            std::span<const float> grad_out, std::span<float> grad_disp,
                            std::span<float> grad_src = {});

// det(I + du/dx) per voxel; central differences inside, one-sided at borders,
// derivatives in mm/mm.
Volume jacobian_determinant(const DVF& dvf);

// Stored as MetaImage with ElementNumberOfChannels = 3, channel-fastest.
DVF load_dvf(const std::filesystem::path& path);
void save_dvf(const DVF& dvf, const std::filesystem::path& path);

}  // namespace jrs
