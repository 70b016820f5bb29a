#include "jrs/warpfield.hpp"

#include <algorithm>
#include <cmath>

#include "interp.hpp"
#include "metaimage.hpp"

namespace fs = std::filesystem;

namespace jrs {

float DVF::max_magnitude() const {
  const std::size_t n = voxels();
  double best = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ux = disp[i], uy = disp[n + i], uz = disp[2 * n + i];
    best = std::max(best, ux * ux + uy * uy + uz * uz);
  }
  return static_cast<float>(std::sqrt(best));
}

Dims3 crop_offset(const Dims3& image, const Dims3& dvf) {
  Dims3 off;
  for (int a = 0; a < 3; ++a) {
    const int diff = image[a] - dvf[a];
    if (diff < 0 || diff % 2 != 0)
      throw Error("DVF dims (" + std::to_string(dvf.x) + "," + std::to_string(dvf.y) + "," + std::to_string(dvf.z) +
                  ") are not a centered crop of image dims (" + std::to_string(image.x) + "," +
                  std::to_string(image.y) + "," + std::to_string(image.z) + ")");
    off[a] = diff / 2;
  }
  return off;
}

void warp_channels(std::span<const float> src, int channels, const Dims3& src_dims, const Vec3& sp,
                   const DVF& dvf, std::span<float> out) {
  const Dims3 off = crop_offset(src_dims, dvf.dims);
  const std::size_t ns = src_dims.count(), no = dvf.voxels();
  if (src.size() != ns * channels || out.size() != no * channels) throw Error("warp_channels: buffer size mismatch");
  const float *ux = dvf.component(0), *uy = dvf.component(1), *uz = dvf.component(2);
  const Dims3 d = dvf.dims;
  std::size_t i = 0;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x, ++i) {
        const auto st = detail::make_stencil(src_dims, x + off.x + ux[i] / sp[0], y + off.y + uy[i] / sp[1],
                                             z + off.z + uz[i] / sp[2]);
        for (int c = 0; c < channels; ++c)
          out[c * no + i] = static_cast<float>(detail::apply(st, src.data() + c * ns));
      }
}

void warp_channels_backward(std::span<const float> src, int channels, const Dims3& src_dims, const Vec3& sp,
                            const DVF& dvf, std::span<const float> grad_out, std::span<float> grad_disp,
                            std::span<float> grad_src) {
  const Dims3 off = crop_offset(src_dims, dvf.dims);
  const std::size_t ns = src_dims.count(), no = dvf.voxels();
  if (src.size() != ns * channels || grad_out.size() != no * channels || grad_disp.size() != 3 * no)
    throw Error("warp_channels_backward: buffer size mismatch");
  const bool want_src = !grad_src.empty();
  if (want_src && grad_src.size() != ns * channels) throw Error("warp_channels_backward: grad_src size mismatch");

  const float *ux = dvf.component(0), *uy = dvf.component(1), *uz = dvf.component(2);
  const Dims3 d = dvf.dims;
  std::size_t i = 0;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x, ++i) {
        const auto st = detail::make_stencil(src_dims, x + off.x + ux[i] / sp[0], y + off.y + uy[i] / sp[1],
                                             z + off.z + uz[i] / sp[2]);
        double gx = 0.0, gy = 0.0, gz = 0.0;
        for (int c = 0; c < channels; ++c) {
          const double go = grad_out[c * no + i];
          if (go == 0.0) continue;
          double g[3];
          detail::gradient(st, src.data() + c * ns, g);
          gx += go * g[0];
          gy += go * g[1];
          gz += go * g[2];
          if (want_src)
            for (int k = 0; k < 8; ++k) grad_src[c * ns + st.idx[k]] += static_cast<float>(go * st.w[k]);
        }
        grad_disp[i] += static_cast<float>(gx / sp[0]);
        grad_disp[no + i] += static_cast<float>(gy / sp[1]);
        grad_disp[2 * no + i] += static_cast<float>(gz / sp[2]);
      }
}

Volume warp_trilinear(const Volume& vol, const DVF& dvf) {
  const Dims3 off = crop_offset(vol.dims, dvf.dims);
  Volume out(dvf.dims, vol.spacing,
             {vol.origin[0] + off.x * vol.spacing[0], vol.origin[1] + off.y * vol.spacing[1],
              vol.origin[2] + off.z * vol.spacing[2]});
  warp_channels(vol.data, 1, vol.dims, vol.spacing, dvf, out.data);
  return out;
}

std::vector<float> one_hot(const Segmentation& seg, int num_labels) {
  const std::size_t n = seg.dims.count();
  std::vector<float> out(static_cast<std::size_t>(num_labels) * n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = seg.labels[i];
    if (l >= num_labels) throw Error("label id exceeds one-hot channel count");
    out[l * n + i] = 1.0f;
  }
  return out;
}

Segmentation warp_labels(const Segmentation& seg, const DVF& dvf) {
  const Dims3 off = crop_offset(seg.dims, dvf.dims);
  const int nl = seg.num_labels();
  const auto onehot = one_hot(seg, nl);
  const std::size_t no = dvf.voxels();
  std::vector<float> warped(static_cast<std::size_t>(nl) * no);
  warp_channels(onehot, nl, seg.dims, seg.spacing, dvf, warped);

  Segmentation out(dvf.dims, seg.spacing,
                   {seg.origin[0] + off.x * seg.spacing[0], seg.origin[1] + off.y * seg.spacing[1],
                    seg.origin[2] + off.z * seg.spacing[2]});
  out.label_names = seg.label_names;
  for (std::size_t i = 0; i < no; ++i) {
    int best = 0;
    float bv = warped[i];
    for (int l = 1; l < nl; ++l)
      if (warped[l * no + i] > bv) {
        bv = warped[l * no + i];
        best = l;
      }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Volume jacobian_determinant(const DVF& dvf) {
  const Dims3 d = dvf.dims;
  if (d.x < 2 || d.y < 2 || d.z < 2) throw std::invalid_argument("jacobian_determinant needs >= 2 voxels per axis");
  Volume out(d, dvf.spacing, dvf.origin);

  // derivative of component c along axis a at (x,y,z)
  auto deriv = [&](int c, int a, int x, int y, int z) {
    int p[3] = {x, y, z};
    const int n = d[a];
    int lo = p[a] - 1, hi = p[a] + 1;
    if (lo < 0) lo = 0;
    if (hi > n - 1) hi = n - 1;
    int q0[3] = {x, y, z}, q1[3] = {x, y, z};
    q0[a] = lo;
    q1[a] = hi;
    const double diff = static_cast<double>(dvf.at(c, q1[0], q1[1], q1[2])) - dvf.at(c, q0[0], q0[1], q0[2]);
    return diff / ((hi - lo) * dvf.spacing[a]);
  };

  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        double j[3][3];
        for (int c = 0; c < 3; ++c)
          for (int a = 0; a < 3; ++a) j[c][a] = (c == a ? 1.0 : 0.0) + deriv(c, a, x, y, z);
        const double det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                           j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                           j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        out.at(x, y, z) = static_cast<float>(det);
      }
  return out;
}

DVF load_dvf(const fs::path& path) {
  const auto h = meta::read_header(path);
  if (h.channels != 3) throw Error(path.string() + ": DVF files need ElementNumberOfChannels = 3");
  const auto interleaved = meta::read_as_float(h);
  DVF dvf(h.dims, h.spacing, h.origin);
  const std::size_t n = dvf.voxels();
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) dvf.disp[c * n + i] = interleaved[3 * i + c];
  for (float v : dvf.disp)
    if (!std::isfinite(v)) throw Error(path.string() + ": non-finite displacement");
  return dvf;
}

void save_dvf(const DVF& dvf, const fs::path& path) {
  const std::size_t n = dvf.voxels();
  if (dvf.disp.size() != 3 * n) throw Error("DVF data does not match its dims");
  std::vector<float> interleaved(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) interleaved[3 * i + c] = dvf.disp[c * n + i];
  meta::write(path, dvf.dims, dvf.spacing, dvf.origin, "MET_FLOAT", 3, interleaved.data(),
              interleaved.size() * sizeof(float));
}

}  // namespace jrs
