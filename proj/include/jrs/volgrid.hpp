#pragma once

// Volume / segmentation data model, MetaImage I/O and preprocessing.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace jrs {

// Domain failure (bad input data, I/O). The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dims3 {
  int x = 0, y = 0, z = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) *
           static_cast<std::size_t>(z);
  }
  bool valid() const { return x > 0 && y > 0 && z > 0; }
  int operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
  int& operator[](int axis) { return axis == 0 ? x : axis == 1 ? y : z; }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

using Vec3 = std::array<double, 3>;

// x-fastest linear index
inline std::size_t linear_index(const Dims3& d, int x, int y, int z) {
  return (static_cast<std::size_t>(z) * d.y + y) * d.x + x;
}

struct Volume {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};  // mm / voxel
  Vec3 origin{0.0, 0.0, 0.0};   // mm
  std::vector<float> data;

  Volume() = default;
  Volume(Dims3 d, Vec3 sp = {1.0, 1.0, 1.0}, Vec3 org = {0.0, 0.0, 0.0},
         float fill = 0.0f)
      : dims(d), spacing(sp), origin(org), data(d.count(), fill) {}

  float& at(int x, int y, int z) { return data[linear_index(dims, x, y, z)]; }
  float at(int x, int y, int z) const {
    return data[linear_index(dims, x, y, z)];
  }
};

struct Segmentation {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<std::uint8_t> labels;
  std::map<int, std::string> label_names;  // id -> organ; 0 is background

  Segmentation() = default;
  Segmentation(Dims3 d, Vec3 sp = {1.0, 1.0, 1.0}, Vec3 org = {0.0, 0.0, 0.0})
      : dims(d), spacing(sp), origin(org), labels(d.count(), 0) {}

  // Number of label ids including background: max(named id, max voxel) + 1.
  int num_labels() const;

  std::uint8_t& at(int x, int y, int z) {
    return labels[linear_index(dims, x, y, z)];
  }
  std::uint8_t at(int x, int y, int z) const {
    return labels[linear_index(dims, x, y, z)];
  }
};

struct Mask {
  Dims3 dims;
  std::vector<std::uint8_t> data;  // 0 / 1

  Mask() = default;
  explicit Mask(Dims3 d, std::uint8_t fill = 0) : dims(d), data(d.count(), fill) {}

  bool at(int x, int y, int z) const {
    return data[linear_index(dims, x, y, z)] != 0;
  }
  std::size_t count() const;
};

// --- MetaImage-style I/O ---------------------------------------------------

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& vol, const std::filesystem::path& path);

// Segmentations are stored as MET_UCHAR plus a `<stem>.labels.txt` sidecar
// holding one `id=name` pair per line.
Segmentation load_segmentation(const std::filesystem::path& path);
void save_segmentation(const Segmentation& seg,
                       const std::filesystem::path& path);
std::filesystem::path label_sidecar_path(const std::filesystem::path& mhd);

void save_mask(const Mask& mask, const Volume& companion,
               const std::filesystem::path& path);

// --- Preprocessing -----------------------------------------------------------

Volume resample_isotropic(const Volume& vol, double target_spacing);

// Linear map of [min, max] onto [lo, hi]. Constant volumes map to (lo+hi)/2.
Volume rescale_intensity(const Volume& vol, float lo, float hi);

inline constexpr float kTorsoThreshold = -0.75f;

// Largest 6-connected component of {v > threshold}, holes filled per axial
// (z) slice.
Mask torso_mask(const Volume& vol, float threshold = kTorsoThreshold);

// Mask and segmentation helpers shared by the evaluation and trainer code.
Mask label_mask(const Segmentation& seg, int label);
Mask foreground_mask(const Segmentation& seg);
void check_segmentation(const Segmentation& seg);

}  // namespace jrs
