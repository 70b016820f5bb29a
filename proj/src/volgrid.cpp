#include "jrs/volgrid.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>

#include "interp.hpp"
#include "metaimage.hpp"

namespace fs = std::filesystem;

namespace jrs {

int Segmentation::num_labels() const {
  int n = label_names.empty() ? 0 : label_names.rbegin()->first;
  for (auto l : labels) n = std::max<int>(n, l);
  return n + 1;
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

// --- I/O ---------------------------------------------------------------------

Volume load_volume(const fs::path& path) {
  const auto h = meta::read_header(path);
  if (h.channels != 1) throw Error(path.string() + ": expected a scalar image, found " + std::to_string(h.channels) + " channels");
  Volume v;
  v.dims = h.dims;
  v.spacing = h.spacing;
  v.origin = h.origin;
  v.data = meta::read_as_float(h);
  return v;
}

void save_volume(const Volume& vol, const fs::path& path) {
  if (!vol.dims.valid()) throw Error("refusing to write " + path.string() + ": zero-sized dims");
  if (vol.data.size() != vol.dims.count()) throw Error("volume data does not match its dims");
  meta::write(path, vol.dims, vol.spacing, vol.origin, "MET_FLOAT", 1, vol.data.data(),
              vol.data.size() * sizeof(float));
}

fs::path label_sidecar_path(const fs::path& mhd) {
  fs::path p = mhd;
  p.replace_extension(".labels.txt");
  return p;
}

void check_segmentation(const Segmentation& seg) {
  if (!seg.dims.valid()) throw Error("segmentation has zero-sized dims");
  if (seg.labels.size() != seg.dims.count()) throw Error("segmentation data does not match its dims");
  int expect = 0;
  for (const auto& [id, name] : seg.label_names) {
    if (id != expect) throw Error("label ids must be contiguous from 0; missing id " + std::to_string(expect));
    ++expect;
  }
  if (!seg.label_names.empty())
    for (auto l : seg.labels)
      if (l >= expect) throw Error("voxel label " + std::to_string(l) + " has no name entry");
}

Segmentation load_segmentation(const fs::path& path) {
  const auto h = meta::read_header(path);
  if (h.channels != 1) throw Error(path.string() + ": expected a single-channel label image");
  if (h.element_type != "MET_UCHAR") throw Error(path.string() + ": segmentations must be MET_UCHAR");
  Segmentation s;
  s.dims = h.dims;
  s.spacing = h.spacing;
  s.origin = h.origin;
  s.labels = meta::read_payload(h);

  const fs::path side = label_sidecar_path(path);
  if (fs::exists(side)) {
    std::ifstream in(side);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error(side.string() + ": expected id=name, got '" + line + "'");
      s.label_names[std::stoi(line.substr(0, eq))] = line.substr(eq + 1);
    }
  } else {
    s.label_names[0] = "background";
    const int n = s.num_labels();
    for (int i = 1; i < n; ++i) s.label_names[i] = "label" + std::to_string(i);
  }
  check_segmentation(s);
  return s;
}

void save_segmentation(const Segmentation& seg, const fs::path& path) {
  check_segmentation(seg);
  meta::write(path, seg.dims, seg.spacing, seg.origin, "MET_UCHAR", 1, seg.labels.data(), seg.labels.size());
  std::ofstream out(label_sidecar_path(path));
  if (!out) throw Error("cannot write " + label_sidecar_path(path).string());
  for (const auto& [id, name] : seg.label_names) out << id << '=' << name << '\n';
}

void save_mask(const Mask& mask, const Volume& companion, const fs::path& path) {
  if (!(mask.dims == companion.dims)) throw Error("mask dims differ from its companion volume");
  meta::write(path, mask.dims, companion.spacing, companion.origin, "MET_UCHAR", 1, mask.data.data(),
              mask.data.size());
}

// --- Preprocessing -----------------------------------------------------------

Volume resample_isotropic(const Volume& vol, double target) {
  if (!(target > 0.0)) throw std::invalid_argument("target spacing must be positive");
  if (!vol.dims.valid()) throw std::invalid_argument("volume has zero-sized dims");

  Dims3 out_dims;
  for (int a = 0; a < 3; ++a)
    out_dims[a] = std::max(1, static_cast<int>(std::lround(vol.dims[a] * vol.spacing[a] / target)));

  if (out_dims == vol.dims && vol.spacing == Vec3{target, target, target}) return vol;

  Volume out(out_dims, {target, target, target}, vol.origin);
  const double sx = target / vol.spacing[0], sy = target / vol.spacing[1], sz = target / vol.spacing[2];
  for (int z = 0; z < out_dims.z; ++z)
    for (int y = 0; y < out_dims.y; ++y)
      for (int x = 0; x < out_dims.x; ++x) {
        const auto st = detail::make_stencil(vol.dims, x * sx, y * sy, z * sz);
        out.at(x, y, z) = static_cast<float>(detail::apply(st, vol.data.data()));
      }
  return out;
}

Volume rescale_intensity(const Volume& vol, float lo, float hi) {
  if (!(hi > lo)) throw std::invalid_argument("rescale_intensity requires hi > lo");
  float mn = std::numeric_limits<float>::infinity(), mx = -mn;
  for (float v : vol.data) {
    if (!std::isfinite(v)) throw Error("rescale_intensity: non-finite input value");
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  Volume out = vol;
  if (vol.data.empty()) return out;
  if (mx == mn) {
    std::fill(out.data.begin(), out.data.end(), 0.5f * (lo + hi));
    return out;
  }
  const double scale = (static_cast<double>(hi) - lo) / (static_cast<double>(mx) - mn);
  for (auto& v : out.data) {
    v = static_cast<float>(lo + (static_cast<double>(v) - mn) * scale);
    v = std::clamp(v, lo, hi);
  }
  return out;
}

namespace {

// Fill background regions of each z-slice that are not 4-connected to the
// slice border.
void fill_holes_per_slice(Mask& m) {
  const Dims3 d = m.dims;
  std::vector<std::uint8_t> outside(static_cast<std::size_t>(d.x) * d.y);
  std::deque<std::pair<int, int>> queue;
  for (int z = 0; z < d.z; ++z) {
    std::fill(outside.begin(), outside.end(), 0);
    auto fg = [&](int x, int y) { return m.data[linear_index(d, x, y, z)] != 0; };
    auto push = [&](int x, int y) {
      const std::size_t i = static_cast<std::size_t>(y) * d.x + x;
      if (!outside[i] && !fg(x, y)) {
        outside[i] = 1;
        queue.emplace_back(x, y);
      }
    };
    for (int x = 0; x < d.x; ++x) {
      push(x, 0);
      push(x, d.y - 1);
    }
    for (int y = 0; y < d.y; ++y) {
      push(0, y);
      push(d.x - 1, y);
    }
    while (!queue.empty()) {
      const auto [x, y] = queue.front();
      queue.pop_front();
      if (x > 0) push(x - 1, y);
      if (x + 1 < d.x) push(x + 1, y);
      if (y > 0) push(x, y - 1);
      if (y + 1 < d.y) push(x, y + 1);
    }
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        if (!outside[static_cast<std::size_t>(y) * d.x + x]) m.data[linear_index(d, x, y, z)] = 1;
  }
}

}  // namespace

Mask torso_mask(const Volume& vol, float threshold) {
  const Dims3 d = vol.dims;
  const std::size_t n = d.count();
  std::vector<int> comp(n, -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;

  for (std::size_t seed = 0; seed < n; ++seed) {
    if (comp[seed] >= 0 || !(vol.data[seed] > threshold)) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t size = 0;
    comp[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const int x = static_cast<int>(i % d.x);
      const int y = static_cast<int>((i / d.x) % d.y);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(d.x) * d.y));
      const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= d.x || q[1] >= d.y || q[2] >= d.z) continue;
        const std::size_t j = linear_index(d, q[0], q[1], q[2]);
        if (comp[j] < 0 && vol.data[j] > threshold) {
          comp[j] = id;
          stack.push_back(j);
        }
      }
    }
    sizes.push_back(size);
  }
  if (sizes.empty()) throw Error("no torso found");

  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  Mask m(d);
  for (std::size_t i = 0; i < n; ++i) m.data[i] = comp[i] == best ? 1 : 0;
  fill_holes_per_slice(m);
  return m;
}

Mask label_mask(const Segmentation& seg, int label) {
  Mask m(seg.dims);
  for (std::size_t i = 0; i < seg.labels.size(); ++i) m.data[i] = seg.labels[i] == label ? 1 : 0;
  return m;
}

Mask foreground_mask(const Segmentation& seg) {
  Mask m(seg.dims);
  for (std::size_t i = 0; i < seg.labels.size(); ++i) m.data[i] = seg.labels[i] != 0 ? 1 : 0;
  return m;
}

}  // namespace jrs
