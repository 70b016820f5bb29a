#include <fstream>
#include <cmath>
#include <numbers>
#include <set>

#include "doctest.h"
#include "jrs/warpfield.hpp"
#include "test_util.hpp"

using namespace jrs;

namespace {
Volume ramp_x(Dims3 d) {
  Volume v(d);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) v.at(x, y, z) = static_cast<float>(x);
  return v;
}
}  // namespace

TEST_CASE("warp_trilinear with zero DVF is the identity") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Volume v = test::random_volume({9, 8, 7}, seed);
    const Volume w = warp_trilinear(v, DVF(v.dims));
    for (std::size_t i = 0; i < v.data.size(); ++i) CHECK(std::abs(w.data[i] - v.data[i]) < 1e-6f);
  }
}

TEST_CASE("warp_trilinear on a ramp") {
  const Dims3 d{10, 6, 5};
  const Volume v = ramp_x(d);
  SUBCASE("integer shift") {
    DVF f(d);
    std::fill(f.component(0), f.component(0) + f.voxels(), 1.0f);
    const Volume w = warp_trilinear(v, f);
    for (int x = 0; x <= d.x - 2; ++x) CHECK(w.at(x, 3, 2) == doctest::Approx(x + 1.0));
    CHECK(w.at(d.x - 1, 3, 2) == doctest::Approx(d.x - 1.0));  // border clamp
  }
  SUBCASE("half-voxel shift matches the analytic ramp") {
    DVF f(d);
    std::fill(f.component(0), f.component(0) + f.voxels(), 0.5f);
    const Volume w = warp_trilinear(v, f);
    for (int x = 0; x <= d.x - 2; ++x) CHECK(std::abs(w.at(x, 2, 1) - (x + 0.5)) < 1e-6);
  }
  SUBCASE("displacements are in mm") {
    Volume vs = v;
    vs.spacing = {2.0, 1.0, 1.0};
    DVF f(d, vs.spacing);
    std::fill(f.component(0), f.component(0) + f.voxels(), 2.0f);  // 2 mm = 1 voxel
    const Volume w = warp_trilinear(vs, f);
    CHECK(w.at(3, 0, 0) == doctest::Approx(4.0));
  }
}

TEST_CASE("warp onto a centered crop") {
  const Volume v = ramp_x({12, 12, 12});
  const Volume w = warp_trilinear(v, DVF({8, 8, 8}));
  CHECK(w.dims == Dims3{8, 8, 8});
  CHECK(w.at(0, 0, 0) == doctest::Approx(2.0));
  CHECK(w.origin[0] == doctest::Approx(2.0));
  CHECK_THROWS_AS(warp_trilinear(v, DVF({7, 8, 8})), Error);
  CHECK_THROWS_AS(warp_trilinear(v, DVF({14, 8, 8})), Error);
}

TEST_CASE("warp gradients match central finite differences (double-checked in float)") {
  const Dims3 d{8, 8, 8};
  int failures = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Volume v = test::smooth_random_volume(d, seed);
    DVF f = test::random_dvf(d, 50 + seed, 1.5f);
    const Volume weights = test::random_volume(d, 90 + seed);
    auto objective = [&](const DVF& g) {
      const Volume w = warp_trilinear(v, g);
      double s = 0.0;
      for (std::size_t i = 0; i < w.data.size(); ++i) s += static_cast<double>(w.data[i]) * weights.data[i];
      return s;
    };
    std::vector<float> grad(f.disp.size(), 0.0f);
    warp_channels_backward(v.data, 1, d, v.spacing, f, weights.data, grad);
    std::vector<float> grad_src(v.data.size(), 0.0f);
    std::vector<float> grad_disp2(f.disp.size(), 0.0f);
    warp_channels_backward(v.data, 1, d, v.spacing, f, weights.data, grad_disp2, grad_src);

    std::mt19937_64 rng(seed);
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = rng() % f.disp.size();
      const float h = 1e-2f;
      DVF p = f, m = f;
      p.disp[i] += h;
      m.disp[i] -= h;
      const double fd = (objective(p) - objective(m)) / (2.0 * h);
      const double an = grad[i];
      const double rel = std::abs(fd - an) / std::max(1e-3, std::max(std::abs(fd), std::abs(an)));
      if (rel > 1e-2) ++failures;  // a sample straddling a cell boundary is expected occasionally
    }
    // gradient w.r.t. the source values: objective is linear in them
    for (int k = 0; k < 10; ++k) {
      const std::size_t i = rng() % v.data.size();
      Volume vp = v;
      vp.data[i] += 1.0f;
      const Volume w = warp_trilinear(vp, f);
      double s = 0.0;
      for (std::size_t j = 0; j < w.data.size(); ++j) s += static_cast<double>(w.data[j]) * weights.data[j];
      CHECK(s - objective(f) == doctest::Approx(grad_src[i]).epsilon(1e-3).scale(1.0));
    }
  }
  CHECK(failures <= 4);
}

TEST_CASE("warp_labels") {
  Segmentation s({8, 8, 8});
  s.label_names = {{0, "background"}, {1, "a"}, {2, "b"}};
  for (int z = 2; z < 5; ++z)
    for (int y = 2; y < 5; ++y)
      for (int x = 2; x < 5; ++x) s.at(x, y, z) = 1;

  SUBCASE("zero DVF keeps labels") { CHECK(warp_labels(s, DVF(s.dims)).labels == s.labels); }

  SUBCASE("integer translation moves the cube exactly") {
    DVF f(s.dims);
    std::fill(f.component(1), f.component(1) + f.voxels(), -2.0f);  // sample from y - 2
    const Segmentation w = warp_labels(s, f);
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const int src_y = std::max(0, y - 2);
          CHECK(w.at(x, y, z) == s.at(x, src_y, z));
        }
    CHECK(w.at(3, 3, 3) == 0);  // vacated
    CHECK(w.at(3, 6, 3) == 1);
  }

  SUBCASE("half-voxel shift of a two-label boundary") {
    Segmentation t({5, 5, 5});
    t.label_names = {{0, "background"}, {1, "left"}, {2, "right"}};
    for (int z = 0; z < 5; ++z)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) t.at(x, y, z) = x < 2 ? 1 : 2;
    DVF f(t.dims);
    std::fill(f.component(0), f.component(0) + f.voxels(), 0.5f);
    const Segmentation w = warp_labels(t, f);
    std::set<int> seen(w.labels.begin(), w.labels.end());
    CHECK(seen == std::set<int>{1, 2});
    // the boundary moves by at most one voxel, tie at x=1.5 goes to the lower id
    for (int x = 0; x < 5; ++x) {
      CHECK(w.at(x, 2, 2) == (x < 2 ? 1 : 2));
    }
    std::fill(f.component(0), f.component(0) + f.voxels(), 0.75f);
    const Segmentation w2 = warp_labels(t, f);
    CHECK(w2.at(1, 2, 2) == 2);
    CHECK(w2.at(0, 2, 2) == 1);
  }

  SUBCASE("label set is preserved under random smooth warps") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const DVF f = test::random_dvf(s.dims, seed, 2.0f);
      const Segmentation w = warp_labels(s, f);
      for (auto l : w.labels) CHECK((l == 0 || l == 1));
    }
  }
}

TEST_CASE("jacobian_determinant") {
  SUBCASE("zero field") {
    const Volume j = jacobian_determinant(DVF({6, 5, 4}));
    for (float v : j.data) CHECK(v == 1.0f);
  }
  SUBCASE("uniform dilation of 10%") {
    DVF f({8, 8, 8}, {1.5, 1.0, 2.0});
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          f.at(0, x, y, z) = static_cast<float>(0.1 * x * 1.5);
          f.at(1, x, y, z) = static_cast<float>(0.1 * y * 1.0);
          f.at(2, x, y, z) = static_cast<float>(0.1 * z * 2.0);
        }
    const Volume j = jacobian_determinant(f);
    for (int z = 1; z < 7; ++z)
      for (int y = 1; y < 7; ++y)
        for (int x = 1; x < 7; ++x) CHECK(std::abs(j.at(x, y, z) - 1.331) < 1e-6);
  }
  SUBCASE("shear-only sinusoid has unit determinant") {
    const int n = 16;
    DVF f({n, n, n});
    for (int z = 0; z < n; ++z)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
          f.at(0, x, y, z) = static_cast<float>(0.2 * std::sin(2 * std::numbers::pi * z / n));
    const Volume j = jacobian_determinant(f);
    // finite-difference oracle: du_x/dz only -> det = 1 exactly
    for (float v : j.data) CHECK(std::abs(v - 1.0) < 1e-6);
  }
  SUBCASE("constant displacement") {
    DVF f({5, 5, 5});
    for (auto& v : f.disp) v = 3.25f;
    for (float v : jacobian_determinant(f).data) CHECK(v == 1.0f);
  }
  SUBCASE("mean tends to 1 for small amplitudes") {
    const DVF f = test::random_dvf({10, 10, 10}, 7, 1e-3f);
    const Volume j = jacobian_determinant(f);
    double m = 0.0;
    for (float v : j.data) m += v;
    CHECK(std::abs(m / j.data.size() - 1.0) < 1e-3);
  }
  CHECK_THROWS_AS(jacobian_determinant(DVF({1, 4, 4})), std::invalid_argument);
}

TEST_CASE("DVF file round-trip is channel-fastest") {
  test::TempDir tmp("dvf");
  DVF f = test::random_dvf({4, 3, 2}, 1, 5.0f, {1.0, 2.0, 3.0});
  save_dvf(f, tmp.path() / "d.mhd");
  std::ifstream h(tmp.path() / "d.mhd");
  std::string text((std::istreambuf_iterator<char>(h)), {});
  CHECK(text.find("ElementNumberOfChannels = 3") != std::string::npos);
  const DVF r = load_dvf(tmp.path() / "d.mhd");
  CHECK(r.disp == f.disp);
  CHECK(r.spacing == f.spacing);

  std::ifstream raw(tmp.path() / "d.raw", std::ios::binary);
  float first[3];
  raw.read(reinterpret_cast<char*>(first), sizeof(first));
  CHECK(first[0] == f.at(0, 0, 0, 0));
  CHECK(first[1] == f.at(1, 0, 0, 0));
  CHECK(first[2] == f.at(2, 0, 0, 0));
}
