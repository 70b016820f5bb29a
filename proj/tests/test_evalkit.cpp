#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "jrs/evalkit.hpp"
#include "test_util.hpp"

using namespace jrs;

namespace {

Mask box_mask(Dims3 d, std::array<int, 3> lo, std::array<int, 3> hi) {
  Mask m(d);
  for (int z = lo[2]; z < hi[2]; ++z)
    for (int y = lo[1]; y < hi[1]; ++y)
      for (int x = lo[0]; x < hi[0]; ++x) m.data[linear_index(d, x, y, z)] = 1;
  return m;
}

Mask random_mask(Dims3 d, std::mt19937_64& rng) {
  // a couple of random boxes plus salt, never empty
  Mask m(d);
  std::uniform_int_distribution<int> ux(0, d.x - 1), uy(0, d.y - 1), uz(0, d.z - 1);
  for (int b = 0; b < 2; ++b) {
    const int x0 = ux(rng), y0 = uy(rng), z0 = uz(rng);
    const int x1 = std::min(d.x, x0 + 1 + ux(rng) / 2), y1 = std::min(d.y, y0 + 1 + uy(rng) / 2),
              z1 = std::min(d.z, z0 + 1 + uz(rng) / 2);
    for (int z = z0; z < z1; ++z)
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m.data[linear_index(d, x, y, z)] = 1;
  }
  for (int i = 0; i < 5; ++i) m.data[linear_index(d, ux(rng), uy(rng), uz(rng))] = 1;
  return m;
}

// all-pairs oracle, no pruning, no sorting
std::vector<double> brute_directed(const SurfacePointSet& a, const SurfacePointSet& b) {
  std::vector<double> out;
  for (const auto& p : a.points) {
    double best = INFINITY;
    for (const auto& q : b.points) {
      const double d2 = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
      best = std::min(best, d2);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

double brute_pct95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double pos = 0.95 * (v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  return i + 1 < v.size() ? v[i] + (pos - i) * (v[i + 1] - v[i]) : v[i];
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / v.size();
}

// Two-sided exact p by enumerating every sign assignment; ranks from pairwise counting.
double enumerate_wilcoxon(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  const std::size_t n = d.size();
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    double less = 0, eq = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(d[j]) < std::abs(d[i])) ++less;
      if (std::abs(d[j]) == std::abs(d[i])) ++eq;
    }
    r[i] = less + (eq + 1) / 2.0;
  }
  double w = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) w += r[i];
  double lo = 0, hi = 0;
  for (std::size_t s = 0; s < (std::size_t{1} << n); ++s) {
    double ws = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (s >> i & 1) ws += r[i];
    if (ws <= w + 1e-9) ++lo;
    if (ws >= w - 1e-9) ++hi;
  }
  return std::min(1.0, 2.0 * std::min(lo, hi) / std::pow(2.0, n));
}

CaseResult make_case(const std::string& id, const std::map<std::string, double>& msd_by_organ, double jac = 0.0) {
  CaseResult r;
  r.case_id = id;
  for (const auto& [o, v] : msd_by_organ) r.organs[o] = OrganMetrics{v, 2 * v, 0.8};
  r.dvf_jac_std = jac;
  return r;
}

}  // namespace

TEST_CASE("extract_surface counts") {
  const Dims3 d{7, 7, 7};
  CHECK(extract_surface(box_mask(d, {3, 3, 3}, {4, 4, 4}), {1, 1, 1}).points.size() == 1);
  CHECK(extract_surface(box_mask(d, {2, 2, 2}, {5, 5, 5}), {1, 1, 1}).points.size() == 26);
  CHECK(extract_surface(box_mask(d, {1, 1, 1}, {6, 6, 6}), {1, 1, 1}).points.size() == 98);
  // touching the border: out-of-bounds counts as background
  CHECK(extract_surface(Mask(Dims3{3, 3, 3}, 1), {1, 1, 1}).points.size() == 26);
  CHECK_THROWS_AS(extract_surface(Mask(d), {1, 1, 1}), std::invalid_argument);

  const auto s = extract_surface(box_mask(d, {3, 3, 3}, {4, 4, 4}), {2, 0.5, 1}, {10, 0, -1});
  CHECK(s.points[0] == Vec3{16, 1.5, 2});
}

TEST_CASE("msd and hd95 simple cases") {
  SurfacePointSet a{{{0, 0, 0}}}, b{{{3, 0, 0}}};
  CHECK(msd(a, a) == 0.0);
  CHECK(msd(a, b) == 3.0);
  CHECK(hd95(a, b) == 3.0);
  CHECK_THROWS_AS(msd(a, SurfacePointSet{}), std::invalid_argument);
  CHECK_THROWS_AS(hd95(SurfacePointSet{}, a), std::invalid_argument);

  // every distance equals 2
  SurfacePointSet c, e;
  for (int i = 0; i < 10; ++i) {
    c.points.push_back({double(i) * 10, 0, 0});
    e.points.push_back({double(i) * 10, 2, 0});
  }
  CHECK(hd95(c, e) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(percentile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(percentile({5}, 0.95) == 5.0);
}

TEST_CASE("surface metrics equal the all-pairs oracle on random masks") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> us(2, 16);
  std::uniform_real_distribution<double> usp(0.5, 2.0);
  for (int t = 0; t < 200; ++t) {
    const Dims3 d{us(rng), us(rng), us(rng)};
    const Vec3 sp{usp(rng), usp(rng), usp(rng)};
    const auto a = extract_surface(random_mask(d, rng), sp), b = extract_surface(random_mask(d, rng), sp);
    const auto ab = brute_directed(a, b), ba = brute_directed(b, a);
    CHECK(directed_distances(a, b) == ab);
    CHECK(msd(a, b) == 0.5 * (mean(ab) + mean(ba)));
    CHECK(hd95(a, b) == std::max(brute_pct95(ab), brute_pct95(ba)));
  }
}

TEST_CASE("surface metric invariances") {
  const Dims3 d{12, 12, 12};
  const Mask m1 = box_mask(d, {2, 2, 2}, {7, 6, 8}), m2 = box_mask(d, {4, 3, 2}, {10, 9, 7});
  const auto a = extract_surface(m1, {1, 1, 1}), b = extract_surface(m2, {1, 1, 1});
  CHECK(msd(a, b) == doctest::Approx(msd(b, a)).epsilon(1e-12));
  CHECK(hd95(a, b) == doctest::Approx(hd95(b, a)).epsilon(1e-12));
  const auto a2 = extract_surface(m1, {2, 2, 2}), b2 = extract_surface(m2, {2, 2, 2});
  CHECK(msd(a2, b2) == doctest::Approx(2 * msd(a, b)).epsilon(1e-12));
  CHECK(hd95(a2, b2) == doctest::Approx(2 * hd95(a, b)).epsilon(1e-12));
  const auto at = extract_surface(m1, {1, 1, 1}, {5, -3, 7}), bt = extract_surface(m2, {1, 1, 1}, {5, -3, 7});
  CHECK(msd(at, bt) == doctest::Approx(msd(a, b)).epsilon(1e-12));
  // hd95 never exceeds the full Hausdorff distance
  const auto ab = brute_directed(a, b), ba = brute_directed(b, a);
  const double hd = std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
  CHECK(hd95(a, b) <= hd);
}

TEST_CASE("dice_score") {
  const Dims3 d{4, 4, 4};
  const Mask a = box_mask(d, {0, 0, 0}, {2, 4, 4}), b = box_mask(d, {1, 0, 0}, {3, 4, 4});
  CHECK(dice_score(a, a) == 1.0);
  CHECK(dice_score(a, b) == doctest::Approx(0.5));
  CHECK(dice_score(Mask(d), Mask(d)) == 1.0);
  CHECK(dice_score(a, Mask(d)) == 0.0);
}

TEST_CASE("jacobian_std") {
  const Dims3 d{8, 8, 8};
  CHECK(jacobian_std(DVF(d)) == 0.0);
  DVF dil(d);
  for (int c = 0; c < 3; ++c)
    for (int z = 0; z < d.z; ++z)
      for (int y = 0; y < d.y; ++y)
        for (int x = 0; x < d.x; ++x) dil.at(c, x, y, z) = 0.1f * (c == 0 ? x : c == 1 ? y : z);
  CHECK(jacobian_std(dil) < 1e-6);

  // population std against a direct computation
  const DVF f = test::random_dvf(d, 5, 0.3f);
  const Volume j = jacobian_determinant(f);
  double s = 0, q = 0;
  for (float v : j.data) s += v;
  s /= j.data.size();
  for (float v : j.data) q += (v - s) * (v - s);
  CHECK(jacobian_std(f) == doctest::Approx(std::sqrt(q / j.data.size())).epsilon(1e-9));
}

TEST_CASE("wilcoxon examples") {
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  const std::vector<double> y{0, 0, 0, 0, 0, 0};
  CHECK(wilcoxon_signed_rank(x, x) == 1.0);
  CHECK(wilcoxon_signed_rank(x, y) == doctest::Approx(0.03125).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(y, x) == doctest::Approx(0.03125).epsilon(1e-12));
  const std::vector<double> x4{1, 2, 3, 4}, y4{0, 0, 0, 0};
  CHECK_THROWS_AS(wilcoxon_signed_rank(x4, y4), std::invalid_argument);
  CHECK_THROWS_AS(wilcoxon_signed_rank(x, x4), std::invalid_argument);
}

TEST_CASE("wilcoxon exact branch matches enumeration") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> un(5, 12), uv(-6, 6);
  for (int t = 0; t < 300; ++t) {
    const int n = un(rng);
    std::vector<double> x(n), y(n);
    // small integer values force ties and zero differences
    for (int i = 0; i < n; ++i) {
      x[i] = uv(rng);
      y[i] = uv(rng);
    }
    int nonzero = 0;
    for (int i = 0; i < n; ++i) nonzero += x[i] != y[i];
    if (nonzero < 5) continue;
    const double p = wilcoxon_signed_rank(x, y);
    CHECK(p == doctest::Approx(enumerate_wilcoxon(x, y)).epsilon(1e-12));
    CHECK(wilcoxon_signed_rank(y, x) == doctest::Approx(p).epsilon(1e-12));
  }
}

TEST_CASE("wilcoxon normal approximation") {
  // n = 20, no ties: W+ = 30 vs mean 105, sd sqrt(717.5)
  std::vector<double> x(20), y(20, 0.0);
  for (int i = 0; i < 20; ++i) x[i] = (i < 3 || i == 10) ? -(i + 1.0) : (i + 1.0);
  for (int i = 0; i < 20; ++i) x[i] = -x[i];
  double w = 0;
  for (int i = 0; i < 20; ++i)
    if (x[i] > 0) w += i + 1;
  const double z = (w - 105.0) / std::sqrt(717.5);
  CHECK(wilcoxon_signed_rank(x, y) == doctest::Approx(std::erfc(std::abs(z) / std::sqrt(2.0))).epsilon(1e-9));
}

TEST_CASE("format_cell conventions") {
  // mean 1.73, sample std 0.7
  const std::vector<double> v{1.03, 1.73, 2.43};
  CHECK(format_cell(v, "msd") == "1.73 ± 0.7");
  const std::vector<double> j{0.13, 0.17, 0.21};
  CHECK(format_cell(j, "jac_std") == "0.17 ± 0.04");
  const std::vector<double> h{4.0, 5.0, 6.0};
  CHECK(format_cell(h, "hd95") == "5.0 ± 1.0");
  const std::vector<double> dsc{0.8, 0.9};
  CHECK(format_cell(dsc, "dice") == "0.85 ± 0.07");
}

TEST_CASE("report_tables cells, bold and daggers") {
  const std::vector<std::string> ids{"c1", "c2", "c3", "c4", "c5", "c6"};
  const std::vector<double> prop{1.0, 1.1, 1.2, 1.3, 1.4, 1.5};
  const std::vector<double> base1{2.0, 2.1, 2.2, 2.3, 2.4, 2.5};  // always worse: p = 0.03125
  const std::vector<double> base2{0.9, 1.2, 1.1, 1.4, 1.3, 1.6};  // mixed signs
  MethodResults a{"proposed", {}}, b{"base1", {}}, c{"base2", {}};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    a.cases.push_back(make_case(ids[i], {{"prostate", prop[i]}}));
    b.cases.push_back(make_case(ids[i], {{"prostate", base1[i]}}));
    c.cases.push_back(make_case(ids[i], {{"prostate", base2[i]}}));
  }
  const double p1 = wilcoxon_signed_rank(prop, base1), p2 = wilcoxon_signed_rank(prop, base2);
  REQUIRE(p1 < 0.05);
  REQUIRE(p2 >= 0.05);

  const auto t = report_tables({a, b, c}, {"base1", "base2"});
  CHECK(t.text.find("proposed | **1.25 ± 0.2**†\n") != std::string::npos);
  CHECK(t.text.find("proposed | **1.25 ± 0.2**†‡") == std::string::npos);
  CHECK(t.text.find("base1 | 2.25 ± 0.2‡\n") != std::string::npos);  // base1 is also worse than base2
  CHECK(t.csv.find("msd,proposed,prostate,1.25,") != std::string::npos);
  CHECK(t.csv.find(",base1\n") != std::string::npos);

  const auto single = report_tables({a}, {});
  CHECK(single.text.find("†") == std::string::npos);
  CHECK(single.text.find("proposed | **1.25 ± 0.2**\n") != std::string::npos);

  // Dice: higher is better
  CHECK(t.text.find("Dice") != std::string::npos);

  MethodResults short_set{"short", {a.cases.begin(), a.cases.end() - 1}};
  CHECK_THROWS_AS(report_tables({a, short_set}, {}), Error);
  CHECK_THROWS_AS(report_tables({a}, {"missing"}), Error);
}

TEST_CASE("results csv round trip") {
  test::TempDir tmp("evalcsv");
  std::vector<CaseResult> rs{make_case("case_000", {{"prostate", 1.25}, {"rectum", 0.5}}, 0.17),
                             make_case("case_001", {{"prostate", 2.0}, {"rectum", 0.75}}, 0.2)};
  rs[1].runtime_s = 0.6;
  write_results_csv(rs, tmp.path() / "r.csv");
  const auto back = read_results_csv(tmp.path() / "r.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].case_id == "case_000");
  CHECK(back[0].organs.at("rectum").msd_mm == 0.5);
  CHECK(back[0].organs.at("rectum").hd95_mm == 1.0);
  CHECK(back[0].dvf_jac_std == 0.17);
  CHECK(back[1].runtime_s == 0.6);

  std::ofstream(tmp.path() / "bad.csv") << "case_id,organ,metric,value\nc,prostate,msd,abc\n";
  CHECK_THROWS_AS(read_results_csv(tmp.path() / "bad.csv"), Error);
  std::ofstream(tmp.path() / "hdr.csv") << "a,b\n";
  CHECK_THROWS_AS(read_results_csv(tmp.path() / "hdr.csv"), Error);
}

TEST_CASE("evaluate_case matches labels by name") {
  const Dims3 d{10, 10, 10};
  Segmentation ref(d), pred(d);
  ref.label_names = {{0, "background"}, {1, "prostate"}, {2, "rectum"}};
  pred.label_names = {{0, "background"}, {1, "rectum"}, {2, "prostate"}};
  for (int z = 2; z < 5; ++z)
    for (int y = 2; y < 5; ++y)
      for (int x = 2; x < 5; ++x) {
        ref.at(x, y, z) = 1;
        pred.at(x, y, z) = 2;
        ref.at(x + 4, y + 4, z + 4) = 2;
        pred.at(x + 4, y + 4, z + 4) = 1;
      }
  const auto r = evaluate_case("c", pred, ref);
  CHECK(r.organs.at("prostate").dice == 1.0);
  CHECK(r.organs.at("rectum").msd_mm == 0.0);
  CHECK(r.organs.size() == 2);
}

TEST_CASE("emit_plots and heatmap") {
  test::TempDir tmp("plots");
  const char* organs[] = {"a", "b", "c", "d", "e"};
  MethodResults m1{"m1", {}}, m2{"m2", {}};
  for (int i = 0; i < 4; ++i) {
    std::map<std::string, double> v1, v2;
    for (const char* o : organs) {
      v1[o] = 1.0 + i;
      v2[o] = 0.5 + i;
    }
    m1.cases.push_back(make_case("c" + std::to_string(i), v1));
    m2.cases.push_back(make_case("c" + std::to_string(i), v2));
  }
  const auto files = emit_plots({m1, m2}, tmp.path() / "plots");
  CHECK(files.size() == 5);
  CHECK(std::filesystem::exists(tmp.path() / "plots" / "boxplot_msd_a.svg"));

  auto read_pgm = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::string magic;
    int w, h, mx;
    in >> magic >> w >> h >> mx;
    in.get();
    std::vector<unsigned char> px(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(px.data()), px.size());
    return px;
  };
  const Volume f = test::random_volume({6, 5, 4}, 1), g = test::random_volume({6, 5, 4}, 2);
  write_heatmap(f, f, 2, tmp.path() / "zero.pgm");
  for (unsigned char v : read_pgm(tmp.path() / "zero.pgm")) CHECK(v == 0);
  write_heatmap(f, g, 3, tmp.path() / "diff.pgm");
  const auto px = read_pgm(tmp.path() / "diff.pgm");
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x) {
      const double dd = std::min(2.0, std::abs(double(f.at(x, y, 3)) - g.at(x, y, 3)));
      CHECK(int(px[y * 6 + x]) == std::lround(255.0 * dd / 2.0));
    }
  CHECK_THROWS_AS(write_heatmap(f, g, 4, tmp.path() / "x.pgm"), Error);
}
