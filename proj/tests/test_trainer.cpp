#include <algorithm>
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "jrs/trainer.hpp"
#include "test_util.hpp"

using namespace jrs;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.patch_size = 16;
  c.margin = 2;
  c.gen_depth = 2;
  c.gen_base_filters = 2;
  c.critic_depth = 2;
  c.critic_base_filters = 2;
  c.patches_per_pair = 20;
  c.warmup_gen_iters = 2;
  c.warmup_critic_ratio = 3;
  c.steady_critic_ratio = 2;
  c.lr = 1e-3;
  c.total_gen_iters = 4;
  return c;
}

std::vector<Case> phantom_cases(int n, std::uint64_t first_seed = 0) {
  std::vector<Case> out;
  for (int i = 0; i < n; ++i) {
    PhantomSpec spec;
    spec.dims = {40, 40, 40};
    spec.amplitude_mm = 3.0;
    spec.organs = PhantomSpec::default_organs();
    for (auto& o : spec.organs) {
      for (int a = 0; a < 3; ++a) {
        o.center_mm[a] *= 0.6;
        o.size_min_mm[a] *= 0.6;
        o.size_max_mm[a] *= 0.6;
      }
      o.jitter_mm = 0.5;
    }
    spec.seed = first_seed + i;
    auto p = make_phantom_pair(spec);
    out.push_back(preprocess_case("case_" + std::to_string(i), p.fixed, p.fixed_seg, p.moving, p.moving_seg));
  }
  return out;
}

std::vector<std::vector<float>> snapshot(Network& n) {
  std::vector<std::vector<float>> out;
  for (auto* p : n.parameters()) out.push_back(p->value);
  for (auto* b : n.buffers()) out.push_back(b->value);
  return out;
}

}  // namespace

TEST_CASE("config defaults") {
  const TrainConfig c;
  CHECK(c.lambda1 == 1.0);
  CHECK(c.lambda2 == 0.01);
  CHECK(c.lr == 1e-5);
  CHECK(c.clip == 0.01);
  CHECK(c.warmup_gen_iters == 25);
  CHECK(c.warmup_critic_ratio == 100);
  CHECK(c.steady_critic_ratio == 5);
  CHECK(c.patch_size == 96);
  CHECK(c.patches_per_pair == 1000);
  CHECK(c.noise_std == 0.04);
  CHECK(c.max_def_mm == 0.5);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config text round trip and errors") {
  TrainConfig c = tiny_config();
  c.critic_mode = CriticMode::kMaskMultiply;
  c.use_dice = false;
  c.lambda2 = 0.125;
  c.seed = 99;
  const TrainConfig back = TrainConfig::parse(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.critic_mode == CriticMode::kMaskMultiply);
  CHECK_FALSE(back.use_dice);

  const TrainConfig p = TrainConfig::parse("# comment\nlambda2 = 0\n\n  lr=0.5 # trailing\nuse_dice = no\n");
  CHECK(p.lambda2 == 0.0);
  CHECK(p.lr == 0.5);
  CHECK_FALSE(p.use_dice);

  CHECK_THROWS_AS(TrainConfig::parse("bogus = 1"), Error);
  CHECK_THROWS_AS(TrainConfig::parse("lr = fast"), Error);
  CHECK_THROWS_AS(TrainConfig::parse("patch_size = 9.5"), Error);
  CHECK_THROWS_AS(TrainConfig::parse("critic_mode = both"), Error);
  CHECK_THROWS_AS(TrainConfig::parse("just words"), Error);
  CHECK_THROWS_AS(TrainConfig::load("/nonexistent/train.cfg"), Error);

  TrainConfig bad = tiny_config();
  bad.margin = 8;  // no output left
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_config();
  bad.patch_size = 18;  // not divisible by 2^depth
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_config();
  bad.lr = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("critic ratio schedule") {
  const TrainConfig c;
  CHECK(critic_ratio(1, c) == 100);
  CHECK(critic_ratio(25, c) == 100);
  CHECK(critic_ratio(26, c) == 5);
  CHECK(critic_ratio(1000, c) == 5);
}

TEST_CASE("preprocessing") {
  PhantomSpec spec;
  spec.seed = 1;
  auto p = make_phantom_pair(spec);
  const Case c = preprocess_case("x", p.fixed, p.fixed_seg, p.moving, p.moving_seg);
  const auto [lo, hi] = std::minmax_element(c.fixed.data.begin(), c.fixed.data.end());
  CHECK(*lo == doctest::Approx(-1.0f));
  CHECK(*hi == doctest::Approx(1.0f));
  CHECK(c.mask.count() > 0);
  CHECK(c.mask.count() < c.mask.data.size());

  // 2 mm slices are resampled to 1 mm, labels by nearest neighbour
  Volume f({8, 8, 4}, {1, 1, 2}), m({8, 8, 4}, {1, 1, 2});
  for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = m.data[i] = float(i % 7);
  Segmentation fs({8, 8, 4}, {1, 1, 2}), ms({8, 8, 4}, {1, 1, 2});
  fs.at(3, 3, 1) = 1;
  const Case r = preprocess_case("r", f, fs, m, ms);
  CHECK(r.fixed.spacing == Vec3{1, 1, 1});
  CHECK(r.fixed.dims.z == 8);
  CHECK(r.fixed_seg.dims == r.fixed.dims);
  CHECK(r.fixed_seg.at(3, 3, 2) == 1);

  Segmentation wrong({8, 8, 5});
  CHECK_THROWS_AS(preprocess_case("w", Volume({8, 8, 5}), wrong, Volume({8, 8, 4}), Segmentation({8, 8, 4})), Error);
}

TEST_CASE("load_cases") {
  test::TempDir tmp("cases");
  CHECK_THROWS_AS(load_cases(tmp.path()), Error);
  CHECK_THROWS_AS(load_cases(tmp.path() / "missing"), Error);
  PhantomSpec spec;
  spec.dims = {32, 32, 32};
  spec.organs = {{"blob", Primitive::kSphere, 0.4f, {0, 0, 0}, 1.0, {4, 4, 4}, {5, 5, 5}, 1}};
  for (int i = 0; i < 2; ++i) {
    spec.seed = i;
    const auto p = make_phantom_pair(spec);
    const auto dir = tmp.path() / ("case_00" + std::to_string(1 - i));
    std::filesystem::create_directories(dir);
    save_volume(p.fixed, dir / "fixed.mhd");
    save_volume(p.moving, dir / "moving.mhd");
    save_segmentation(p.fixed_seg, dir / "fixed_seg.mhd");
    save_segmentation(p.moving_seg, dir / "moving_seg.mhd");
  }
  std::filesystem::create_directories(tmp.path() / "notes");
  const auto cases = load_cases(tmp.path());
  REQUIRE(cases.size() == 2);
  CHECK(cases[0].id == "case_000");
  CHECK(cases[1].id == "case_001");
  CHECK(cases[0].fixed_seg.label_names.at(1) == "blob");
}

TEST_CASE("patch origins") {
  const Dims3 d{30, 28, 26};
  Mask mask(d);
  for (int z = 10; z < 14; ++z)
    for (int y = 9; y < 12; ++y)
      for (int x = 12; x < 20; ++x) mask.data[linear_index(d, x, y, z)] = 1;
  const int size = 16;
  const auto origins = sample_patch_origins(mask, 200, size, 5);
  CHECK(origins.size() == 200);
  for (const auto& o : origins) {
    for (int a = 0; a < 3; ++a) {
      CHECK(o[a] >= 0);
      CHECK(o[a] + size <= d[a]);
    }
    CHECK(mask.at(o[0] + size / 2, o[1] + size / 2, o[2] + size / 2));
  }
  CHECK(sample_patch_origins(mask, 50, size, 5) == std::vector(origins.begin(), origins.begin() + 50));

  // empty mask falls back to uniform in-bounds origins
  for (const auto& o : sample_patch_origins(Mask(d), 50, size, 1))
    for (int a = 0; a < 3; ++a) CHECK(o[a] + size <= d[a]);
  CHECK_THROWS_AS(sample_patch_origins(mask, 1, 27, 1), Error);
}

TEST_CASE("extract_patch copies the window") {
  auto cases = phantom_cases(1);
  const Case& c = cases[0];
  const PatchPair p = extract_patch(c, {3, 5, 7}, 16);
  CHECK(p.fixed_patch.dims == Dims3{16, 16, 16});
  for (int z = 0; z < 16; z += 5)
    for (int y = 0; y < 16; y += 3)
      for (int x = 0; x < 16; ++x) {
        CHECK(p.fixed_patch.at(x, y, z) == c.fixed.at(x + 3, y + 5, z + 7));
        CHECK(p.moving_patch.at(x, y, z) == c.moving.at(x + 3, y + 5, z + 7));
        CHECK(p.moving_seg_patch.at(x, y, z) == c.moving_seg.at(x + 3, y + 5, z + 7));
      }
  CHECK(p.fixed_patch.origin == Vec3{3, 5, 7});
  CHECK_THROWS_AS(extract_patch(c, {30, 0, 0}, 16), Error);
}

TEST_CASE("rmsprop update") {
  Parameter p{"w", {1.0f, -2.0f, 0.5f}, {0.5f, -0.1f, 0.0f}};
  RMSProp opt(0.01, 0.9, 1e-10);
  opt.step({&p});
  // first step: ms = 0.1 g^2, update = lr g / sqrt(ms)
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.01 / std::sqrt(0.1)).epsilon(1e-5));
  CHECK(p.value[1] == doctest::Approx(-2.0 + 0.01 / std::sqrt(0.1)).epsilon(1e-5));
  CHECK(p.value[2] == 0.5f);
  CHECK(opt.state().at("w")[0] == doctest::Approx(0.025f));
  opt.step({&p});
  const double ms = 0.9 * 0.025 + 0.1 * 0.25;
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.01 / std::sqrt(0.1) - 0.01 * 0.5 / std::sqrt(ms)).epsilon(1e-5));
}

TEST_CASE("critic step touches only the critic and respects the clip") {
  Trainer t(tiny_config(), phantom_cases(2));
  const auto g0 = snapshot(t.generator());
  const auto d0 = snapshot(t.critic());
  for (int i = 0; i < 3; ++i) {
    const double loss = t.critic_step(t.next_patch());
    CHECK(std::isfinite(loss));
    CHECK(t.critic().max_abs_parameter() <= 0.01f);
  }
  CHECK(snapshot(t.generator()) == g0);
  CHECK(snapshot(t.critic()) != d0);
}

TEST_CASE("generator step touches only the generator") {
  Trainer t(tiny_config(), phantom_cases(2));
  const auto g0 = snapshot(t.generator());
  const auto d0 = snapshot(t.critic());
  const LossBreakdown b = t.generator_step(t.next_patch());
  CHECK(std::isfinite(b.total));
  CHECK(snapshot(t.critic()) == d0);
  CHECK(snapshot(t.generator()) != g0);
}

TEST_CASE("identical pair has zero loss at initialization without the critic") {
  TrainConfig cfg = tiny_config();
  cfg.lambda2 = 0.0;
  Trainer t(cfg, phantom_cases(1));
  PatchPair p = t.next_patch();
  p.moving_patch = p.fixed_patch;
  p.moving_seg_patch = p.fixed_seg_patch;
  const LossBreakdown b = t.generator_step(p);
  CHECK(b.sim_ncc == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(std::abs(b.sim_dsc) < 1e-6);
  CHECK(b.smooth == 0.0);
  CHECK(b.adv == 0.0);
  CHECK(std::abs(b.total) < 1e-5);
}

TEST_CASE("run follows the critic schedule") {
  TrainConfig cfg = tiny_config();
  cfg.total_gen_iters = 5;
  Trainer t(cfg, phantom_cases(2));
  int calls = 0;
  double worst = 0;
  std::vector<int> per_iter;
  t.run([&](const IterationLog& r) { per_iter.push_back(r.critic_steps); },
        [&] {
          ++calls;
          worst = std::max(worst, double(t.critic().max_abs_parameter()));
        });
  CHECK(per_iter == std::vector<int>{3, 3, 2, 2, 2});
  CHECK(calls == 12);
  CHECK(t.state().critic_steps == 12);
  CHECK(t.state().gen_iter == 5);
  CHECK(worst <= 0.01);
}

TEST_CASE("checkpoint resume reproduces an uninterrupted run") {
  test::TempDir tmp("ckpt");
  const auto cases = phantom_cases(2);
  TrainConfig cfg = tiny_config();
  cfg.total_gen_iters = 4;
  Trainer full(cfg, cases);
  full.run();

  TrainConfig half_cfg = cfg;
  half_cfg.total_gen_iters = 2;
  Trainer first(half_cfg, cases);
  first.run();
  first.save_checkpoint(tmp.path() / "a.ckpt");
  Trainer second(cfg, cases);
  second.load_checkpoint(tmp.path() / "a.ckpt");
  CHECK(second.state().gen_iter == 2);
  second.run();
  CHECK(snapshot(second.generator()) == snapshot(full.generator()));
  CHECK(snapshot(second.critic()) == snapshot(full.critic()));
  CHECK(second.state().patch_counter == full.state().patch_counter);
}

TEST_CASE("checkpoint round trip and validation") {
  test::TempDir tmp("ckpt2");
  TrainConfig cfg = tiny_config();
  cfg.total_gen_iters = 1;
  Trainer t(cfg, phantom_cases(1));
  t.run();
  const auto path = tmp.path() / "g.ckpt";
  t.save_checkpoint(path);
  CHECK(checkpoint_config(path).to_text() == cfg.to_text());

  TrainConfig got;
  auto g = load_generator(path, &got);
  CHECK(got.to_text() == cfg.to_text());
  CHECK(snapshot(*g) == snapshot(t.generator()));

  TrainConfig other = cfg;
  other.gen_base_filters = 3;
  Trainer mismatch(other, phantom_cases(1));
  CHECK_THROWS_AS(mismatch.load_checkpoint(path), Error);

  std::ofstream(tmp.path() / "old.ckpt") << "JRSGAN-CKPT v0\n";
  CHECK_THROWS_AS(load_generator(tmp.path() / "old.ckpt"), Error);
  CHECK_THROWS_AS(load_generator(tmp.path() / "none.ckpt"), Error);
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(tmp.path() / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS(load_generator(tmp.path() / "cut.ckpt"), Error);
}

TEST_CASE("non-finite loss writes a diagnostic checkpoint") {
  test::TempDir tmp("diag");
  Trainer t(tiny_config(), phantom_cases(1));
  t.set_diagnostic_dir(tmp.path());
  PatchPair p = t.next_patch();
  p.fixed_patch.data[linear_index(p.fixed_patch.dims, 8, 8, 8)] = NAN;
  CHECK_THROWS_AS(t.generator_step(p), Error);
  CHECK(std::filesystem::exists(tmp.path() / "diagnostic.ckpt"));
}

TEST_CASE("tile_starts") {
  CHECK(tile_starts(12, 12) == std::vector<int>{0});
  CHECK(tile_starts(5, 12) == std::vector<int>{0});
  for (int n : {13, 40, 64, 100})
    for (int out : {8, 12, 56}) {
      if (n < out) continue;
      const auto s = tile_starts(n, out);
      CHECK(s.front() == 0);
      CHECK(s.back() == n - out);
      for (std::size_t k = 1; k < s.size(); ++k) {
        CHECK(s[k] > s[k - 1]);
        CHECK(s[k] - s[k - 1] <= out * 3 / 4);
      }
    }
}

TEST_CASE("propagate is the identity at initialization") {
  TrainConfig cfg = tiny_config();
  Generator g(cfg.generator(), 7);
  PhantomSpec spec;
  spec.dims = {20, 18, 22};
  spec.organs = {{"blob", Primitive::kSphere, 0.4f, {0, 0, 0}, 1.0, {3, 3, 3}, {4, 4, 4}, 1}};
  const auto p = make_phantom_pair(spec);
  const Propagation r = propagate(g, p.fixed, p.moving, p.moving_seg);
  CHECK(r.dvf.dims == p.fixed.dims);
  CHECK(r.dvf.max_magnitude() == 0.0f);
  CHECK(r.warped.data == p.moving.data);
  CHECK(r.warped_seg.labels == p.moving_seg.labels);

  CHECK_THROWS_AS(propagate(g, Volume({10, 20, 20}), Volume({10, 20, 20}), Segmentation({10, 20, 20})), Error);
  CHECK_THROWS_AS(propagate(g, p.fixed, Volume({20, 18, 21}), p.moving_seg), Error);
}

TEST_CASE("propagate stitches a constant field seamlessly") {
  TrainConfig cfg = tiny_config();
  Generator g(cfg.generator(), 7);
  // zero head weights plus a bias give a constant prediction in every tile
  auto params = g.parameters();
  Parameter* bias = params.back();
  REQUIRE(bias->name == "gen.head.bias");
  bias->value = {0.5f, -0.25f, 1.0f};
  const Dims3 d{29, 17, 23};
  const Volume f = test::smooth_random_volume(d, 1), m = test::smooth_random_volume(d, 2);
  const Propagation r = propagate(g, f, m, Segmentation(d));
  for (std::size_t i = 0; i < d.count(); ++i) {
    CHECK(r.dvf.component(0)[i] == doctest::Approx(0.5f));
    CHECK(r.dvf.component(1)[i] == doctest::Approx(-0.25f));
    CHECK(r.dvf.component(2)[i] == doctest::Approx(1.0f));
  }
  DVF ref(d);
  for (std::size_t i = 0; i < d.count(); ++i) {
    ref.component(0)[i] = 0.5f;
    ref.component(1)[i] = -0.25f;
    ref.component(2)[i] = 1.0f;
  }
  const Volume w = warp_trilinear(m, ref);
  for (std::size_t i = 0; i < d.count(); ++i) CHECK(r.warped.data[i] == doctest::Approx(w.data[i]).epsilon(1e-5));
}
