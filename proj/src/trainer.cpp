#include "jrs/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "jrs/simd/kernels.hpp"

namespace jrs {

// --- TrainConfig ------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw Error("config: bad number for " + key + ": '" + v + "'");
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw Error("config: bad integer for " + key + ": '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config: bad boolean for " + key + ": '" + v + "'");
}

}  // namespace

GeneratorConfig TrainConfig::generator() const {
  GeneratorConfig g;
  g.depth = gen_depth;
  g.base_filters = gen_base_filters;
  g.input_size = patch_size;
  g.margin = margin;
  return g;
}

CriticConfig TrainConfig::critic() const {
  CriticConfig c;
  c.depth = critic_depth;
  c.base_filters = critic_base_filters;
  c.mode = critic_mode;
  return c;
}

DisturbConfig TrainConfig::disturbance(std::uint64_t s) const {
  DisturbConfig d;
  d.noise_std = noise_std;
  d.smooth_std = smooth_std;
  d.gamma_range = {gamma_min, gamma_max};
  d.max_def_mm = max_def_mm;
  d.seed = s;
  return d;
}

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto as_int = [&] { return static_cast<int>(parse_int(key, v)); };
  if (key == "lambda1") lambda1 = parse_double(key, v);
  else if (key == "lambda2") lambda2 = parse_double(key, v);
  else if (key == "lr") lr = parse_double(key, v);
  else if (key == "clip") clip = parse_double(key, v);
  else if (key == "warmup_gen_iters") warmup_gen_iters = as_int();
  else if (key == "warmup_critic_ratio") warmup_critic_ratio = as_int();
  else if (key == "steady_critic_ratio") steady_critic_ratio = as_int();
  else if (key == "patch_size") patch_size = as_int();
  else if (key == "patches_per_pair") patches_per_pair = as_int();
  else if (key == "critic_mode") {
    try {
      critic_mode = critic_mode_from_string(v);
    } catch (const std::invalid_argument& e) {
      throw Error(std::string("config: ") + e.what());
    }
  } else if (key == "total_gen_iters") total_gen_iters = as_int();
  else if (key == "seed") seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "gen_depth") gen_depth = as_int();
  else if (key == "gen_base_filters") gen_base_filters = as_int();
  else if (key == "margin") margin = as_int();
  else if (key == "critic_depth") critic_depth = as_int();
  else if (key == "critic_base_filters") critic_base_filters = as_int();
  else if (key == "use_dice") use_dice = parse_bool(key, v);
  else if (key == "noise_std") noise_std = parse_double(key, v);
  else if (key == "smooth_std") smooth_std = parse_double(key, v);
  else if (key == "gamma_min") gamma_min = parse_double(key, v);
  else if (key == "gamma_max") gamma_max = parse_double(key, v);
  else if (key == "max_def_mm") max_def_mm = parse_double(key, v);
  else throw Error("config: unknown key '" + key + "'");
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  cfg.apply(text);
  return cfg;
}

void TrainConfig::apply(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void TrainConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply(ss.str());
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  TrainConfig cfg;
  cfg.apply_file(path);
  return cfg;
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"lambda1", fmt_double(lambda1)},
      {"lambda2", fmt_double(lambda2)},
      {"lr", fmt_double(lr)},
      {"clip", fmt_double(clip)},
      {"warmup_gen_iters", std::to_string(warmup_gen_iters)},
      {"warmup_critic_ratio", std::to_string(warmup_critic_ratio)},
      {"steady_critic_ratio", std::to_string(steady_critic_ratio)},
      {"patch_size", std::to_string(patch_size)},
      {"patches_per_pair", std::to_string(patches_per_pair)},
      {"critic_mode", to_string(critic_mode)},
      {"total_gen_iters", std::to_string(total_gen_iters)},
      {"seed", std::to_string(seed)},
      {"gen_depth", std::to_string(gen_depth)},
      {"gen_base_filters", std::to_string(gen_base_filters)},
      {"margin", std::to_string(margin)},
      {"critic_depth", std::to_string(critic_depth)},
      {"critic_base_filters", std::to_string(critic_base_filters)},
      {"use_dice", use_dice ? "true" : "false"},
      {"noise_std", fmt_double(noise_std)},
      {"smooth_std", fmt_double(smooth_std)},
      {"gamma_min", fmt_double(gamma_min)},
      {"gamma_max", fmt_double(gamma_max)},
      {"max_def_mm", fmt_double(max_def_mm)},
  };
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
  return out;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error("config: " + what);
  };
  require(lambda1 >= 0 && lambda2 >= 0, "lambda1 and lambda2 must be non-negative");
  require(lr > 0, "lr must be positive");
  require(clip > 0, "clip must be positive");
  require(warmup_gen_iters >= 0, "warmup_gen_iters must be non-negative");
  require(warmup_critic_ratio >= 1 && steady_critic_ratio >= 1, "critic ratios must be >= 1");
  require(patches_per_pair >= 1, "patches_per_pair must be >= 1");
  require(total_gen_iters >= 0, "total_gen_iters must be non-negative");
  require(critic_depth >= 1 && critic_base_filters >= 1, "critic depth and filters must be positive");
  require(noise_std >= 0 && smooth_std >= 0 && max_def_mm >= 0, "disturbance amplitudes must be non-negative");
  require(gamma_min <= gamma_max, "gamma_min must not exceed gamma_max");
  try {
    jrs::validate(generator());
  } catch (const std::invalid_argument& e) {
    throw Error(std::string("config: ") + e.what());
  }
}

// --- Cases and patches --------------------------------------------------------------

namespace {

Segmentation resample_labels_nearest(const Segmentation& s, const Dims3& to, const Vec3& sp) {
  Segmentation out(to, sp, s.origin);
  out.label_names = s.label_names;
  for (int z = 0; z < to.z; ++z)
    for (int y = 0; y < to.y; ++y)
      for (int x = 0; x < to.x; ++x) {
        const int sx = std::clamp(static_cast<int>(std::lround(x * sp[0] / s.spacing[0])), 0, s.dims.x - 1);
        const int sy = std::clamp(static_cast<int>(std::lround(y * sp[1] / s.spacing[1])), 0, s.dims.y - 1);
        const int sz = std::clamp(static_cast<int>(std::lround(z * sp[2] / s.spacing[2])), 0, s.dims.z - 1);
        out.at(x, y, z) = s.at(sx, sy, sz);
      }
  return out;
}

template <typename T>
void crop_into(const std::vector<T>& src, const Dims3& sd, const std::array<int, 3>& o, const Dims3& od,
               std::vector<T>& dst) {
  dst.resize(od.count());
  for (int z = 0; z < od.z; ++z)
    for (int y = 0; y < od.y; ++y) {
      const auto s = src.begin() + static_cast<std::ptrdiff_t>(linear_index(sd, o[0], o[1] + y, o[2] + z));
      std::copy(s, s + od.x, dst.begin() + static_cast<std::ptrdiff_t>(linear_index(od, 0, y, z)));
    }
}

// Centered crop of `channels` planes from a cube of side n by margin m.
std::vector<float> crop_planes(const float* src, int channels, int n, int m) {
  const Dims3 sd{n, n, n};
  const int o = n - 2 * m;
  const Dims3 od{o, o, o};
  std::vector<float> out(static_cast<std::size_t>(channels) * od.count());
  for (int c = 0; c < channels; ++c)
    for (int z = 0; z < o; ++z)
      for (int y = 0; y < o; ++y) {
        const float* s = src + c * sd.count() + linear_index(sd, m, y + m, z + m);
        std::copy(s, s + o, out.data() + c * od.count() + linear_index(od, 0, y, z));
      }
  return out;
}

bool has_foreground(const std::vector<float>& onehot_crop, std::size_t n) {
  // channel 0 is background; any voxel with background < 1 has organ content
  for (std::size_t i = 0; i < n; ++i)
    if (onehot_crop[i] < 0.5f) return true;
  return false;
}

}  // namespace

Case preprocess_case(std::string id, Volume fixed, Segmentation fixed_seg, Volume moving, Segmentation moving_seg) {
  auto to_mm = [](Volume& v, Segmentation& s) {
    if (v.spacing == Vec3{1.0, 1.0, 1.0}) return;
    v = resample_isotropic(v, 1.0);
    s = resample_labels_nearest(s, v.dims, v.spacing);
  };
  to_mm(fixed, fixed_seg);
  to_mm(moving, moving_seg);
  if (!(fixed.dims == moving.dims) || !(fixed.dims == fixed_seg.dims) || !(moving.dims == moving_seg.dims))
    throw Error("case " + id + ": fixed, moving and segmentations must share one grid");
  Case c;
  c.id = std::move(id);
  c.fixed = rescale_intensity(fixed, -1.0f, 1.0f);
  c.moving = rescale_intensity(moving, -1.0f, 1.0f);
  c.fixed_seg = std::move(fixed_seg);
  c.moving_seg = std::move(moving_seg);
  c.mask = torso_mask(c.fixed);
  return c;
}

std::vector<Case> load_cases(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("data directory not found: " + dir.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory() && std::filesystem::exists(e.path() / "fixed.mhd")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw Error("dataset is empty: no case directories with fixed.mhd in " + dir.string());
  std::vector<Case> cases;
  for (const auto& d : dirs)
    cases.push_back(preprocess_case(d.filename().string(), load_volume(d / "fixed.mhd"),
                                    load_segmentation(d / "fixed_seg.mhd"), load_volume(d / "moving.mhd"),
                                    load_segmentation(d / "moving_seg.mhd")));
  return cases;
}

PatchPair extract_patch(const Case& c, const std::array<int, 3>& o, int size) {
  const Dims3 d = c.fixed.dims;
  for (int a = 0; a < 3; ++a)
    if (o[a] < 0 || o[a] + size > d[a]) throw Error("patch out of bounds");
  const Dims3 pd{size, size, size};
  const Vec3 org{c.fixed.origin[0] + o[0] * c.fixed.spacing[0], c.fixed.origin[1] + o[1] * c.fixed.spacing[1],
                 c.fixed.origin[2] + o[2] * c.fixed.spacing[2]};
  PatchPair p;
  p.origin = o;
  p.fixed_patch = Volume(pd, c.fixed.spacing, org);
  p.moving_patch = Volume(pd, c.moving.spacing, org);
  p.fixed_seg_patch = Segmentation(pd, c.fixed_seg.spacing, org);
  p.moving_seg_patch = Segmentation(pd, c.moving_seg.spacing, org);
  p.fixed_seg_patch.label_names = c.fixed_seg.label_names;
  p.moving_seg_patch.label_names = c.moving_seg.label_names;
  crop_into(c.fixed.data, d, o, pd, p.fixed_patch.data);
  crop_into(c.moving.data, d, o, pd, p.moving_patch.data);
  crop_into(c.fixed_seg.labels, d, o, pd, p.fixed_seg_patch.labels);
  crop_into(c.moving_seg.labels, d, o, pd, p.moving_seg_patch.labels);
  return p;
}

std::vector<std::array<int, 3>> sample_patch_origins(const Mask& mask, int n, int size, std::uint64_t seed) {
  const Dims3 d = mask.dims;
  if (d.x < size || d.y < size || d.z < size)
    throw Error("volume " + std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z) +
                " is smaller than the patch size " + std::to_string(size));
  const int h = size / 2;
  std::vector<std::array<int, 3>> eligible;
  for (int z = h; z <= d.z - size + h; ++z)
    for (int y = h; y <= d.y - size + h; ++y)
      for (int x = h; x <= d.x - size + h; ++x)
        if (mask.at(x, y, z)) eligible.push_back({x - h, y - h, z - h});
  std::mt19937_64 rng(seed);
  std::vector<std::array<int, 3>> out(n);
  if (eligible.empty()) {
    std::uniform_int_distribution<int> ux(0, d.x - size), uy(0, d.y - size), uz(0, d.z - size);
    for (auto& o : out) o = {ux(rng), uy(rng), uz(rng)};
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    for (auto& o : out) o = eligible[pick(rng)];
  }
  return out;
}

std::vector<PatchPair> sample_patches(const Case& c, int n, int size, const Mask& mask, std::uint64_t seed) {
  std::vector<PatchPair> out;
  for (const auto& o : sample_patch_origins(mask, n, size, seed)) out.push_back(extract_patch(c, o, size));
  return out;
}

int critic_ratio(int gen_iter, const TrainConfig& cfg) {
  return gen_iter <= cfg.warmup_gen_iters ? cfg.warmup_critic_ratio : cfg.steady_critic_ratio;
}

void RMSProp::step(const std::vector<Parameter*>& params) {
  const auto& k = simd::kernels();
  for (Parameter* p : params) {
    auto& ms = ms_[p->name];
    if (ms.size() != p->value.size()) ms.assign(p->value.size(), 0.0f);
    k.rmsprop_update(p->value.data(), ms.data(), p->grad.data(), static_cast<float>(lr_), static_cast<float>(rho_),
                     static_cast<float>(eps_), p->value.size());
  }
}

// --- Trainer ------------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, std::vector<Case> cases)
    : cfg_(std::move(cfg)), cases_(std::move(cases)), gen_opt_(cfg_.lr), critic_opt_(cfg_.lr) {
  cfg_.validate();
  if (cases_.empty()) throw Error("dataset is empty");
  gen_ = std::make_unique<Generator>(cfg_.generator(), mix_seed(cfg_.seed, 1));
  critic_ = std::make_unique<Critic>(cfg_.critic(), mix_seed(cfg_.seed, 2));
  for (std::size_t i = 0; i < cases_.size(); ++i)
    origins_.push_back(
        sample_patch_origins(cases_[i].mask, cfg_.patches_per_pair, cfg_.patch_size, mix_seed(cfg_.seed, 1000 + i)));
}

PatchPair Trainer::next_patch() {
  const int p = cfg_.patch_size, m = cfg_.margin;
  PatchPair out;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const std::uint64_t h = mix_seed(cfg_.seed ^ 0x5EEDull, state_.patch_counter++);
    const std::size_t ci = h % cases_.size();
    const auto& list = origins_[ci];
    out = extract_patch(cases_[ci], list[(h >> 20) % list.size()], p);
    // organ content inside the generator's output window
    bool fg = false;
    for (int z = m; z < p - m && !fg; ++z)
      for (int y = m; y < p - m && !fg; ++y)
        for (int x = m; x < p - m && !fg; ++x) fg = out.fixed_seg_patch.at(x, y, z) != 0;
    if (fg) break;
  }
  return out;
}

void Trainer::check_finite(double v, const char* what) {
  if (std::isfinite(v)) return;
  std::filesystem::create_directories(diagnostic_dir_);
  save_checkpoint(diagnostic_dir_ / "diagnostic.ckpt");
  throw Error(std::string("non-finite ") + what + " at generator iteration " + std::to_string(state_.gen_iter + 1) +
              "; state written to " + (diagnostic_dir_ / "diagnostic.ckpt").string());
}

namespace {

Tensor pair_input(const Volume& a, const Volume& b) {
  Tensor t(2, a.dims);
  std::copy(a.data.begin(), a.data.end(), t.channel(0));
  std::copy(b.data.begin(), b.data.end(), t.channel(1));
  return t;
}

int label_channels(const PatchPair& p) {
  return std::max(p.fixed_seg_patch.num_labels(), p.moving_seg_patch.num_labels());
}

}  // namespace

double Trainer::critic_step(const PatchPair& p) {
  const int n = cfg_.patch_size, m = cfg_.margin, o = n - 2 * m;
  const Dims3 pd{n, n, n}, od{o, o, o};
  const std::size_t no = od.count();
  const int C = label_channels(p);
  const Vec3 sp = p.fixed_patch.spacing;

  const Tensor phi = gen_->forward(pair_input(p.fixed_patch, p.moving_patch), Mode::kTrain, false);
  DVF dvf(od, sp);
  dvf.disp = phi.data;

  std::vector<float> warped(no), warped_seg(C * no);
  warp_channels(p.moving_patch.data, 1, pd, sp, dvf, warped);
  warp_channels(one_hot(p.moving_seg_patch, C), C, pd, sp, dvf, warped_seg);
  std::vector<float> fg_fake(no);
  for (std::size_t i = 0; i < no; ++i) fg_fake[i] = 1.0f - warped_seg[i];

  const auto fixed_c = crop_planes(p.fixed_patch.data.data(), 1, n, m);
  const Volume disturbed = disturb(p.fixed_patch, cfg_.disturbance(mix_seed(cfg_.seed ^ 0xD157ull, state_.critic_steps)));
  const auto real_c = crop_planes(disturbed.data.data(), 1, n, m);
  const auto fixed_oh = crop_planes(one_hot(p.fixed_seg_patch, C).data(), 1, n, m);  // background plane
  std::vector<float> fg_real(no);
  for (std::size_t i = 0; i < no; ++i) fg_real[i] = 1.0f - fixed_oh[i];

  critic_->zero_grad();
  // The loss is linear in the mean scores, so each branch's gradient is a constant.
  const Tensor s_fake = critic_->forward(assemble_critic_input(fixed_c, warped, fg_fake, od, cfg_.critic_mode));
  critic_->backward(Tensor(1, s_fake.dims, 1.0f / static_cast<float>(s_fake.voxels())), false, true);
  const Tensor s_real = critic_->forward(assemble_critic_input(fixed_c, real_c, fg_real, od, cfg_.critic_mode));
  critic_->backward(Tensor(1, s_real.dims, -1.0f / static_cast<float>(s_real.voxels())), false, true);
  const double loss = wgan_critic_loss(s_fake.data, s_real.data);
  check_finite(loss, "critic loss");

  critic_opt_.step(critic_->parameters());
  clip_parameters(*critic_, static_cast<float>(cfg_.clip));
  return loss;
}

LossBreakdown Trainer::generator_step(const PatchPair& p) {
  const int n = cfg_.patch_size, m = cfg_.margin, o = n - 2 * m;
  const Dims3 pd{n, n, n}, od{o, o, o};
  const std::size_t no = od.count();
  const int C = label_channels(p);
  const Vec3 sp = p.fixed_patch.spacing;

  gen_->zero_grad();
  LossBreakdown sum;
  auto direction = [&](const Volume& F, const Segmentation& SF, const Volume& M, const Segmentation& SM) {
    const Tensor phi = gen_->forward(pair_input(F, M), Mode::kTrain, true);
    DVF dvf(od, sp);
    dvf.disp = phi.data;
    const auto moving_oh = one_hot(SM, C);
    std::vector<float> warped(no), warped_seg(C * no);
    warp_channels(M.data, 1, pd, sp, dvf, warped);
    warp_channels(moving_oh, C, pd, sp, dvf, warped_seg);
    const auto fixed_c = crop_planes(F.data.data(), 1, n, m);
    const auto fixed_oh = crop_planes(one_hot(SF, C).data(), C, n, m);

    std::vector<float> g_w(no, 0.0f), g_ws(C * no, 0.0f), g_dvf(3 * no, 0.0f);
    LossBreakdown b;
    b.sim_ncc = 1.0 - ncc(warped, fixed_c, g_w, -1.0);
    if (cfg_.use_dice && has_foreground(fixed_oh, no)) b.sim_dsc = 1.0 - soft_dice(warped_seg, fixed_oh, C, g_ws, -1.0);
    b.smooth = bending_energy(dvf, g_dvf, cfg_.lambda1);
    if (cfg_.lambda2 > 0.0) {
      std::vector<float> fg(no);
      for (std::size_t i = 0; i < no; ++i) fg[i] = 1.0f - warped_seg[i];
      const Tensor scores = critic_->forward(assemble_critic_input(fixed_c, warped, fg, od, cfg_.critic_mode));
      Tensor g_scores(1, scores.dims);
      b.adv = wgan_generator_loss(scores.data, g_scores.data, cfg_.lambda2);
      const Tensor g_in = critic_->backward(g_scores, true, false);
      std::vector<float> g_fg(no, 0.0f);
      assemble_critic_input_backward(g_in, fixed_c, warped, fg, cfg_.critic_mode, g_w, g_fg);
      for (std::size_t i = 0; i < no; ++i) g_ws[i] -= g_fg[i];
    }
    warp_channels_backward(M.data, 1, pd, sp, dvf, g_w, g_dvf);
    warp_channels_backward(moving_oh, C, pd, sp, dvf, g_ws, g_dvf);
    Tensor gt(3, od);
    gt.data = std::move(g_dvf);
    gen_->backward(gt);
    sum += generator_total_loss(b, cfg_.lambda1, cfg_.lambda2);
  };
  direction(p.fixed_patch, p.fixed_seg_patch, p.moving_patch, p.moving_seg_patch);
  direction(p.moving_patch, p.moving_seg_patch, p.fixed_patch, p.fixed_seg_patch);
  check_finite(sum.total, "generator loss");
  gen_opt_.step(gen_->parameters());
  if (!gen_->all_finite()) check_finite(NAN, "generator parameter");
  return sum;
}

void Trainer::run(const std::function<void(const IterationLog&)>& on_iter, const std::function<void()>& after_critic) {
  while (state_.gen_iter < cfg_.total_gen_iters) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationLog rec;
    rec.iter = state_.gen_iter + 1;
    rec.critic_steps = critic_ratio(rec.iter, cfg_);
    for (int k = 0; k < rec.critic_steps; ++k) {
      rec.critic_loss += critic_step(next_patch());
      ++state_.critic_steps;
      rec.max_abs_critic = std::max(rec.max_abs_critic, static_cast<double>(critic_->max_abs_parameter()));
      if (after_critic) after_critic();
    }
    rec.critic_loss /= rec.critic_steps;
    rec.gen = generator_step(next_patch());
    state_.gen_iter = rec.iter;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_iter) on_iter(rec);
  }
}

// --- Checkpoints ----------------------------------------------------------------------

namespace {

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); }

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw Error("truncated checkpoint");
  return v;
}

void put_array(std::ostream& out, const std::string& name, const std::vector<float>& v) {
  put_u64(out, name.size());
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u64(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

struct CheckpointData {
  std::string config_text;
  TrainerState state;
  std::map<std::string, std::vector<float>> arrays;
};

CheckpointData read_checkpoint(const std::filesystem::path& path, bool arrays) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string tag;
  std::getline(in, tag);
  if (tag != kCheckpointTag)
    throw Error("incompatible checkpoint version in " + path.string() + " (found '" + tag.substr(0, 32) +
                "', expected '" + kCheckpointTag + "')");
  CheckpointData d;
  d.config_text.resize(get_u64(in));
  in.read(d.config_text.data(), static_cast<std::streamsize>(d.config_text.size()));
  d.state.gen_iter = static_cast<int>(get_u64(in));
  d.state.critic_steps = get_u64(in);
  d.state.patch_counter = get_u64(in);
  if (!arrays) return d;
  const std::uint64_t count = get_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(get_u64(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    std::vector<float> v(get_u64(in));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!in) throw Error("truncated checkpoint");
    d.arrays[name] = std::move(v);
  }
  return d;
}

void restore(std::vector<float>& dst, const std::map<std::string, std::vector<float>>& arrays, const std::string& name) {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw Error("checkpoint is missing array " + name);
  if (it->second.size() != dst.size()) throw Error("checkpoint array " + name + " has the wrong size");
  dst = it->second;
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out << kCheckpointTag << '\n';
    const std::string text = cfg_.to_text();
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put_u64(out, static_cast<std::uint64_t>(state_.gen_iter));
    put_u64(out, state_.critic_steps);
    put_u64(out, state_.patch_counter);

    std::vector<std::pair<std::string, const std::vector<float>*>> arrays;
    for (auto* p : gen_->parameters()) arrays.emplace_back(p->name, &p->value);
    for (auto* b : gen_->buffers()) arrays.emplace_back(b->name, &b->value);
    for (auto* p : critic_->parameters()) arrays.emplace_back(p->name, &p->value);
    for (auto& [k, v] : gen_opt_.state()) arrays.emplace_back("opt.gen." + k, &v);
    for (auto& [k, v] : critic_opt_.state()) arrays.emplace_back("opt.critic." + k, &v);
    put_u64(out, arrays.size());
    for (const auto& [name, v] : arrays) put_array(out, name, *v);
    if (!out) throw Error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const CheckpointData d = read_checkpoint(path, true);
  const TrainConfig saved = TrainConfig::parse(d.config_text);
  if (saved.generator().depth != cfg_.gen_depth || saved.gen_base_filters != cfg_.gen_base_filters ||
      saved.patch_size != cfg_.patch_size || saved.margin != cfg_.margin || saved.critic_depth != cfg_.critic_depth ||
      saved.critic_base_filters != cfg_.critic_base_filters || saved.critic_mode != cfg_.critic_mode)
    throw Error("checkpoint architecture does not match the configuration");
  for (auto* p : gen_->parameters()) restore(p->value, d.arrays, p->name);
  for (auto* b : gen_->buffers()) restore(b->value, d.arrays, b->name);
  for (auto* p : critic_->parameters()) restore(p->value, d.arrays, p->name);
  gen_opt_.state().clear();
  critic_opt_.state().clear();
  for (const auto& [k, v] : d.arrays) {
    if (k.rfind("opt.gen.", 0) == 0) gen_opt_.state()[k.substr(8)] = v;
    if (k.rfind("opt.critic.", 0) == 0) critic_opt_.state()[k.substr(11)] = v;
  }
  state_ = d.state;
}

TrainConfig checkpoint_config(const std::filesystem::path& path) {
  return TrainConfig::parse(read_checkpoint(path, false).config_text);
}

std::unique_ptr<Generator> load_generator(const std::filesystem::path& path, TrainConfig* cfg_out) {
  const CheckpointData d = read_checkpoint(path, true);
  const TrainConfig cfg = TrainConfig::parse(d.config_text);
  auto g = std::make_unique<Generator>(cfg.generator(), mix_seed(cfg.seed, 1));
  for (auto* p : g->parameters()) restore(p->value, d.arrays, p->name);
  for (auto* b : g->buffers()) restore(b->value, d.arrays, b->name);
  if (cfg_out) *cfg_out = cfg;
  return g;
}

// --- Inference ----------------------------------------------------------------------------

std::vector<int> tile_starts(int n, int out) {
  if (n <= out) return {0};
  // windows overlap by at least a quarter of their extent
  const int step = std::max(1, out * 3 / 4);
  const int count = (n - out + step - 1) / step + 1;
  std::vector<int> s(count);
  for (int k = 0; k < count; ++k)
    s[k] = static_cast<int>(std::lround(static_cast<double>(k) * (n - out) / (count - 1)));
  return s;
}

Propagation propagate(Generator& g, const Volume& fixed, const Volume& moving, const Segmentation& moving_seg,
                      Mode bn_mode) {
  const GeneratorConfig& gc = g.config();
  const int P = gc.input_size, m = gc.margin, O = gc.output_size();
  const Dims3 d = fixed.dims;
  if (!(moving.dims == d) || !(moving_seg.dims == d)) throw Error("propagate: fixed and moving grids differ");
  if (d.x < O || d.y < O || d.z < O)
    throw Error("propagate: volume smaller than one generator output window (" + std::to_string(O) + "^3)");

  const Dims3 pd{d.x + 2 * m, d.y + 2 * m, d.z + 2 * m};
  auto pad = [&](const Volume& v) {
    std::vector<float> out(pd.count());
    for (int z = 0; z < pd.z; ++z)
      for (int y = 0; y < pd.y; ++y)
        for (int x = 0; x < pd.x; ++x)
          out[linear_index(pd, x, y, z)] = v.at(std::clamp(x - m, 0, d.x - 1), std::clamp(y - m, 0, d.y - 1),
                                                std::clamp(z - m, 0, d.z - 1));
    return out;
  };
  const auto pf = pad(fixed), pm = pad(moving);

  const std::size_t n = d.count();
  std::vector<double> acc(3 * n, 0.0);
  std::vector<int> hits(n, 0);
  const auto sx = tile_starts(d.x, O), sy = tile_starts(d.y, O), sz = tile_starts(d.z, O);
  const Dims3 tin{P, P, P}, tout{O, O, O};
  for (int z0 : sz)
    for (int y0 : sy)
      for (int x0 : sx) {
        // output voxel (x0 + i) needs padded input starting at x0 (margin m already included)
        Tensor in(2, tin);
        for (int z = 0; z < P; ++z)
          for (int y = 0; y < P; ++y) {
            const std::size_t src = linear_index(pd, x0, y0 + y, z0 + z);
            const std::size_t dst = linear_index(tin, 0, y, z);
            std::copy(pf.begin() + src, pf.begin() + src + P, in.channel(0) + dst);
            std::copy(pm.begin() + src, pm.begin() + src + P, in.channel(1) + dst);
          }
        const Tensor out = g.forward(in, bn_mode, false);
        for (int c = 0; c < 3; ++c)
          for (int z = 0; z < O; ++z)
            for (int y = 0; y < O; ++y)
              for (int x = 0; x < O; ++x) {
                const std::size_t i = linear_index(d, x0 + x, y0 + y, z0 + z);
                acc[c * n + i] += out.channel(c)[linear_index(tout, x, y, z)];
                if (c == 0) ++hits[i];
              }
      }

  Propagation r;
  r.dvf = DVF(d, fixed.spacing, fixed.origin);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) r.dvf.disp[c * n + i] = static_cast<float>(acc[c * n + i] / hits[i]);
  r.warped = warp_trilinear(moving, r.dvf);
  r.warped_seg = warp_labels(moving_seg, r.dvf);
  return r;
}

}  // namespace jrs
