#pragma once

// Adversarial training loop: patch sampling, the WGAN critic schedule,
// bidirectional generator updates, RMSProp state, checkpoints and
// whole-volume inference by tiling.

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "jrs/losses.hpp"
#include "jrs/nets.hpp"
#include "jrs/synth.hpp"

namespace jrs {

struct TrainConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.01;
  double lr = 1e-5;
  double clip = 0.01;
  int warmup_gen_iters = 25;
  int warmup_critic_ratio = 100;
  int steady_critic_ratio = 5;
  int patch_size = 96;
  int patches_per_pair = 1000;
  CriticMode critic_mode = CriticMode::kConcatChannel;
  int total_gen_iters = 1000;
  std::uint64_t seed = 1;

  // architecture
  int gen_depth = 4;
  int gen_base_filters = 16;
  int margin = 20;
  int critic_depth = 4;
  int critic_base_filters = 16;

  bool use_dice = true;  // false: registration-only objective

  // disturbance for the critic's real pairs
  double noise_std = 0.04;
  double smooth_std = 0.04;
  double gamma_min = -0.4, gamma_max = 0.4;
  double max_def_mm = 0.5;

  GeneratorConfig generator() const;
  CriticConfig critic() const;
  DisturbConfig disturbance(std::uint64_t seed) const;

  // Flat "key = value" text, '#' comments. Unknown keys throw Error.
  void set(const std::string& key, const std::string& value);
  // Sets only the keys present in the text / file.
  void apply(const std::string& text);
  void apply_file(const std::filesystem::path& path);
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  std::map<std::string, std::string> to_map() const;
  void validate() const;  // throws Error
};

// Preprocessed training case (same grid for all four arrays).
struct Case {
  std::string id;
  Volume fixed, moving;
  Segmentation fixed_seg, moving_seg;
  Mask mask;  // sampling region
};

// Loads case_* directories (fixed/moving/fixed_seg/moving_seg .mhd), resamples
// to 1 mm, rescales intensities to [-1, 1] and computes the torso mask.
std::vector<Case> load_cases(const std::filesystem::path& dir);
Case preprocess_case(std::string id, Volume fixed, Segmentation fixed_seg, Volume moving, Segmentation moving_seg);

struct PatchPair {
  Volume fixed_patch, moving_patch;
  Segmentation fixed_seg_patch, moving_seg_patch;
  std::array<int, 3> origin{0, 0, 0};
};

PatchPair extract_patch(const Case& c, const std::array<int, 3>& origin, int size);

// n origins whose patch centers lie in the mask and whose crops lie inside the
// volume. Falls back to uniform in-bounds origins when no mask voxel can host
// a centered patch.
std::vector<std::array<int, 3>> sample_patch_origins(const Mask& mask, int n, int size, std::uint64_t seed);
std::vector<PatchPair> sample_patches(const Case& c, int n, int size, const Mask& mask, std::uint64_t seed);

int critic_ratio(int gen_iter, const TrainConfig& cfg);

class RMSProp {
 public:
  explicit RMSProp(double lr, double rho = 0.9, double eps = 1e-10) : lr_(lr), rho_(rho), eps_(eps) {}
  void step(const std::vector<Parameter*>& params);
  std::map<std::string, std::vector<float>>& state() { return ms_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, rho_, eps_;
  std::map<std::string, std::vector<float>> ms_;
};

struct TrainerState {
  int gen_iter = 0;               // completed generator iterations
  std::uint64_t critic_steps = 0;  // completed critic steps
  std::uint64_t patch_counter = 0;
};

// Per-iteration log record.
struct IterationLog {
  int iter = 0;
  int critic_steps = 0;
  double critic_loss = 0.0;  // mean over this iteration's critic steps
  double max_abs_critic = 0.0;
  LossBreakdown gen;
  double seconds = 0.0;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<Case> cases);

  Generator& generator() { return *gen_; }
  Critic& critic() { return *critic_; }
  const TrainConfig& config() const { return cfg_; }
  TrainerState& state() { return state_; }

  // One critic update on a patch; returns the critic loss.
  double critic_step(const PatchPair& p);
  // One generator update (both directions summed); returns the summed breakdown.
  LossBreakdown generator_step(const PatchPair& p);

  // Next patch of the seed-determined sequence.
  PatchPair next_patch();

  // Runs until cfg.total_gen_iters. `on_iter` sees each record; `after_critic`
  // is called after every critic step (used by schedule checks).
  void run(const std::function<void(const IterationLog&)>& on_iter = {},
           const std::function<void()>& after_critic = {});

  void save_checkpoint(const std::filesystem::path& path);
  void load_checkpoint(const std::filesystem::path& path);  // weights, optimizer state and counters

  // Where diagnostic.ckpt goes when a loss turns non-finite.
  void set_diagnostic_dir(const std::filesystem::path& d) { diagnostic_dir_ = d; }

 private:
  void check_finite(double v, const char* what);

  TrainConfig cfg_;
  std::vector<Case> cases_;
  std::vector<std::vector<std::array<int, 3>>> origins_;
  std::unique_ptr<Generator> gen_;
  std::unique_ptr<Critic> critic_;
  RMSProp gen_opt_, critic_opt_;
  TrainerState state_;
  std::filesystem::path diagnostic_dir_ = ".";
};

inline constexpr const char* kCheckpointTag = "JRSGAN-CKPT v1";

// Reads only the config text stored in a checkpoint.
TrainConfig checkpoint_config(const std::filesystem::path& path);
// Builds a generator from a checkpoint (parameters and running statistics).
std::unique_ptr<Generator> load_generator(const std::filesystem::path& path, TrainConfig* cfg_out = nullptr);

struct Propagation {
  DVF dvf;
  Volume warped;
  Segmentation warped_seg;
};

// Tiles the fixed/moving pair with overlapping generator windows (edge
// replicated padding by the margin), averages the DVF in overlaps and warps
// the moving image and labels. Each axis must be >= the output window.
Propagation propagate(Generator& g, const Volume& fixed, const Volume& moving, const Segmentation& moving_seg,
                      Mode bn_mode = Mode::kInference);

// Tile start positions covering [0, n) with windows of `out` voxels.
std::vector<int> tile_starts(int n, int out);

}  // namespace jrs
