#pragma once

// Generator (U-net-like DVF estimator) and PatchGAN critic.
//
// Layers implement forward/backward explicitly and cache what their backward
// pass needs, so a network instance is single-writer: one forward/backward
// sequence at a time.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "jrs/volgrid.hpp"

namespace jrs {

// Channel-planar 3D feature map: data[c * voxels + linear_index(x,y,z)].
struct Tensor {
  int channels = 0;
  Dims3 dims;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, Dims3 d, float fill = 0.0f)
      : channels(c), dims(d), data(static_cast<std::size_t>(c) * d.count(), fill) {}

  std::size_t voxels() const { return dims.count(); }
  float* channel(int c) { return data.data() + c * voxels(); }
  const float* channel(int c) const { return data.data() + c * voxels(); }
  std::span<float> channel_span(int c) { return {channel(c), voxels()}; }
  std::span<const float> channel_span(int c) const { return {channel(c), voxels()}; }
};

// Stack equally sized tensors along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Centered crop by `margin` voxels per side, and its adjoint (zero padding).
Tensor center_crop(const Tensor& t, int margin);
Tensor center_pad(const Tensor& t, int margin);

struct Parameter {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;
};

// Non-trainable persistent state (batch-norm running statistics).
struct Buffer {
  std::string name;
  std::vector<float> value;
};

enum class Mode { kTrain, kInference };

// --- Layers ------------------------------------------------------------------

// 3x3x3 convolution, zero padding 1, stride 1 or 2.
class Conv3d {
 public:
  Conv3d(std::string name, int in_channels, int out_channels, int stride);

  Tensor forward(const Tensor& x);
  // Returns dL/dx (empty tensor when want_input_grad is false); accumulates
  // weight/bias gradients when want_param_grad is true.
  Tensor backward(const Tensor& grad_out, bool want_input_grad, bool want_param_grad);

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  int stride() const { return stride_; }
  static Dims3 output_dims(const Dims3& in, int stride);

 private:
  int cin_, cout_, stride_;
  Parameter weight_, bias_;
  Dims3 in_dims_, out_dims_;
  std::vector<float> padded_;  // padded (stride 1) or phase-split (stride 2) input
  Dims3 padded_dims_;          // logical dims of the padded buffer rows
  std::size_t row_len_ = 0, plane_len_ = 0, volume_len_ = 0;
  std::vector<std::ptrdiff_t> offsets_;
};

// Per-channel normalization over the spatial extent (batch of one patch).
class BatchNorm3d {
 public:
  BatchNorm3d(std::string name, int channels, float momentum = 0.1f, float eps = 1e-5f);

  // In kTrain mode normalizes with the patch statistics and, when
  // update_running is set, folds them into the running averages.
  Tensor forward(const Tensor& x, Mode mode, bool update_running);
  Tensor backward(const Tensor& grad_out, bool want_param_grad);

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  Buffer& running_mean() { return running_mean_; }
  Buffer& running_var() { return running_var_; }

 private:
  int channels_;
  float momentum_, eps_;
  Parameter gamma_, beta_;
  Buffer running_mean_, running_var_;
  Tensor xhat_;
  std::vector<float> inv_std_;
};

class LeakyReLU {
 public:
  explicit LeakyReLU(float slope = 0.2f) : slope_(slope) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

 private:
  float slope_;
  Tensor input_;
};

// Nearest-neighbour x2 resize.
Tensor upsample_nearest2(const Tensor& x);
Tensor upsample_nearest2_backward(const Tensor& grad_out);

// --- Networks ----------------------------------------------------------------

class Network {
 public:
  virtual ~Network() = default;
  virtual std::vector<Parameter*> parameters() = 0;
  virtual std::vector<Buffer*> buffers() { return {}; }
  void zero_grad();
  std::size_t parameter_count();
  float max_abs_parameter();
  bool all_finite();
};

struct GeneratorConfig {
  int depth = 4;
  int base_filters = 16;
  int input_size = 96;
  int margin = 20;
  float leaky_slope = 0.2f;

  int output_size() const { return input_size - 2 * margin; }
};

// Throws std::invalid_argument on inconsistent size arithmetic.
void validate(const GeneratorConfig& cfg);

class Generator : public Network {
 public:
  explicit Generator(const GeneratorConfig& cfg, std::uint64_t seed = 1);

  // Input: 2 channels (fixed, moving) on input_size^3. Output: 3-channel DVF
  // (mm) on output_size^3. The last layer starts at zero, so a fresh
  // generator predicts the identity transform.
  Tensor forward(const Tensor& input, Mode mode, bool update_running = false);
  // Accumulates parameter gradients from dL/dDVF.
  void backward(const Tensor& grad_dvf);

  std::vector<Parameter*> parameters() override;
  std::vector<Buffer*> buffers() override;
  const GeneratorConfig& config() const { return cfg_; }
  Dims3 input_shape() const { return {cfg_.input_size, cfg_.input_size, cfg_.input_size}; }
  Dims3 output_shape() const { return {cfg_.output_size(), cfg_.output_size(), cfg_.output_size()}; }

 private:
  struct Block {  // conv -> batch norm -> LeakyReLU
    Conv3d conv;
    BatchNorm3d bn;
    LeakyReLU act;
  };
  Tensor block_forward(Block& b, const Tensor& x, Mode mode, bool update);
  Tensor block_backward(Block& b, const Tensor& g, bool want_input_grad);

  GeneratorConfig cfg_;
  std::vector<Block> enc_a_, enc_b_;  // per level: (strided or first) conv, refine conv
  std::vector<Block> up_, merge_;     // per decoder level
  std::unique_ptr<Conv3d> head_;
  std::vector<int> skip_channels_;
};

enum class CriticMode { kConcatChannel, kMaskMultiply };

std::string to_string(CriticMode m);
CriticMode critic_mode_from_string(const std::string& s);  // "concat_channel" | "mask_multiply"
int critic_input_channels(CriticMode m);

struct CriticConfig {
  int depth = 4;
  int base_filters = 16;
  CriticMode mode = CriticMode::kConcatChannel;
  float leaky_slope = 0.2f;
};

// PatchGAN critic: `depth` stages of (conv, LeakyReLU, stride-2 conv,
// LeakyReLU) followed by a 1-channel conv. Emits a grid of unbounded scores.
class Critic : public Network {
 public:
  explicit Critic(const CriticConfig& cfg, std::uint64_t seed = 2);

  Tensor forward(const Tensor& input);
  // Returns dL/dinput when want_input_grad; accumulates parameter gradients
  // when want_param_grad.
  Tensor backward(const Tensor& grad_scores, bool want_input_grad, bool want_param_grad);

  std::vector<Parameter*> parameters() override;
  const CriticConfig& config() const { return cfg_; }
  Dims3 output_shape(const Dims3& input) const;

 private:
  CriticConfig cfg_;
  std::vector<Conv3d> convs_;
  std::vector<LeakyReLU> acts_;
};

// Critic input for (I_f, I_other, S_other) where S_other is a soft
// foreground map in [0, 1].
//   concat_channel: (I_f, I_other, S_other)
//   mask_multiply:  (I_f * S_other, I_other * S_other)
Tensor assemble_critic_input(std::span<const float> fixed, std::span<const float> other,
                             std::span<const float> seg, const Dims3& dims, CriticMode mode);

// Adjoint of assemble_critic_input with respect to `other` and `seg`.
void assemble_critic_input_backward(const Tensor& grad, std::span<const float> fixed,
                                    std::span<const float> other, std::span<const float> seg,
                                    CriticMode mode, std::span<float> grad_other,
                                    std::span<float> grad_seg);

// |p| <= c for every parameter.
void clip_parameters(Network& net, float c);

}  // namespace jrs
