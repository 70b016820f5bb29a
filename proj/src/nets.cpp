#include "jrs/nets.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "jrs/simd/kernels.hpp"

namespace jrs {

// --- Tensor helpers ------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (!(a.dims == b.dims)) throw std::invalid_argument("concat_channels: dims mismatch");
  Tensor out(a.channels + b.channels, a.dims);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

Tensor center_crop(const Tensor& t, int m) {
  if (m == 0) return t;
  const Dims3 in = t.dims;
  const Dims3 out_d{in.x - 2 * m, in.y - 2 * m, in.z - 2 * m};
  if (!out_d.valid()) throw std::invalid_argument("center_crop: margin too large");
  Tensor out(t.channels, out_d);
  for (int c = 0; c < t.channels; ++c)
    for (int z = 0; z < out_d.z; ++z)
      for (int y = 0; y < out_d.y; ++y) {
        const float* src = t.channel(c) + linear_index(in, m, y + m, z + m);
        std::copy(src, src + out_d.x, out.channel(c) + linear_index(out_d, 0, y, z));
      }
  return out;
}

Tensor center_pad(const Tensor& t, int m) {
  if (m == 0) return t;
  const Dims3 in = t.dims;
  const Dims3 out_d{in.x + 2 * m, in.y + 2 * m, in.z + 2 * m};
  Tensor out(t.channels, out_d);
  for (int c = 0; c < t.channels; ++c)
    for (int z = 0; z < in.z; ++z)
      for (int y = 0; y < in.y; ++y) {
        const float* src = t.channel(c) + linear_index(in, 0, y, z);
        std::copy(src, src + in.x, out.channel(c) + linear_index(out_d, m, y + m, z + m));
      }
  return out;
}

// --- Conv3d ----------------------------------------------------------------------
//
// Stride 1: the input is zero padded by one voxel; output row (z, y) reads
// padded rows (z + kz, y + ky) at x offset kx, so every tap is a constant
// offset from the row base.
//
// Stride 2: each padded row is additionally split into even and odd phases
// (row layout [even | odd], each of length Xo + 1). Output x reads padded
// 2x + kx, i.e. even[x] (kx=0), odd[x] (kx=1), even[x+1] (kx=2).

Dims3 Conv3d::output_dims(const Dims3& in, int stride) {
  if (stride == 1) return in;
  return {(in.x + 1) / 2, (in.y + 1) / 2, (in.z + 1) / 2};
}

Conv3d::Conv3d(std::string name, int in_channels, int out_channels, int stride)
    : cin_(in_channels), cout_(out_channels), stride_(stride) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("Conv3d stride must be 1 or 2");
  weight_.name = name + ".weight";
  weight_.value.assign(static_cast<std::size_t>(cout_) * cin_ * 27, 0.0f);
  weight_.grad.assign(weight_.value.size(), 0.0f);
  bias_.name = name + ".bias";
  bias_.value.assign(cout_, 0.0f);
  bias_.grad.assign(cout_, 0.0f);
}

Tensor Conv3d::forward(const Tensor& x) {
  if (x.channels != cin_) throw std::invalid_argument(weight_.name + ": expected " + std::to_string(cin_) + " channels");
  in_dims_ = x.dims;
  out_dims_ = output_dims(x.dims, stride_);
  const Dims3 d = in_dims_;
  const int px = d.x + 2, py = d.y + 2, pz = d.z + 2;

  if (stride_ == 1) {
    row_len_ = px;
  } else {
    row_len_ = 2 * static_cast<std::size_t>(out_dims_.x + 1);
  }
  plane_len_ = row_len_ * py;
  volume_len_ = plane_len_ * pz;
  // Slack so the widest tap of the last row stays in bounds.
  padded_.assign(volume_len_ * cin_ + row_len_ + 8, 0.0f);

  for (int c = 0; c < cin_; ++c)
    for (int z = 0; z < d.z; ++z)
      for (int y = 0; y < d.y; ++y) {
        const float* src = x.channel(c) + linear_index(d, 0, y, z);
        float* row = padded_.data() + c * volume_len_ + (z + 1) * plane_len_ + (y + 1) * row_len_;
        if (stride_ == 1) {
          std::copy(src, src + d.x, row + 1);
        } else {
          const std::size_t half = row_len_ / 2;
          for (int xi = 0; xi < d.x; ++xi) {
            const int p = xi + 1;  // padded x
            row[(p & 1) * half + (p >> 1)] = src[xi];
          }
        }
      }

  offsets_.resize(static_cast<std::size_t>(cin_) * 27);
  std::size_t t = 0;
  for (int c = 0; c < cin_; ++c)
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx, ++t) {
          std::ptrdiff_t xo;
          if (stride_ == 1) xo = kx;
          else xo = kx == 0 ? 0 : kx == 1 ? static_cast<std::ptrdiff_t>(row_len_ / 2) : 1;
          offsets_[t] = static_cast<std::ptrdiff_t>(c * volume_len_ + kz * plane_len_ + ky * row_len_) + xo;
        }

  const auto& k = simd::kernels();
  const Dims3 od = out_dims_;
  Tensor out(cout_, od);
  const std::size_t ntaps = offsets_.size();
  for (int oc = 0; oc < cout_; ++oc) {
    const float* w = weight_.value.data() + oc * ntaps;
    for (int z = 0; z < od.z; ++z)
      for (int y = 0; y < od.y; ++y) {
        const float* base = padded_.data() + stride_ * z * plane_len_ + stride_ * y * row_len_;
        k.tap_dot_row(out.channel(oc) + linear_index(od, 0, y, z), od.x, base, offsets_.data(), w, ntaps,
                      bias_.value[oc]);
      }
  }
  return out;
}

Tensor Conv3d::backward(const Tensor& g, bool want_input_grad, bool want_param_grad) {
  const auto& k = simd::kernels();
  const Dims3 od = out_dims_;
  const std::size_t ntaps = offsets_.size();
  if (g.channels != cout_ || !(g.dims == od)) throw std::invalid_argument(weight_.name + ": gradient shape mismatch");

  if (want_param_grad) {
    std::vector<double> acc(ntaps);
    for (int oc = 0; oc < cout_; ++oc) {
      std::fill(acc.begin(), acc.end(), 0.0);
      double bsum = 0.0;
      for (int z = 0; z < od.z; ++z)
        for (int y = 0; y < od.y; ++y) {
          const float* grow = g.channel(oc) + linear_index(od, 0, y, z);
          const float* base = padded_.data() + stride_ * z * plane_len_ + stride_ * y * row_len_;
          k.tap_grad_row(acc.data(), grow, od.x, base, offsets_.data(), ntaps);
          for (int x = 0; x < od.x; ++x) bsum += grow[x];
        }
      float* wg = weight_.grad.data() + oc * ntaps;
      for (std::size_t t = 0; t < ntaps; ++t) wg[t] += static_cast<float>(acc[t]);
      bias_.grad[oc] += static_cast<float>(bsum);
    }
  }
  if (!want_input_grad) return {};

  const Dims3 d = in_dims_;
  Tensor gin(cin_, d);
  if (stride_ == 1) {
    // Correlate the zero-padded output gradient with flipped, transposed weights.
    const std::size_t prow = d.x + 2, pplane = prow * (d.y + 2), pvol = pplane * (d.z + 2);
    std::vector<float> gpad(pvol * cout_ + prow + 8, 0.0f);
    for (int oc = 0; oc < cout_; ++oc)
      for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y) {
          const float* src = g.channel(oc) + linear_index(d, 0, y, z);
          std::copy(src, src + d.x, gpad.data() + oc * pvol + (z + 1) * pplane + (y + 1) * prow + 1);
        }
    std::vector<std::ptrdiff_t> off(static_cast<std::size_t>(cout_) * 27);
    std::vector<float> wflip(off.size());
    for (int ic = 0; ic < cin_; ++ic) {
      std::size_t t = 0;
      for (int oc = 0; oc < cout_; ++oc)
        for (int kz = 0; kz < 3; ++kz)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx, ++t) {
              off[t] = static_cast<std::ptrdiff_t>(oc * pvol + kz * pplane + ky * prow + kx);
              wflip[t] = weight_.value[(static_cast<std::size_t>(oc) * cin_ + ic) * 27 +
                                       (2 - kz) * 9 + (2 - ky) * 3 + (2 - kx)];
            }
      for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
          k.tap_dot_row(gin.channel(ic) + linear_index(d, 0, y, z), d.x, gpad.data() + z * pplane + y * prow,
                        off.data(), wflip.data(), off.size(), 0.0f);
    }
  } else {
    // Scatter into the phase-split padded layout, then gather back.
    std::vector<float> gq(padded_.size(), 0.0f);
    for (int oc = 0; oc < cout_; ++oc) {
      const float* w = weight_.value.data() + oc * ntaps;
      for (int z = 0; z < od.z; ++z)
        for (int y = 0; y < od.y; ++y) {
          const float* grow = g.channel(oc) + linear_index(od, 0, y, z);
          float* base = gq.data() + 2 * z * plane_len_ + 2 * y * row_len_;
          for (std::size_t t = 0; t < ntaps; ++t) k.axpy(base + offsets_[t], grow, w[t], od.x);
        }
    }
    const std::size_t half = row_len_ / 2;
    for (int c = 0; c < cin_; ++c)
      for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y) {
          const float* row = gq.data() + c * volume_len_ + (z + 1) * plane_len_ + (y + 1) * row_len_;
          float* dst = gin.channel(c) + linear_index(d, 0, y, z);
          for (int xi = 0; xi < d.x; ++xi) {
            const int p = xi + 1;
            dst[xi] = row[(p & 1) * half + (p >> 1)];
          }
        }
  }
  return gin;
}

// --- BatchNorm3d ---------------------------------------------------------------

BatchNorm3d::BatchNorm3d(std::string name, int channels, float momentum, float eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  gamma_ = {name + ".gamma", std::vector<float>(channels, 1.0f), std::vector<float>(channels, 0.0f)};
  beta_ = {name + ".beta", std::vector<float>(channels, 0.0f), std::vector<float>(channels, 0.0f)};
  running_mean_ = {name + ".running_mean", std::vector<float>(channels, 0.0f)};
  running_var_ = {name + ".running_var", std::vector<float>(channels, 1.0f)};
}

Tensor BatchNorm3d::forward(const Tensor& x, Mode mode, bool update_running) {
  if (x.channels != channels_) throw std::invalid_argument(gamma_.name + ": channel mismatch");
  const auto& k = simd::kernels();
  const std::size_t n = x.voxels();
  Tensor out(channels_, x.dims);
  xhat_ = Tensor(channels_, x.dims);
  inv_std_.assign(channels_, 0.0f);
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s, q;
      k.sum_sumsq(x.channel(c), n, &s, &q);
      mean = s / n;
      var = std::max(0.0, q / n - mean * mean);
      if (update_running) {
        const double unbiased = n > 1 ? var * n / (n - 1) : var;
        running_mean_.value[c] = static_cast<float>((1 - momentum_) * running_mean_.value[c] + momentum_ * mean);
        running_var_.value[c] = static_cast<float>((1 - momentum_) * running_var_.value[c] + momentum_ * unbiased);
      }
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
    inv_std_[c] = inv;
    k.scale_shift(xhat_.channel(c), x.channel(c), inv, static_cast<float>(-mean * inv), n);
    k.scale_shift(out.channel(c), xhat_.channel(c), gamma_.value[c], beta_.value[c], n);
  }
  return out;
}

Tensor BatchNorm3d::backward(const Tensor& g, bool want_param_grad) {
  const auto& k = simd::kernels();
  const std::size_t n = g.voxels();
  Tensor gin(channels_, g.dims);
  for (int c = 0; c < channels_; ++c) {
    const float* gc = g.channel(c);
    const float* xh = xhat_.channel(c);
    double sg, dummy;
    k.sum_sumsq(gc, n, &sg, &dummy);
    const double sgx = k.dot(gc, xh, n);
    if (want_param_grad) {
      gamma_.grad[c] += static_cast<float>(sgx);
      beta_.grad[c] += static_cast<float>(sg);
    }
    // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
    const double a = gamma_.value[c] * inv_std_[c];
    const double mg = sg / n, mgx = sgx / n;
    float* out = gin.channel(c);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(a * (gc[i] - mg - xh[i] * mgx));
  }
  return gin;
}

// --- LeakyReLU / upsampling --------------------------------------------------------

Tensor LeakyReLU::forward(const Tensor& x) {
  input_ = x;
  Tensor out(x.channels, x.dims);
  simd::kernels().leaky_relu(out.data.data(), x.data.data(), slope_, x.data.size());
  return out;
}

Tensor LeakyReLU::backward(const Tensor& g) {
  Tensor out = g;
  simd::kernels().leaky_relu_grad(out.data.data(), input_.data.data(), slope_, out.data.size());
  return out;
}

Tensor upsample_nearest2(const Tensor& x) {
  const Dims3 d = x.dims;
  const Dims3 o{2 * d.x, 2 * d.y, 2 * d.z};
  Tensor out(x.channels, o);
  for (int c = 0; c < x.channels; ++c)
    for (int z = 0; z < o.z; ++z)
      for (int y = 0; y < o.y; ++y) {
        const float* src = x.channel(c) + linear_index(d, 0, y / 2, z / 2);
        float* dst = out.channel(c) + linear_index(o, 0, y, z);
        for (int xo = 0; xo < o.x; ++xo) dst[xo] = src[xo / 2];
      }
  return out;
}

Tensor upsample_nearest2_backward(const Tensor& g) {
  const Dims3 o = g.dims;
  const Dims3 d{o.x / 2, o.y / 2, o.z / 2};
  Tensor out(g.channels, d);
  for (int c = 0; c < g.channels; ++c)
    for (int z = 0; z < o.z; ++z)
      for (int y = 0; y < o.y; ++y) {
        const float* src = g.channel(c) + linear_index(o, 0, y, z);
        float* dst = out.channel(c) + linear_index(d, 0, y / 2, z / 2);
        for (int xo = 0; xo < o.x; ++xo) dst[xo / 2] += src[xo];
      }
  return out;
}

// --- Network base ----------------------------------------------------------------

void Network::zero_grad() {
  for (auto* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

float Network::max_abs_parameter() {
  float m = 0.0f;
  for (auto* p : parameters())
    for (float v : p->value) m = std::max(m, std::abs(v));
  return m;
}

bool Network::all_finite() {
  for (auto* p : parameters())
    for (float v : p->value)
      if (!std::isfinite(v)) return false;
  return true;
}

namespace {

void init_conv(Conv3d& conv, std::mt19937_64& rng, float slope) {
  // He initialization for LeakyReLU.
  const double fan_in = 27.0 * conv.in_channels();
  const double std = std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in));
  std::normal_distribution<double> dist(0.0, std);
  for (auto& w : conv.weight().value) w = static_cast<float>(dist(rng));
}

}  // namespace

// --- Generator -------------------------------------------------------------------

void validate(const GeneratorConfig& cfg) {
  if (cfg.depth < 1 || cfg.base_filters < 1) throw std::invalid_argument("generator depth and filters must be positive");
  if (cfg.input_size <= 0 || cfg.input_size % (1 << cfg.depth) != 0)
    throw std::invalid_argument("generator input size " + std::to_string(cfg.input_size) + " is not divisible by 2^" +
                                std::to_string(cfg.depth));
  if (cfg.margin < 0 || cfg.output_size() <= 0)
    throw std::invalid_argument("generator margin " + std::to_string(cfg.margin) + " leaves no output for input " +
                                std::to_string(cfg.input_size));
}

Generator::Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  std::mt19937_64 rng(seed);
  auto filters = [&](int level) { return cfg_.base_filters << level; };
  auto make_block = [&](const std::string& name, int cin, int cout, int stride) {
    Block b{Conv3d(name + ".conv", cin, cout, stride), BatchNorm3d(name + ".bn", cout), LeakyReLU(cfg_.leaky_slope)};
    init_conv(b.conv, rng, cfg_.leaky_slope);
    return b;
  };
  for (int l = 0; l <= cfg_.depth; ++l) {
    const std::string p = "gen.enc" + std::to_string(l);
    const int cin = l == 0 ? 2 : filters(l - 1);
    enc_a_.push_back(make_block(p + ".a", cin, filters(l), l == 0 ? 1 : 2));
    enc_b_.push_back(make_block(p + ".b", filters(l), filters(l), 1));
  }
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string p = "gen.dec" + std::to_string(l);
    up_.push_back(make_block(p + ".up", filters(l + 1), filters(l), 1));
    merge_.push_back(make_block(p + ".merge", 2 * filters(l), filters(l), 1));
  }
  head_ = std::make_unique<Conv3d>("gen.head", filters(0), 3, 1);  // zero-initialized
}

Tensor Generator::block_forward(Block& b, const Tensor& x, Mode mode, bool update) {
  return b.act.forward(b.bn.forward(b.conv.forward(x), mode, update));
}

Tensor Generator::block_backward(Block& b, const Tensor& g, bool want_input_grad) {
  return b.conv.backward(b.bn.backward(b.act.backward(g), true), want_input_grad, true);
}

Tensor Generator::forward(const Tensor& input, Mode mode, bool update_running) {
  if (input.channels != 2 || !(input.dims == input_shape()))
    throw std::invalid_argument("generator expects a 2-channel " + std::to_string(cfg_.input_size) + "^3 input");
  std::vector<Tensor> skips;
  Tensor h = input;
  for (int l = 0; l <= cfg_.depth; ++l) {
    h = block_forward(enc_a_[l], h, mode, update_running);
    h = block_forward(enc_b_[l], h, mode, update_running);
    if (l < cfg_.depth) skips.push_back(h);
  }
  skip_channels_.clear();
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    h = block_forward(up_[l], upsample_nearest2(h), mode, update_running);
    skip_channels_.push_back(h.channels);
    h = block_forward(merge_[l], concat_channels(h, skips[l]), mode, update_running);
  }
  return center_crop(head_->forward(h), cfg_.margin);
}

void Generator::backward(const Tensor& grad_dvf) {
  Tensor g = head_->backward(center_pad(grad_dvf, cfg_.margin), true, true);
  std::vector<Tensor> skip_grads(cfg_.depth);
  for (int l = 0; l < cfg_.depth; ++l) {
    Tensor gm = block_backward(merge_[l], g, true);
    // split the concat gradient: first half -> upsampling branch, second -> skip
    const int cu = gm.channels / 2;
    Tensor gu(cu, gm.dims), gs(gm.channels - cu, gm.dims);
    std::copy(gm.data.begin(), gm.data.begin() + static_cast<std::ptrdiff_t>(gu.data.size()), gu.data.begin());
    std::copy(gm.data.begin() + static_cast<std::ptrdiff_t>(gu.data.size()), gm.data.end(), gs.data.begin());
    skip_grads[l] = std::move(gs);
    g = upsample_nearest2_backward(block_backward(up_[l], gu, true));
  }
  for (int l = cfg_.depth; l >= 0; --l) {
    if (l < cfg_.depth) {
      const auto& sg = skip_grads[l];
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += sg.data[i];
    }
    g = block_backward(enc_b_[l], g, true);
    g = block_backward(enc_a_[l], g, l > 0);
  }
}

std::vector<Parameter*> Generator::parameters() {
  std::vector<Parameter*> out;
  auto add = [&](Block& b) {
    out.push_back(&b.conv.weight());
    out.push_back(&b.conv.bias());
    out.push_back(&b.bn.gamma());
    out.push_back(&b.bn.beta());
  };
  for (int l = 0; l <= cfg_.depth; ++l) {
    add(enc_a_[l]);
    add(enc_b_[l]);
  }
  for (int l = 0; l < cfg_.depth; ++l) {
    add(up_[l]);
    add(merge_[l]);
  }
  out.push_back(&head_->weight());
  out.push_back(&head_->bias());
  return out;
}

std::vector<Buffer*> Generator::buffers() {
  std::vector<Buffer*> out;
  auto add = [&](Block& b) {
    out.push_back(&b.bn.running_mean());
    out.push_back(&b.bn.running_var());
  };
  for (int l = 0; l <= cfg_.depth; ++l) {
    add(enc_a_[l]);
    add(enc_b_[l]);
  }
  for (int l = 0; l < cfg_.depth; ++l) {
    add(up_[l]);
    add(merge_[l]);
  }
  return out;
}

// --- Critic ------------------------------------------------------------------------

std::string to_string(CriticMode m) { return m == CriticMode::kConcatChannel ? "concat_channel" : "mask_multiply"; }

CriticMode critic_mode_from_string(const std::string& s) {
  if (s == "concat_channel" || s == "a") return CriticMode::kConcatChannel;
  if (s == "mask_multiply" || s == "b") return CriticMode::kMaskMultiply;
  throw std::invalid_argument("unknown critic mode '" + s + "' (expected concat_channel or mask_multiply)");
}

int critic_input_channels(CriticMode m) { return m == CriticMode::kConcatChannel ? 3 : 2; }

Critic::Critic(const CriticConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.depth < 1 || cfg_.base_filters < 1) throw std::invalid_argument("critic depth and filters must be positive");
  std::mt19937_64 rng(seed);
  int cin = critic_input_channels(cfg_.mode);
  for (int l = 0; l < cfg_.depth; ++l) {
    const int f = cfg_.base_filters << l;
    const std::string p = "critic.stage" + std::to_string(l);
    convs_.emplace_back(p + ".conv", cin, f, 1);
    convs_.emplace_back(p + ".down", f, f, 2);
    cin = f;
  }
  convs_.emplace_back("critic.score", cin, 1, 1);
  for (auto& c : convs_) init_conv(c, rng, cfg_.leaky_slope);
  acts_.assign(convs_.size() - 1, LeakyReLU(cfg_.leaky_slope));
}

Dims3 Critic::output_shape(const Dims3& input) const {
  Dims3 d = input;
  for (int l = 0; l < cfg_.depth; ++l) d = Conv3d::output_dims(d, 2);
  return d;
}

Tensor Critic::forward(const Tensor& input) {
  Tensor h = input;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = convs_[i].forward(h);
    if (i < acts_.size()) h = acts_[i].forward(h);
  }
  return h;
}

Tensor Critic::backward(const Tensor& grad_scores, bool want_input_grad, bool want_param_grad) {
  Tensor g = grad_scores;
  for (std::size_t i = convs_.size(); i-- > 0;) {
    if (i < acts_.size()) g = acts_[i].backward(g);
    g = convs_[i].backward(g, want_input_grad || i > 0, want_param_grad);
  }
  return g;
}

std::vector<Parameter*> Critic::parameters() {
  std::vector<Parameter*> out;
  for (auto& c : convs_) {
    out.push_back(&c.weight());
    out.push_back(&c.bias());
  }
  return out;
}

// --- Critic input ---------------------------------------------------------------

Tensor assemble_critic_input(std::span<const float> fixed, std::span<const float> other, std::span<const float> seg,
                             const Dims3& dims, CriticMode mode) {
  const std::size_t n = dims.count();
  if (fixed.size() != n || other.size() != n || seg.size() != n)
    throw std::invalid_argument("assemble_critic_input: shape mismatch");
  Tensor t(critic_input_channels(mode), dims);
  if (mode == CriticMode::kConcatChannel) {
    std::copy(fixed.begin(), fixed.end(), t.channel(0));
    std::copy(other.begin(), other.end(), t.channel(1));
    std::copy(seg.begin(), seg.end(), t.channel(2));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      t.channel(0)[i] = fixed[i] * seg[i];
      t.channel(1)[i] = other[i] * seg[i];
    }
  }
  return t;
}

void assemble_critic_input_backward(const Tensor& grad, std::span<const float> fixed, std::span<const float> other,
                                    std::span<const float> seg, CriticMode mode, std::span<float> grad_other,
                                    std::span<float> grad_seg) {
  const std::size_t n = grad.voxels();
  if (mode == CriticMode::kConcatChannel) {
    for (std::size_t i = 0; i < n; ++i) {
      grad_other[i] += grad.channel(1)[i];
      grad_seg[i] += grad.channel(2)[i];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      grad_other[i] += grad.channel(1)[i] * seg[i];
      grad_seg[i] += grad.channel(0)[i] * fixed[i] + grad.channel(1)[i] * other[i];
    }
  }
}

void clip_parameters(Network& net, float c) {
  if (!(c > 0.0f)) throw std::invalid_argument("clip range must be positive");
  const auto& k = simd::kernels();
  for (auto* p : net.parameters()) k.clip(p->value.data(), c, p->value.size());
}

}  // namespace jrs
