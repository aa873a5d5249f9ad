#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pnet/errors.hpp"
#include "pnet/layers.hpp"
#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

inline constexpr std::size_t kConvBlocks = 4;
inline constexpr std::size_t kPooledBlocks = 2;  // blocks 1 and 2 carry a max-pool
inline constexpr std::size_t kDenseLayers = 2;

struct ModelConfig {
  std::array<std::size_t, kConvBlocks> conv_channels{32, 64, 128, 128};
  std::size_t dense_width = 256;
  std::size_t num_subjects = 13;
  std::size_t num_postures = 17;
  double leaky_slope = 0.2;
  std::array<double, kConvBlocks> conv_dropout{0.1, 0.2, 0.3, 0.4};
  double dense_dropout = 0.5;
  double l2_sigma = 0.002;
  std::size_t input_height = 32;
  std::size_t input_width = 64;
  std::size_t pool_stride = 2;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.99;

  struct Geometry {
    std::array<std::size_t, kConvBlocks> conv_h{}, conv_w{};  // after conv
    std::array<std::size_t, kConvBlocks> out_h{}, out_w{};    // after optional pool
    std::size_t flat = 0;
  };

  /// Throws ConfigError when an invariant is violated or the spatial
  /// arithmetic leaves a conv or pool without a full window.
  Geometry geometry() const {
    validate_scalars();
    Geometry g;
    std::size_t h = input_height, w = input_width;
    for (std::size_t i = 0; i < kConvBlocks; ++i) {
      if (h < 3 || w < 3)
        throw ConfigError("conv block " + std::to_string(i + 1) + " input " + std::to_string(h) +
                          "x" + std::to_string(w) + " is smaller than the 3x3 kernel");
      h -= 2;
      w -= 2;
      g.conv_h[i] = h;
      g.conv_w[i] = w;
      if (i < kPooledBlocks) {
        if (h < 3 || w < 3)
          throw ConfigError("pool in block " + std::to_string(i + 1) + " has no full window");
        h = pooled_extent(h, 3, pool_stride);
        w = pooled_extent(w, 3, pool_stride);
      }
      g.out_h[i] = h;
      g.out_w[i] = w;
    }
    g.flat = conv_channels.back() * h * w;
    return g;
  }

  void validate() const { (void)geometry(); }

  bool operator==(const ModelConfig&) const = default;

 private:
  void validate_scalars() const {
    if (num_subjects < 2 || num_postures < 2)
      throw ConfigError("model needs at least 2 subjects and 2 postures");
    for (auto c : conv_channels)
      if (c == 0) throw ConfigError("conv channel count must be positive");
    if (dense_width == 0) throw ConfigError("dense width must be positive");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
      throw ConfigError("leaky slope must lie in (0,1)");
    for (auto p : conv_dropout)
      if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rates must lie in [0,1)");
    if (!(dense_dropout >= 0.0 && dense_dropout < 1.0))
      throw ConfigError("dropout rates must lie in [0,1)");
    if (!(l2_sigma >= 0.0)) throw ConfigError("l2 sigma must be nonnegative");
    if (pool_stride == 0) throw ConfigError("pool stride must be positive");
    if (!(bn_epsilon > 0.0) || !(bn_momentum >= 0.0 && bn_momentum < 1.0))
      throw ConfigError("invalid batch-norm constants");
  }
};

/// All trainable weights plus batch-norm running statistics. Also used as the
/// gradient container, in which case the running-stat tensors stay empty.
template <typename T>
struct ModelParams {
  std::array<Tensor<T>, kConvBlocks> conv_w;  // [Cout,Cin,3,3]
  std::array<Tensor<T>, kConvBlocks> bn_gamma, bn_beta;
  std::array<Tensor<T>, kConvBlocks> bn_mean, bn_var;
  std::array<Tensor<T>, kDenseLayers> dense_w;  // [F,U]
  std::array<Tensor<T>, kDenseLayers> dense_b;
  Tensor<T> subject_w, subject_b;
  Tensor<T> posture_w, posture_b;

  /// Trainable tensors in canonical order.
  template <typename Self>
  static auto trainable_of(Self& self) {
    using Ptr = std::conditional_t<std::is_const_v<Self>, const Tensor<T>*, Tensor<T>*>;
    std::vector<Ptr> out;
    for (std::size_t i = 0; i < kConvBlocks; ++i) {
      out.push_back(&self.conv_w[i]);
      out.push_back(&self.bn_gamma[i]);
      out.push_back(&self.bn_beta[i]);
    }
    for (std::size_t i = 0; i < kDenseLayers; ++i) {
      out.push_back(&self.dense_w[i]);
      out.push_back(&self.dense_b[i]);
    }
    out.push_back(&self.subject_w);
    out.push_back(&self.subject_b);
    out.push_back(&self.posture_w);
    out.push_back(&self.posture_b);
    return out;
  }
  std::vector<Tensor<T>*> trainable() { return trainable_of(*this); }
  std::vector<const Tensor<T>*> trainable() const { return trainable_of(*this); }

  static std::vector<std::string> trainable_names() {
    std::vector<std::string> n;
    for (std::size_t i = 1; i <= kConvBlocks; ++i) {
      n.push_back("conv" + std::to_string(i) + ".weight");
      n.push_back("bn" + std::to_string(i) + ".gamma");
      n.push_back("bn" + std::to_string(i) + ".beta");
    }
    for (std::size_t i = 1; i <= kDenseLayers; ++i) {
      n.push_back("dense" + std::to_string(i) + ".weight");
      n.push_back("dense" + std::to_string(i) + ".bias");
    }
    for (const char* s : {"subject.weight", "subject.bias", "posture.weight", "posture.bias"})
      n.emplace_back(s);
    return n;
  }

  /// Trainable tensors followed by running statistics.
  std::vector<Tensor<T>*> all_tensors() {
    auto out = trainable();
    for (std::size_t i = 0; i < kConvBlocks; ++i) {
      out.push_back(&bn_mean[i]);
      out.push_back(&bn_var[i]);
    }
    return out;
  }
  std::vector<const Tensor<T>*> all_tensors() const {
    auto out = trainable();
    for (std::size_t i = 0; i < kConvBlocks; ++i) {
      out.push_back(&bn_mean[i]);
      out.push_back(&bn_var[i]);
    }
    return out;
  }

  std::vector<Shape> trainable_shapes() const {
    std::vector<Shape> s;
    for (const auto* t : trainable()) s.push_back(t->shape());
    return s;
  }

  /// Zero tensor for every trainable slot; running stats left empty.
  ModelParams zeros_like() const {
    ModelParams g;
    auto dst = g.trainable();
    auto src = trainable();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = Tensor<T>(src[i]->shape());
    return g;
  }

  bool all_finite() const {
    for (const auto* t : all_tensors())
      if (!t->empty() && !t->all_finite()) return false;
    return true;
  }

  bool operator==(const ModelParams&) const = default;
};

/// He-style init with the leaky-ReLU gain; biases and BN shifts zero, BN scales one.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, SeededRng& rng) {
  const auto geo = cfg.geometry();
  const double gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
  ModelParams<T> p;
  std::size_t cin = 1;
  for (std::size_t i = 0; i < kConvBlocks; ++i) {
    const std::size_t cout = cfg.conv_channels[i];
    p.conv_w[i] =
        Tensor<T>::gaussian({cout, cin, 3, 3}, 0.0, gain / std::sqrt(9.0 * cin), rng);
    p.bn_gamma[i] = Tensor<T>::constant({cout}, T{1});
    p.bn_beta[i] = Tensor<T>({cout});
    p.bn_mean[i] = Tensor<T>({cout});
    p.bn_var[i] = Tensor<T>::constant({cout}, T{1});
    cin = cout;
  }
  std::size_t fan_in = geo.flat;
  for (std::size_t i = 0; i < kDenseLayers; ++i) {
    p.dense_w[i] = Tensor<T>::gaussian({fan_in, cfg.dense_width}, 0.0,
                                       gain / std::sqrt(static_cast<double>(fan_in)), rng);
    p.dense_b[i] = Tensor<T>({cfg.dense_width});
    fan_in = cfg.dense_width;
  }
  const double head_std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  p.subject_w = Tensor<T>::gaussian({fan_in, cfg.num_subjects}, 0.0, head_std, rng);
  p.subject_b = Tensor<T>({cfg.num_subjects});
  p.posture_w = Tensor<T>::gaussian({fan_in, cfg.num_postures}, 0.0, head_std, rng);
  p.posture_b = Tensor<T>({cfg.num_postures});
  return p;
}

// --- batched conv / pool helpers ----------------------------------------------------

namespace detail {

// Convolution over a whole batch as one GEMM: the patch matrix is
// [Cin*9, B*P] with sample n occupying columns [n*P, (n+1)*P).

template <typename T>
std::vector<T> batch_im2col(const Tensor<T>& x) {
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t patch = (h - 2) * (wd - 2), ld = b * patch;
  std::vector<T> col(cin * 9 * ld);
  for (std::size_t n = 0; n < b; ++n)
    im2col3(x.ptr() + n * cin * h * wd, cin, h, wd, col.data() + n * patch, ld);
  return col;
}

template <typename T>
Tensor<T> conv_batch(const Tensor<T>& x, const Tensor<T>& w) {
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (w.dim(1) != cin) throw ShapeError("conv: channel mismatch");
  if (h < 3 || wd < 3) throw ShapeError("conv: input smaller than 3x3 kernel");
  const std::size_t cout = w.dim(0), oh = h - 2, ow = wd - 2, patch = oh * ow;
  const auto col = batch_im2col(x);
  std::vector<T> out(cout * b * patch);
  gemm_nn(cout, b * patch, cin * 9, w.ptr(), col.data(), out.data(), false);
  Tensor<T> y({b, cout, oh, ow});
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t n = 0; n < b; ++n)
      std::copy_n(out.data() + (o * b + n) * patch, patch, y.ptr() + (n * cout + o) * patch);
  return y;
}

template <typename T>
void conv_batch_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                         Tensor<T>& dw, Tensor<T>* dx) {
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), patch = (h - 2) * (wd - 2), ld = b * patch;
  const std::size_t kdim = cin * 9;
  std::vector<T> g(cout * ld);  // dy as [Cout, B*P]
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t o = 0; o < cout; ++o)
      std::copy_n(dy.ptr() + (n * cout + o) * patch, patch, g.data() + o * ld + n * patch);
  const auto col = batch_im2col(x);
  dw = Tensor<T>(w.shape());
  gemm_nt(cout, kdim, ld, g.data(), col.data(), dw.ptr(), false);
  if (dx) {
    *dx = Tensor<T>(x.shape());
    std::vector<T> dcol(kdim * ld);
    gemm_tn(kdim, ld, cout, w.ptr(), g.data(), dcol.data(), false);
    for (std::size_t n = 0; n < b; ++n)
      col2im3(dcol.data() + n * patch, cin, h, wd, dx->ptr() + n * cin * h * wd, ld);
  }
}

}  // namespace detail

// --- forward ------------------------------------------------------------------------

template <typename T>
struct ConvBlockCache {
  Tensor<T> input;     // block input [B,Cin,H,W]
  BatchNormCache<T> bn;
  Shape bn_out_shape;  // pool input shape
  std::vector<std::size_t> pool_argmax;
  Tensor<T> pre_act;   // leaky-ReLU input
  Tensor<T> mask;      // dropout mask
};

template <typename T>
struct DenseCache {
  Tensor<T> input;
  Tensor<T> pre_act;
  Tensor<T> mask;
};

/// Activations retained by a train-mode forward pass for the backward pass.
template <typename T>
struct ForwardCache {
  std::size_t batch = 0;
  std::array<ConvBlockCache<T>, kConvBlocks> blocks;
  std::array<DenseCache<T>, kDenseLayers> dense;
  Tensor<T> features;  // input to both heads
  Tensor<T> subject_probs, posture_probs;
};

template <typename T>
struct ForwardResult {
  Tensor<T> subject_probs;  // [B,M]
  Tensor<T> posture_probs;  // [B,N]
  std::optional<ForwardCache<T>> cache;  // present iff train mode
};

/// Runs the dual-head network on x [B,1,H,W]. Train mode draws dropout masks
/// from `rng` and returns the cache needed by model_backward.
template <typename T>
ForwardResult<T> model_forward(const Tensor<T>& x, const ModelParams<T>& p,
                               const ModelConfig& cfg, Mode mode, SeededRng* rng = nullptr) {
  const auto geo = cfg.geometry();
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg.input_height ||
      x.dim(3) != cfg.input_width)
    throw ShapeError("model_forward: expected input [B,1," + std::to_string(cfg.input_height) +
                     "," + std::to_string(cfg.input_width) + "], got " + shape_str(x.shape()));
  if (mode == Mode::train && rng == nullptr) throw UsageError("train mode requires an rng");
  const bool train = mode == Mode::train;
  const std::size_t b = x.dim(0);
  ForwardCache<T> cache;
  cache.batch = b;

  Tensor<T> h = x;
  for (std::size_t i = 0; i < kConvBlocks; ++i) {
    auto& bc = cache.blocks[i];
    Tensor<T> z = detail::conv_batch(h, p.conv_w[i]);
    auto bn = batch_norm(z, p.bn_gamma[i], p.bn_beta[i], p.bn_mean[i], p.bn_var[i], mode,
                         cfg.bn_epsilon);
    Tensor<T> a = std::move(bn.y);
    if (i < kPooledBlocks) {
      const std::size_t c = a.dim(1);
      auto pooled = maxpool2d(a.reshaped({b * c, a.dim(2), a.dim(3)}), cfg.pool_stride);
      bc.bn_out_shape = a.shape();
      a = pooled.output.reshaped({b, c, geo.out_h[i], geo.out_w[i]});
      if (train) bc.pool_argmax = std::move(pooled.argmax);
    }
    Tensor<T> act = leaky_relu(a, cfg.leaky_slope);
    auto dr = dropout(act, cfg.conv_dropout[i], rng, mode);
    if (train) {
      bc.input = std::move(h);
      bc.bn = std::move(bn.cache);
      bc.pre_act = std::move(a);
      bc.mask = std::move(dr.mask);
    }
    h = std::move(dr.y);
  }

  h = h.reshaped({b, geo.flat});
  for (std::size_t i = 0; i < kDenseLayers; ++i) {
    Tensor<T> z = dense(h, p.dense_w[i], p.dense_b[i]);
    Tensor<T> act = leaky_relu(z, cfg.leaky_slope);
    auto dr = dropout(act, cfg.dense_dropout, rng, mode);
    if (train) {
      cache.dense[i].input = std::move(h);
      cache.dense[i].pre_act = std::move(z);
      cache.dense[i].mask = std::move(dr.mask);
    }
    h = std::move(dr.y);
  }

  ForwardResult<T> r;
  r.subject_probs = softmax(dense(h, p.subject_w, p.subject_b));
  r.posture_probs = softmax(dense(h, p.posture_w, p.posture_b));
  if (train) {
    cache.features = std::move(h);
    cache.subject_probs = r.subject_probs;
    cache.posture_probs = r.posture_probs;
    r.cache = std::move(cache);
  }
  return r;
}

// --- losses and backward ------------------------------------------------------------

/// sigma * sum(w^2) over conv, dense and head weight matrices (no biases, no BN).
template <typename T>
double l2_penalty(const ModelParams<T>& p, double sigma) {
  double sum = 0.0;
  auto add = [&](const Tensor<T>& t) {
    for (auto v : t.data()) sum += static_cast<double>(v) * v;
  };
  for (const auto& w : p.conv_w) add(w);
  for (const auto& w : p.dense_w) add(w);
  add(p.subject_w);
  add(p.posture_w);
  return sigma * sum;
}

/// Adds 2*sigma*w to the matching gradient slots.
template <typename T>
void add_l2_gradient(const ModelParams<T>& p, double sigma, ModelParams<T>& g) {
  const T k = static_cast<T>(2.0 * sigma);
  auto add = [&](const Tensor<T>& w, Tensor<T>& gw) {
    for (std::size_t i = 0; i < w.size(); ++i) gw[i] += k * w[i];
  };
  for (std::size_t i = 0; i < kConvBlocks; ++i) add(p.conv_w[i], g.conv_w[i]);
  for (std::size_t i = 0; i < kDenseLayers; ++i) add(p.dense_w[i], g.dense_w[i]);
  add(p.subject_w, g.subject_w);
  add(p.posture_w, g.posture_w);
}

struct LossBreakdown {
  double user = 0.0;
  double posture = 0.0;
  double combined = 0.0;  // lambda-weighted data loss
  double l2 = 0.0;
  double total() const { return combined + l2; }
};

template <typename T>
LossBreakdown multitask_loss(const Tensor<T>& subject_probs, const Tensor<T>& posture_probs,
                             std::span<const int> subjects, std::span<const int> postures,
                             double lambda) {
  LossBreakdown l;
  l.user = cross_entropy(subject_probs, subjects);
  l.posture = cross_entropy(posture_probs, postures);
  l.combined = combined_loss(l.user, l.posture, lambda);
  return l;
}

template <typename T>
struct BackwardResult {
  ModelParams<T> grads;
  LossBreakdown loss;
};

/// Gradients of lambda*L_user + (1-lambda)*L_posture + L2 with respect to every
/// trainable tensor, using the cache of a train-mode forward pass.
template <typename T>
BackwardResult<T> model_backward(const std::optional<ForwardCache<T>>& maybe_cache,
                                 const ModelParams<T>& p, const ModelConfig& cfg,
                                 std::span<const int> subjects, std::span<const int> postures,
                                 double lambda) {
  if (!maybe_cache) throw UsageError("model_backward: no train-mode forward cache");
  const auto& c = *maybe_cache;
  if (subjects.size() != c.batch || postures.size() != c.batch)
    throw UsageError("model_backward: label count does not match cached batch");
  if (c.features.empty() || c.features.dim(1) != p.subject_w.dim(0))
    throw UsageError("model_backward: cache does not match these parameters");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");

  BackwardResult<T> r;
  r.loss = multitask_loss(c.subject_probs, c.posture_probs, subjects, postures, lambda);
  r.loss.l2 = l2_penalty(p, cfg.l2_sigma);
  auto& g = r.grads;

  const auto d_subj = cross_entropy_backward(c.subject_probs, subjects, lambda);
  const auto d_post = cross_entropy_backward(c.posture_probs, postures, 1.0 - lambda);
  auto gs = dense_backward(c.features, p.subject_w, d_subj);
  auto gp = dense_backward(c.features, p.posture_w, d_post);
  g.subject_w = std::move(gs.dw);
  g.subject_b = std::move(gs.db);
  g.posture_w = std::move(gp.dw);
  g.posture_b = std::move(gp.db);
  Tensor<T> dh = std::move(gs.dx);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += gp.dx[i];

  for (std::size_t i = kDenseLayers; i-- > 0;) {
    const auto& dc = c.dense[i];
    dh = dropout_backward(dc.mask, dh);
    dh = leaky_relu_backward(dc.pre_act, dh, cfg.leaky_slope);
    auto gd = dense_backward(dc.input, p.dense_w[i], dh);
    g.dense_w[i] = std::move(gd.dw);
    g.dense_b[i] = std::move(gd.db);
    dh = std::move(gd.dx);
  }

  const auto& last = c.blocks[kConvBlocks - 1];
  dh = dh.reshaped(last.pre_act.shape());
  for (std::size_t i = kConvBlocks; i-- > 0;) {
    const auto& bc = c.blocks[i];
    dh = dropout_backward(bc.mask, dh);
    dh = leaky_relu_backward(bc.pre_act, dh, cfg.leaky_slope);
    if (i < kPooledBlocks) dh = maxpool2d_backward<T>(bc.bn_out_shape, bc.pool_argmax, dh);
    auto gb = batch_norm_backward(bc.bn, p.bn_gamma[i], dh);
    g.bn_gamma[i] = std::move(gb.dgamma);
    g.bn_beta[i] = std::move(gb.dbeta);
    Tensor<T> dx;
    detail::conv_batch_backward(bc.input, p.conv_w[i], gb.dx, g.conv_w[i], i > 0 ? &dx : nullptr);
    dh = std::move(dx);
  }

  add_l2_gradient(p, cfg.l2_sigma, g);
  return r;
}

/// Exponential moving average of the batch statistics held in a train-mode cache.
/// The running variance uses the unbiased batch estimate.
template <typename T>
void update_running_stats(ModelParams<T>& p, const ForwardCache<T>& c, const ModelConfig& cfg) {
  const T mom = static_cast<T>(cfg.bn_momentum);
  for (std::size_t i = 0; i < kConvBlocks; ++i) {
    const auto& bn = c.blocks[i].bn;
    const double n = static_cast<double>(bn.count);
    const T unbias = static_cast<T>(n > 1 ? n / (n - 1) : 1.0);
    for (std::size_t ch = 0; ch < bn.batch_mean.size(); ++ch) {
      p.bn_mean[i][ch] = mom * p.bn_mean[i][ch] + (T{1} - mom) * bn.batch_mean[ch];
      p.bn_var[i][ch] = mom * p.bn_var[i][ch] + (T{1} - mom) * bn.batch_var[ch] * unbias;
    }
  }
}

template <typename T>
AdamState<T> make_adam(const ModelParams<T>& p, double base_lr) {
  auto s = AdamState<T>::for_shapes(p.trainable_shapes());
  s.base_lr = base_lr;
  return s;
}

template <typename T>
void adam_step(ModelParams<T>& p, const ModelParams<T>& g, AdamState<T>& s, double lr) {
  auto ps = p.trainable();
  auto gs = g.trainable();
  adam_update<T>(ps, gs, s, lr);
}

}  // namespace pnet
