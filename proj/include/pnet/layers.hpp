#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "pnet/errors.hpp"
#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

enum class Mode { train, infer };

// --- activations -------------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  Tensor<T> y(x.shape());
  const T s = static_cast<T>(slope);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : s * x[i];
  return y;
}

/// Gradient is 1 for x >= 0 and `slope` below zero.
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& dy, double slope) {
  Tensor<T> dx(x.shape());
  const T s = static_cast<T>(slope);
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] >= T{0} ? dy[i] : s * dy[i];
  return dx;
}

// --- batch normalization -------------------------------------------------------

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;  // biased (divide by count)
  std::size_t count = 0;     // elements per channel
};

template <typename T>
struct BatchNormOutput {
  Tensor<T> y;
  BatchNormCache<T> cache;  // populated in train mode only
};

/// Per-channel normalization of x [B,C,...]. Train mode uses batch statistics
/// over batch and spatial dims; infer mode uses the running statistics.
template <typename T>
BatchNormOutput<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              const Tensor<T>& running_mean, const Tensor<T>& running_var,
                              Mode mode, double eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: expected [B,C,...]");
  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (b * c);
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c)
    throw ShapeError("batch_norm: parameter size does not match channel count");
  BatchNormOutput<T> out{Tensor<T>(x.shape()), {}};
  if (mode == Mode::infer) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T inv = T{1} / std::sqrt(running_var[ch] + static_cast<T>(eps));
      for (std::size_t n = 0; n < b; ++n) {
        const std::size_t base = (n * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i)
          out.y[base + i] = (x[base + i] - running_mean[ch]) * inv * gamma[ch] + beta[ch];
      }
    }
    return out;
  }
  if (b < 2) throw ConfigError("batch_norm: train mode needs batch size >= 2");
  auto& cache = out.cache;
  cache.count = b * inner;
  cache.xhat = Tensor<T>(x.shape());
  cache.inv_std.assign(c, T{0});
  cache.batch_mean.assign(c, T{0});
  cache.batch_var.assign(c, T{0});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const T* p = x.ptr() + (n * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) sum += p[i];
    }
    const double mean = sum / static_cast<double>(cache.count);
    double sq = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const T* p = x.ptr() + (n * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(cache.count);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
    cache.batch_mean[ch] = static_cast<T>(mean);
    cache.batch_var[ch] = static_cast<T>(var);
    cache.inv_std[ch] = inv;
    const T m = static_cast<T>(mean);
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t base = (n * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T xh = (x[base + i] - m) * inv;
        cache.xhat[base + i] = xh;
        out.y[base + i] = xh * gamma[ch] + beta[ch];
      }
    }
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                      const Tensor<T>& dy) {
  const std::size_t b = dy.dim(0), c = dy.dim(1);
  const std::size_t inner = dy.size() / (b * c);
  BatchNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({c}), Tensor<T>({c})};
  const double n_elems = static_cast<double>(cache.count);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t base = (n * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        sum_dy += dy[base + i];
        sum_dy_xhat += static_cast<double>(dy[base + i]) * cache.xhat[base + i];
      }
    }
    g.dgamma[ch] = static_cast<T>(sum_dy_xhat);
    g.dbeta[ch] = static_cast<T>(sum_dy);
    const T scale = static_cast<T>(gamma[ch] * cache.inv_std[ch] / n_elems);
    const T mean_dy = static_cast<T>(sum_dy);
    const T mean_dyx = static_cast<T>(sum_dy_xhat);
    const T nn = static_cast<T>(n_elems);
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t base = (n * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i)
        g.dx[base + i] = scale * (nn * dy[base + i] - mean_dy - cache.xhat[base + i] * mean_dyx);
    }
  }
  return g;
}

// --- dropout -------------------------------------------------------------------

template <typename T>
struct DropoutOutput {
  Tensor<T> y;
  Tensor<T> mask;  // 0 or 1/(1-p); all ones in infer mode
};

/// Inverted dropout: survivors are scaled by 1/(1-p) so inference is identity.
template <typename T>
DropoutOutput<T> dropout(const Tensor<T>& x, double p, SeededRng* rng, Mode mode) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: rate must lie in [0,1)");
  if (mode == Mode::infer || p == 0.0) return {x, Tensor<T>::constant(x.shape(), T{1})};
  if (rng == nullptr) throw UsageError("dropout: train mode requires an rng");
  DropoutOutput<T> out{Tensor<T>(x.shape()), Tensor<T>(x.shape())};
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T m = rng->uniform() < p ? T{0} : keep_scale;
    out.mask[i] = m;
    out.y[i] = x[i] * m;
  }
  return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, const Tensor<T>& dy) {
  Tensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
  return dx;
}

// --- dense ---------------------------------------------------------------------

/// y[B,U] = x[B,F] . W[F,U] + b[U]
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.size() != w.dim(1))
    throw ShapeError("dense: shape mismatch " + shape_str(x.shape()) + " . " +
                     shape_str(w.shape()));
  Tensor<T> y = matmul(x, w);
  const std::size_t u = w.dim(1);
  for (std::size_t r = 0; r < x.dim(0); ++r)
    for (std::size_t j = 0; j < u; ++j) y[r * u + j] += b[j];
  return y;
}

template <typename T>
struct DenseGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                             bool need_dx = true) {
  const std::size_t bsz = x.dim(0), f = x.dim(1), u = w.dim(1);
  DenseGrads<T> g{Tensor<T>(), Tensor<T>({f, u}), Tensor<T>({u})};
  detail::gemm_tn(f, u, bsz, x.ptr(), dy.ptr(), g.dw.ptr(), false);
  for (std::size_t r = 0; r < bsz; ++r)
    for (std::size_t j = 0; j < u; ++j) g.db[j] += dy[r * u + j];
  if (need_dx) {
    g.dx = Tensor<T>({bsz, f});
    detail::gemm_nt(bsz, f, u, dy.ptr(), w.ptr(), g.dx.ptr(), false);
  }
  return g;
}

// --- heads and losses -------------------------------------------------------------

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.dim(1) < 2) throw ShapeError("softmax: expected [B,K>=2]");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t r = 0; r < b; ++r) {
    const T* z = logits.ptr() + r * k;
    T* out = p.ptr() + r * k;
    const T mx = *std::max_element(z, z + k);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) {
      out[j] = std::exp(z[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
  }
  return p;
}

template <typename T>
void check_labels(std::span<const int> labels, std::size_t k, std::size_t batch) {
  if (labels.size() != batch)
    throw UsageError("label count " + std::to_string(labels.size()) + " != batch " +
                     std::to_string(batch));
  for (auto l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= k)
      throw LabelError("label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
}

/// Mean over the batch of -log p(true class).
template <typename T>
T cross_entropy(const Tensor<T>& probs, std::span<const int> labels) {
  const std::size_t b = probs.dim(0), k = probs.dim(1);
  check_labels<T>(labels, k, b);
  double loss = 0.0;
  const double floor = std::numeric_limits<T>::min();
  for (std::size_t r = 0; r < b; ++r)
    loss -= std::log(std::max<double>(probs[r * k + labels[r]], floor));
  return static_cast<T>(loss / static_cast<double>(b));
}

/// d(mean CE)/d(logits) = (probs - onehot) / B, scaled by `weight`.
template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& probs, std::span<const int> labels,
                                 double weight = 1.0) {
  const std::size_t b = probs.dim(0), k = probs.dim(1);
  check_labels<T>(labels, k, b);
  Tensor<T> d(probs.shape());
  const T scale = static_cast<T>(weight / static_cast<double>(b));
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const T target = static_cast<int>(j) == labels[r] ? T{1} : T{0};
      d[r * k + j] = (probs[r * k + j] - target) * scale;
    }
  return d;
}

/// lambda * user + (1 - lambda) * posture
template <typename T>
T combined_loss(T user_loss, T posture_loss, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
  return static_cast<T>(lambda) * user_loss + static_cast<T>(1.0 - lambda) * posture_loss;
}

// --- optimizer -------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double base_lr = 2e-5;
  double decay = 0.95;
  std::uint64_t decay_period = 10;

  static AdamState for_shapes(const std::vector<Shape>& shapes) {
    AdamState s;
    for (const auto& sh : shapes) {
      s.m.emplace_back(sh);
      s.v.emplace_back(sh);
    }
    return s;
  }

  bool operator==(const AdamState&) const = default;
};

/// base_lr * decay^floor(epoch / period)
inline double lr_schedule(double base_lr, std::uint64_t epoch, double decay = 0.95,
                          std::uint64_t period = 10) {
  return base_lr * std::pow(decay, static_cast<double>(epoch / period));
}

template <typename T>
double lr_for_epoch(const AdamState<T>& s, std::uint64_t epoch) {
  return lr_schedule(s.base_lr, epoch, s.decay, s.decay_period);
}

/// One bias-corrected Adam update over parallel lists of parameters and gradients.
template <typename T>
void adam_update(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                 AdamState<T>& s, double lr) {
  if (params.size() != grads.size() || params.size() != s.m.size())
    throw UsageError("adam: parameter, gradient and moment counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != s.m[i].shape())
      throw UsageError("adam: gradient shape mismatch for tensor " + std::to_string(i));
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
  const T one_b1 = static_cast<T>(1.0 - s.beta1), one_b2 = static_cast<T>(1.0 - s.beta2);
  const T step = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(s.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->ptr();
    const T* g = grads[i]->ptr();
    T* m = s.m[i].ptr();
    T* v = s.v[i].ptr();
    const std::size_t n = params[i]->size();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + one_b1 * g[j];
      v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
      p[j] -= step * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
    }
  }
}

}  // namespace pnet
