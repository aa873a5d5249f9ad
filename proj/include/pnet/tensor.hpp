#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pnet/errors.hpp"
#include "pnet/rng.hpp"

namespace pnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor of real scalars.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    if (shape_.empty()) throw ShapeError("tensor shape must be non-empty");
    for (auto d : shape_)
      if (d == 0) throw ShapeError("tensor dimension of size 0 in " + shape_str(shape_));
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : Tensor(std::move(shape)) {
    if (data.size() != data_.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape_));
    data_ = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor constant(Shape shape, T c) { return Tensor(std::move(shape), c); }
  static Tensor gaussian(Shape shape, double mean, double stddev, SeededRng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.gaussian(mean, stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor out;
    out.shape_ = std::move(s);
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (auto i : idx) {
      if (i >= shape_[d]) throw ShapeError("index out of range");
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// GEMM on raw row-major buffers, backed by Eigen's blocked kernels. Eigen runs
// single-threaded here, so results are reproducible for a given build.

namespace detail {

template <typename T>
using RowMajorMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMajorMat<T>>;
template <typename T>
using MatMap = Eigen::Map<RowMajorMat<T>>;

/// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  MatMap<T> cm(c, m, n);
  if (!accumulate) cm.setZero();
  cm.noalias() += ConstMatMap<T>(a, m, k) * ConstMatMap<T>(b, k, n);
}

/// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  MatMap<T> cm(c, m, n);
  if (!accumulate) cm.setZero();
  cm.noalias() += ConstMatMap<T>(a, k, m).transpose() * ConstMatMap<T>(b, k, n);
}

/// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  MatMap<T> cm(c, m, n);
  if (!accumulate) cm.setZero();
  cm.noalias() += ConstMatMap<T>(a, m, k) * ConstMatMap<T>(b, n, k).transpose();
}

/// Unfolds a [C,H,W] image into [C*9, (H-2)*(W-2)] patches for 3x3 valid conv.
/// Row r of the patch matrix starts at col + r * ld (ld defaults to the patch count).
template <typename T>
void im2col3(const T* img, std::size_t ch, std::size_t h, std::size_t w, T* col,
             std::size_t ld = 0) {
  const std::size_t oh = h - 2, ow = w - 2;
  if (ld == 0) ld = oh * ow;
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t u = 0; u < 3; ++u)
      for (std::size_t v = 0; v < 3; ++v) {
        T* dst = col + ((c * 3 + u) * 3 + v) * ld;
        for (std::size_t y = 0; y < oh; ++y) {
          const T* src = img + (c * h + y + u) * w + v;
          std::copy(src, src + ow, dst + y * ow);
        }
      }
}

/// Adjoint of im2col3: scatter-adds patch gradients back into the image.
template <typename T>
void col2im3(const T* col, std::size_t ch, std::size_t h, std::size_t w, T* img,
             std::size_t ld = 0) {
  const std::size_t oh = h - 2, ow = w - 2;
  if (ld == 0) ld = oh * ow;
  std::fill(img, img + ch * h * w, T{0});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t u = 0; u < 3; ++u)
      for (std::size_t v = 0; v < 3; ++v) {
        const T* src = col + ((c * 3 + u) * 3 + v) * ld;
        for (std::size_t y = 0; y < oh; ++y) {
          T* dst = img + (c * h + y + u) * w + v;
          for (std::size_t x = 0; x < ow; ++x) dst[x] += src[y * ow + x];
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  detail::gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.ptr(), b.ptr(), c.ptr(), false);
  return c;
}

/// Valid (unpadded) 3x3 convolution, stride 1, single image [Cin,H,W].
template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& input, const Tensor<T>& kernels) {
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3)
    throw ShapeError("conv2d_valid: expected input [C,H,W] and kernels [O,C,3,3]");
  if (kernels.dim(1) != input.dim(0))
    throw ShapeError("conv2d_valid: channel mismatch " + shape_str(input.shape()) + " vs " +
                     shape_str(kernels.shape()));
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h < 3 || w < 3) throw ShapeError("conv2d_valid: input smaller than 3x3 kernel");
  const std::size_t cout = kernels.dim(0), oh = h - 2, ow = w - 2;
  std::vector<T> col(cin * 9 * oh * ow);
  detail::im2col3(input.ptr(), cin, h, w, col.data());
  Tensor<T> out({cout, oh, ow});
  detail::gemm_nn(cout, oh * ow, cin * 9, kernels.ptr(), col.data(), out.ptr(), false);
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> d_input;
  Tensor<T> d_kernels;
};

template <typename T>
ConvGrads<T> conv2d_valid_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                                   const Tensor<T>& d_out) {
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), oh = h - 2, ow = w - 2;
  if (d_out.shape() != Shape{cout, oh, ow}) throw ShapeError("conv2d_valid_backward: d_out shape");
  std::vector<T> col(cin * 9 * oh * ow), dcol(col.size());
  detail::im2col3(input.ptr(), cin, h, w, col.data());
  ConvGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(kernels.shape())};
  detail::gemm_nt(cout, cin * 9, oh * ow, d_out.ptr(), col.data(), g.d_kernels.ptr(), false);
  detail::gemm_tn(cin * 9, oh * ow, cout, kernels.ptr(), d_out.ptr(), dcol.data(), false);
  detail::col2im3(dcol.data(), cin, h, w, g.d_input.ptr());
  return g;
}

template <typename T>
struct PoolResult {
  Tensor<T> output;
  /// Flat input index of the selected element for each output element.
  std::vector<std::size_t> argmax;
};

inline std::size_t pooled_extent(std::size_t n, std::size_t window, std::size_t stride) {
  return (n - window) / stride + 1;
}

/// 3x3 max pooling over [C,H,W]. Ties resolve to the lowest flat index.
template <typename T>
PoolResult<T> maxpool2d(const Tensor<T>& input, std::size_t stride) {
  if (input.rank() != 3) throw ShapeError("maxpool2d: expected [C,H,W]");
  if (stride == 0) throw ShapeError("maxpool2d: stride must be positive");
  const std::size_t ch = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h < 3 || w < 3) throw ShapeError("maxpool2d: window larger than input");
  const std::size_t oh = pooled_extent(h, 3, stride), ow = pooled_extent(w, 3, stride);
  PoolResult<T> r{Tensor<T>({ch, oh, ow}), std::vector<std::size_t>(ch * oh * ow)};
  const T* in = input.ptr();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (c * h + y * stride) * w + x * stride;
        for (std::size_t u = 0; u < 3; ++u)
          for (std::size_t v = 0; v < 3; ++v) {
            const std::size_t idx = (c * h + y * stride + u) * w + x * stride + v;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (c * oh + y) * ow + x;
        r.output[o] = in[best];
        r.argmax[o] = best;
      }
  return r;
}

template <typename T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                             const Tensor<T>& d_out) {
  if (argmax.size() != d_out.size()) throw ShapeError("maxpool2d_backward: argmax size");
  Tensor<T> d_in(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) d_in[argmax[i]] += d_out[i];
  return d_in;
}

enum class ReduceOp { sum, mean, max };

/// Reduces over the given axes (all axes when empty). Reduced axes are dropped;
/// a full reduction yields shape [1].
template <typename T>
Tensor<T> reduce(const Tensor<T>& input, ReduceOp op, std::vector<std::size_t> axes = {}) {
  const auto& s = input.shape();
  std::vector<bool> reduced(s.size(), axes.empty());
  for (auto a : axes) {
    if (a >= s.size()) throw ShapeError("reduce: invalid axis " + std::to_string(a));
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (!reduced[d]) out_shape.push_back(s[d]);
  if (out_shape.empty()) out_shape.push_back(1);
  const std::size_t out_n = shape_numel(out_shape);
  const std::size_t count = input.size() / out_n;

  Tensor<T> out(out_shape);
  std::vector<bool> seen(op == ReduceOp::max ? out_n : 0, false);
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < input.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < s.size(); ++d)
      if (!reduced[d]) o = o * s[d] + idx[d];
    const T v = input[flat];
    if (op == ReduceOp::max) {
      if (!seen[o] || v > out[o]) out[o] = v;
      seen[o] = true;
    } else {
      out[o] += v;
    }
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++idx[d] < s[d]) break;
      idx[d] = 0;
    }
  }
  if (op == ReduceOp::mean)
    for (auto& v : out.data()) v /= static_cast<T>(count);
  return out;
}

}  // namespace pnet
