#include <gtest/gtest.h>

#include <limits>

#include "pnet/tensor.hpp"
#include "test_util.hpp"

using namespace pnet;
using pnet::testing::numeric_gradient;
using pnet::testing::random_tensor;
using pnet::testing::relative_error;

namespace {

// Independent oracles ------------------------------------------------------------

Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < a.dim(1); ++p) s += (long double)a.at(i, p) * b.at(p, j);
      c.at(i, j) = static_cast<double>(s);
    }
  return c;
}

Tensor<double> conv_oracle(const Tensor<double>& in, const Tensor<double>& k) {
  const std::size_t co = k.dim(0), ci = in.dim(0), oh = in.dim(1) - 2, ow = in.dim(2) - 2;
  Tensor<double> out({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t u = 0; u < 3; ++u)
            for (std::size_t v = 0; v < 3; ++v) s += in.at(c, y + u, x + v) * k.at(o, c, u, v);
        out.at(o, y, x) = s;
      }
  return out;
}

struct PoolOracle {
  Tensor<double> out;
  std::vector<std::size_t> argmax;
};

PoolOracle pool_oracle(const Tensor<double>& in, std::size_t stride) {
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t oh = (h - 3) / stride + 1, ow = (w - 3) / stride + 1;
  PoolOracle r{Tensor<double>({c, oh, ow}), {}};
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        // Collect the window, then pick max with smallest flat index.
        std::vector<std::pair<double, std::size_t>> win;
        for (std::size_t u = 0; u < 3; ++u)
          for (std::size_t v = 0; v < 3; ++v) {
            const std::size_t yy = y * stride + u, xx = x * stride + v;
            win.emplace_back(in.at(ch, yy, xx), (ch * h + yy) * w + xx);
          }
        auto best = win[0];
        for (auto& e : win)
          if (e.first > best.first || (e.first == best.first && e.second < best.second)) best = e;
        r.out.at(ch, y, x) = best.first;
        r.argmax.push_back(best.second);
      }
  return r;
}

}  // namespace

TEST(Tensor, CreateZerosConstant) {
  auto z = Tensor<float>::zeros({2, 3});
  EXPECT_EQ(z.size(), 6u);
  for (auto v : z.data()) EXPECT_EQ(v, 0.0f);
  auto c = Tensor<double>::constant({1}, 7.5);
  EXPECT_EQ(c[0], 7.5);
}

TEST(Tensor, GaussianIsDeterministic) {
  SeededRng r1(42), r2(42);
  auto a = Tensor<double>::gaussian({4}, 0, 1, r1);
  auto b = Tensor<double>::gaussian({4}, 0, 1, r2);
  EXPECT_EQ(a, b);
}

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Matmul, IdentityAndOnes) {
  SeededRng rng(1);
  auto b = random_tensor<double>({2, 2}, rng);
  Tensor<double> eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  EXPECT_EQ(matmul(eye, b), b);
  auto ones_r = Tensor<double>::constant({1, 3}, 1.0);
  auto ones_c = Tensor<double>::constant({3, 1}, 1.0);
  EXPECT_EQ(matmul(ones_r, ones_c)[0], 3.0);
  EXPECT_THROW(matmul(ones_r, ones_r), ShapeError);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  SeededRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor<double>({4, 5}, rng);
    auto b = random_tensor<double>({5, 3}, rng);
    auto c = matmul(a, b);
    auto o = matmul_oracle(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], o[i], 1e-15);
  }
}

TEST(Conv2d, OnesAndDeltaKernel) {
  auto in = Tensor<double>::constant({1, 3, 3}, 1.0);
  auto k = Tensor<double>::constant({1, 1, 3, 3}, 1.0);
  auto out = conv2d_valid(in, k);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out[0], 9.0);

  SeededRng rng(5);
  auto img = random_tensor<double>({1, 6, 8}, rng);
  Tensor<double> delta({1, 1, 3, 3});
  delta.at(0, 0, 1, 1) = 1.0;
  auto interior = conv2d_valid(img, delta);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(interior.at(0, y, x), img.at(0, y + 1, x + 1));
}

TEST(Conv2d, MatchesDirectOracle) {
  SeededRng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto in = random_tensor<double>({2, 5, 5}, rng);
    auto k = random_tensor<double>({3, 2, 3, 3}, rng);
    auto out = conv2d_valid(in, k);
    auto o = conv_oracle(in, k);
    ASSERT_EQ(out.shape(), o.shape());
    for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], o[i], 1e-12);
  }
}

TEST(Conv2d, ShapeErrors) {
  EXPECT_THROW(conv2d_valid(Tensor<double>({1, 2, 5}), Tensor<double>({1, 1, 3, 3})), ShapeError);
  EXPECT_THROW(conv2d_valid(Tensor<double>({2, 5, 5}), Tensor<double>({1, 1, 3, 3})), ShapeError);
}

TEST(Conv2d, IsLinear) {
  SeededRng rng(11);
  auto x = random_tensor<double>({2, 6, 5}, rng);
  auto y = random_tensor<double>({2, 6, 5}, rng);
  auto k = random_tensor<double>({2, 2, 3, 3}, rng);
  const double a = 1.7, b = -0.3;
  Tensor<double> mix(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
  auto lhs = conv2d_valid(mix, k);
  auto cx = conv2d_valid(x, k), cy = conv2d_valid(y, k);
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * cx[i] + b * cy[i], 1e-13);
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  SeededRng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    auto in = random_tensor<double>({2, 5, 6}, rng);
    auto k = random_tensor<double>({3, 2, 3, 3}, rng);
    auto weights = random_tensor<double>({3, 3, 4}, rng);  // loss = <weights, conv(in,k)>
    auto loss = [&] {
      auto o = conv2d_valid(in, k);
      double s = 0;
      for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * weights[i];
      return s;
    };
    auto g = conv2d_valid_backward(in, k, weights);
    EXPECT_LE(relative_error(g.d_input, numeric_gradient(in, loss)), 1e-4);
    EXPECT_LE(relative_error(g.d_kernels, numeric_gradient(k, loss)), 1e-4);
  }
}

TEST(MaxPool, ConstantAndSinglePeak) {
  auto c = Tensor<double>::constant({2, 5, 7}, 3.25);
  auto r = maxpool2d(c, 2);
  for (auto v : r.output.data()) EXPECT_EQ(v, 3.25);
  // ties: every window picks its lowest flat index
  EXPECT_EQ(r.argmax[0], 0u);

  Tensor<double> peak({1, 5, 5});
  peak.at(0, 2, 2) = 9.0;
  auto p = maxpool2d(peak, 2);
  ASSERT_EQ(p.output.shape(), (Shape{1, 2, 2}));
  for (auto v : p.output.data()) EXPECT_EQ(v, 9.0);
  EXPECT_THROW(maxpool2d(Tensor<double>({1, 2, 5}), 2), ShapeError);
}

TEST(MaxPool, MatchesWindowScanOracle) {
  SeededRng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    // Quantized values force ties so tie-breaking is exercised.
    Tensor<double> in({2, 7, 9});
    for (auto& v : in.data()) v = static_cast<double>(rng.uniform_int(0, 5));
    auto r = maxpool2d(in, 2);
    auto o = pool_oracle(in, 2);
    ASSERT_EQ(r.output, o.out);
    ASSERT_EQ(r.argmax, o.argmax);
  }
}

TEST(MaxPool, BackwardMatchesFiniteDifferences) {
  SeededRng rng(19);
  auto in = random_tensor<double>({2, 6, 5}, rng);
  auto r0 = maxpool2d(in, 2);
  auto weights = random_tensor<double>(r0.output.shape(), rng);
  auto loss = [&] {
    auto o = maxpool2d(in, 2).output;
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * weights[i];
    return s;
  };
  auto g = maxpool2d_backward<double>(in.shape(), r0.argmax, weights);
  EXPECT_LE(relative_error(g, numeric_gradient(in, loss)), 1e-4);
}

TEST(Matmul, BackwardMatchesFiniteDifferences) {
  SeededRng rng(23);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 2}, rng);
  auto w = random_tensor<double>({3, 2}, rng);
  auto loss = [&] {
    auto c = matmul(a, b);
    double s = 0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * w[i];
    return s;
  };
  // dA = W . B^T, dB = A^T . W
  Tensor<double> da({3, 4}), db({4, 2});
  detail::gemm_nt(3, 4, 2, w.ptr(), b.ptr(), da.ptr(), false);
  detail::gemm_tn(4, 2, 3, a.ptr(), w.ptr(), db.ptr(), false);
  EXPECT_LE(relative_error(da, numeric_gradient(a, loss)), 1e-4);
  EXPECT_LE(relative_error(db, numeric_gradient(b, loss)), 1e-4);
}

TEST(Reduce, SumMeanMax) {
  Tensor<double> t({3}, std::vector<double>{1, 2, 3});
  EXPECT_EQ(reduce(t, ReduceOp::sum)[0], 6.0);
  EXPECT_EQ(reduce(Tensor<double>::constant({2, 3}, 4.5), ReduceOp::mean)[0], 4.5);
  EXPECT_THROW(reduce(t, ReduceOp::sum, {1}), ShapeError);

  SeededRng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    auto r = random_tensor<double>({3, 4, 5}, rng);
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : r.data()) mx = std::max(mx, v);
    EXPECT_EQ(reduce(r, ReduceOp::max)[0], mx);
  }
}

TEST(Reduce, PartialAxes) {
  Tensor<double> t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  auto rows = reduce(t, ReduceOp::sum, {1});
  EXPECT_EQ(rows.shape(), (Shape{2}));
  EXPECT_EQ(rows[0], 6.0);
  EXPECT_EQ(rows[1], 15.0);
  auto cols = reduce(t, ReduceOp::max, {0});
  EXPECT_EQ(cols.vec(), (std::vector<double>{4, 5, 6}));
}
