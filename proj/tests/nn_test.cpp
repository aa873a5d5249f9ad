#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "pnet/checkpoint.hpp"
#include "pnet/model.hpp"
#include "test_util.hpp"

using namespace pnet;
using pnet::testing::numeric_gradient;
using pnet::testing::random_tensor;
using pnet::testing::relative_error;

namespace {

ModelConfig mini_config() {
  ModelConfig c;
  c.conv_channels = {2, 2, 4, 4};
  c.dense_width = 8;
  c.num_subjects = 3;
  c.num_postures = 4;
  return c;
}

struct Batch {
  Tensor<double> x;
  std::vector<int> subjects, postures;
};

Batch random_batch(const ModelConfig& cfg, std::size_t b, SeededRng& rng) {
  Batch out{random_tensor<double>({b, 1, cfg.input_height, cfg.input_width}, rng, 0.0, 1.0), {}, {}};
  for (std::size_t i = 0; i < b; ++i) {
    out.subjects.push_back(static_cast<int>(rng.uniform_int(0, cfg.num_subjects - 1)));
    out.postures.push_back(static_cast<int>(rng.uniform_int(0, cfg.num_postures - 1)));
  }
  return out;
}

double total_loss(const Batch& b, const ModelParams<double>& p, const ModelConfig& cfg,
                  double lambda, std::uint64_t mask_seed) {
  SeededRng rng(mask_seed);
  auto f = model_forward(b.x, p, cfg, Mode::train, &rng);
  auto l = multitask_loss(f.subject_probs, f.posture_probs, b.subjects, b.postures, lambda);
  return l.combined + l2_penalty(p, cfg.l2_sigma);
}

}  // namespace

TEST(LeakyRelu, Values) {
  Tensor<double> x({3}, std::vector<double>{1.0, -1.0, 0.0});
  auto y = leaky_relu(x, 0.2);
  EXPECT_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], -0.2);
  EXPECT_EQ(y[2], 0.0);
  auto g = leaky_relu_backward(x, Tensor<double>::constant({3}, 1.0), 0.2);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 0.2);
  EXPECT_EQ(g[2], 1.0);
}

TEST(BatchNorm, ZeroVarianceChannelYieldsShift) {
  auto x = Tensor<double>::constant({4, 1, 3, 3}, 2.5);
  auto gamma = Tensor<double>::constant({1}, 1.7);
  auto beta = Tensor<double>::constant({1}, -0.4);
  auto out = batch_norm(x, gamma, beta, Tensor<double>({1}), Tensor<double>::constant({1}, 1.0),
                        Mode::train, 1e-5);
  for (auto v : out.y.data()) EXPECT_DOUBLE_EQ(v, -0.4);
}

TEST(BatchNorm, NormalizedStatistics) {
  SeededRng rng(3);
  auto x = random_tensor<double>({5, 3, 4, 4}, rng, -2, 7);
  auto out = batch_norm(x, Tensor<double>::constant({3}, 1.0), Tensor<double>({3}),
                        Tensor<double>({3}), Tensor<double>::constant({3}, 1.0), Mode::train, 1e-5);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    int n = 0;
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        const double v = out.cache.xhat[(b * 3 + c) * 16 + i];
        s += v;
        sq += v * v;
        ++n;
      }
    EXPECT_NEAR(s / n, 0.0, 1e-5);
    EXPECT_NEAR(sq / n, 1.0, 1e-5);
  }
}

TEST(BatchNorm, InferModeUsesRunningStats) {
  Tensor<double> x({2, 1, 1, 1}, std::vector<double>{3.0, -1.0});
  auto out = batch_norm(x, Tensor<double>::constant({1}, 2.0), Tensor<double>::constant({1}, 0.5),
                        Tensor<double>::constant({1}, 1.0), Tensor<double>::constant({1}, 4.0),
                        Mode::infer, 1e-5);
  const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
  EXPECT_DOUBLE_EQ(out.y[0], (3.0 - 1.0) * inv * 2.0 + 0.5);
  EXPECT_DOUBLE_EQ(out.y[1], (-1.0 - 1.0) * inv * 2.0 + 0.5);
}

TEST(BatchNorm, SingleSampleTrainIsConfigError) {
  EXPECT_THROW(batch_norm(Tensor<double>({1, 1, 2, 2}), Tensor<double>({1}), Tensor<double>({1}),
                          Tensor<double>({1}), Tensor<double>({1}), Mode::train, 1e-5),
               ConfigError);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  SeededRng rng(5);
  auto x = random_tensor<double>({3, 2, 3, 2}, rng);
  auto gamma = random_tensor<double>({2}, rng, 0.5, 1.5);
  auto beta = random_tensor<double>({2}, rng);
  auto w = random_tensor<double>(x.shape(), rng);
  auto loss = [&] {
    auto o = batch_norm(x, gamma, beta, Tensor<double>({2}), Tensor<double>::constant({2}, 1.0),
                        Mode::train, 1e-5);
    double s = 0;
    for (std::size_t i = 0; i < o.y.size(); ++i) s += o.y[i] * w[i];
    return s;
  };
  auto o = batch_norm(x, gamma, beta, Tensor<double>({2}), Tensor<double>::constant({2}, 1.0),
                      Mode::train, 1e-5);
  auto g = batch_norm_backward(o.cache, gamma, w);
  EXPECT_LE(relative_error(g.dx, numeric_gradient(x, loss)), 1e-4);
  EXPECT_LE(relative_error(g.dgamma, numeric_gradient(gamma, loss)), 1e-4);
  EXPECT_LE(relative_error(g.dbeta, numeric_gradient(beta, loss)), 1e-4);
}

TEST(Dropout, IdentityCases) {
  SeededRng rng(1);
  auto x = random_tensor<double>({10}, rng);
  EXPECT_EQ(dropout(x, 0.0, &rng, Mode::train).y, x);
  EXPECT_EQ(dropout(x, 0.7, nullptr, Mode::infer).y, x);
  EXPECT_THROW(dropout(x, 1.0, &rng, Mode::train), ConfigError);
}

TEST(Dropout, SurvivorFractionAndMean) {
  SeededRng rng(2024);
  auto x = Tensor<double>::constant({10000}, 1.0);
  auto out = dropout(x, 0.5, &rng, Mode::train);
  std::size_t kept = 0;
  double sum = 0;
  for (std::size_t i = 0; i < out.y.size(); ++i) {
    kept += out.mask[i] != 0.0;
    sum += out.y[i];
  }
  EXPECT_NEAR(kept / 10000.0, 0.5, 0.02);
  EXPECT_NEAR(sum / 10000.0, 1.0, 0.04);
}

TEST(Dense, IdentityZeroAndOracle) {
  SeededRng rng(4);
  auto x = random_tensor<double>({3, 4}, rng);
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  EXPECT_EQ(dense(x, eye, Tensor<double>({4})), x);

  auto b = random_tensor<double>({5}, rng);
  auto y = dense(x, Tensor<double>({4, 5}), b);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at(r, j), b[j]);

  auto w = random_tensor<double>({4, 5}, rng);
  auto z = dense(x, w, b);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < 4; ++k) s += x.at(r, k) * w.at(k, j);
      EXPECT_NEAR(z.at(r, j), s, 1e-14);
    }
  EXPECT_THROW(dense(x, Tensor<double>({3, 5}), b), ShapeError);
}

TEST(Softmax, UniformShiftAndStability) {
  auto p = softmax(Tensor<double>::constant({1, 17}, 0.3));
  for (auto v : p.data()) EXPECT_NEAR(v, 1.0 / 17.0, 1e-15);

  SeededRng rng(6);
  auto z = random_tensor<double>({4, 6}, rng, -5, 5);
  auto shifted = z;
  for (auto& v : shifted.data()) v += 123.0;
  auto a = softmax(z), b = softmax(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);

  auto big = softmax(Tensor<double>({1, 2}, std::vector<double>{1000.0, 0.0}));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);
  EXPECT_TRUE(big.all_finite());
}

TEST(Softmax, RowsSumToOneForArbitraryLogits) {
  SeededRng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_tensor<float>({3, 9}, rng, -80, 80);
    auto p = softmax(z);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += p.at(r, j);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(CrossEntropy, UniformConfidentAndOracle) {
  auto uni = Tensor<double>::constant({2, 17}, 1.0 / 17.0);
  std::vector<int> labels{3, 16};
  EXPECT_NEAR(cross_entropy(uni, labels), std::log(17.0), 1e-12);
  EXPECT_NEAR(std::log(17.0), 2.8332, 1e-4);

  Tensor<double> confident({1, 3}, std::vector<double>{1e-12, 1.0 - 2e-12, 1e-12});
  std::vector<int> one{1};
  EXPECT_NEAR(cross_entropy(confident, one), 0.0, 1e-9);

  SeededRng rng(8);
  auto probs = softmax(random_tensor<double>({5, 4}, rng, -2, 2));
  std::vector<int> lab{0, 3, 1, 1, 2};
  double hand = 0;
  for (int i = 0; i < 5; ++i) hand += -std::log(probs.at(i, lab[i]));
  EXPECT_NEAR(cross_entropy(probs, lab), hand / 5.0, 1e-14);

  std::vector<int> bad{0, 4, 1, 1, 2};
  EXPECT_THROW(cross_entropy(probs, bad), LabelError);
}

TEST(CrossEntropy, GradientWrtLogits) {
  SeededRng rng(9);
  auto logits = random_tensor<double>({3, 4}, rng, -2, 2);
  std::vector<int> lab{2, 0, 3};
  auto d = cross_entropy_backward(softmax(logits), lab);
  auto loss = [&] { return static_cast<double>(cross_entropy(softmax(logits), lab)); };
  EXPECT_LE(relative_error(d, numeric_gradient(logits, loss)), 1e-6);
}

TEST(CombinedLoss, EndpointsAndArithmetic) {
  EXPECT_EQ(combined_loss(2.0, 4.0, 0.0), 4.0);
  EXPECT_EQ(combined_loss(2.0, 4.0, 1.0), 2.0);
  EXPECT_EQ(combined_loss(2.0, 4.0, 0.5), 3.0);
  EXPECT_THROW(combined_loss(2.0, 4.0, 1.5), ConfigError);
  EXPECT_THROW(combined_loss(2.0, 4.0, -0.1), ConfigError);
}

TEST(L2Penalty, ZeroSingleAndScan) {
  auto cfg = mini_config();
  SeededRng rng(10);
  auto p = init_params<double>(cfg, rng);
  auto zero = p;
  for (auto* t : zero.trainable()) t->fill(0.0);
  EXPECT_EQ(l2_penalty(zero, 0.002), 0.0);

  auto single = zero;
  single.dense_w[0][0] = 1.0;
  EXPECT_DOUBLE_EQ(l2_penalty(single, 0.002), 0.002);
  // biases and batch-norm parameters are not penalized
  single.dense_b[0][0] = 5.0;
  single.bn_gamma[0][0] = 5.0;
  EXPECT_DOUBLE_EQ(l2_penalty(single, 0.002), 0.002);

  double scan = 0;
  for (const auto* t : {&p.conv_w[0], &p.conv_w[1], &p.conv_w[2], &p.conv_w[3], &p.dense_w[0],
                        &p.dense_w[1], &p.subject_w, &p.posture_w})
    for (auto v : t->data()) scan += v * v;
  EXPECT_NEAR(l2_penalty(p, 0.002), 0.002 * scan, 1e-15);
}

TEST(ModelConfig, DefaultGeometry) {
  ModelConfig cfg;
  auto g = cfg.geometry();
  EXPECT_EQ(g.conv_h[0], 30u);
  EXPECT_EQ(g.conv_w[0], 62u);
  EXPECT_EQ(g.out_h[0], 14u);
  EXPECT_EQ(g.out_w[0], 30u);
  EXPECT_EQ(g.conv_h[1], 12u);
  EXPECT_EQ(g.conv_w[1], 28u);
  EXPECT_EQ(g.out_h[1], 5u);
  EXPECT_EQ(g.out_w[1], 13u);
  EXPECT_EQ(g.out_h[2], 3u);
  EXPECT_EQ(g.out_w[2], 11u);
  EXPECT_EQ(g.out_h[3], 1u);
  EXPECT_EQ(g.out_w[3], 9u);
  EXPECT_EQ(g.flat, 1152u);
}

TEST(ModelConfig, InvalidConfigsRejectedAtBuildTime) {
  ModelConfig c;
  c.pool_stride = 3;  // maps shrink below the 3x3 minimum
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.num_subjects = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.conv_dropout[2] = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.leaky_slope = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelForward, ShapesNormalizationAndInferDeterminism) {
  ModelConfig cfg;
  SeededRng rng(11);
  auto p = init_params<float>(cfg, rng);
  auto x = random_tensor<float>({2, 1, 32, 64}, rng, 0, 1);
  auto out = model_forward(x, p, cfg, Mode::train, &rng);
  EXPECT_EQ(out.subject_probs.shape(), (Shape{2, 13}));
  EXPECT_EQ(out.posture_probs.shape(), (Shape{2, 17}));
  ASSERT_TRUE(out.cache.has_value());
  EXPECT_EQ(out.cache->blocks[3].pre_act.shape(), (Shape{2, 128, 1, 9}));
  for (const auto* probs : {&out.subject_probs, &out.posture_probs})
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < probs->dim(1); ++j) s += probs->at(r, j);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  auto i1 = model_forward(x, p, cfg, Mode::infer);
  auto i2 = model_forward(x, p, cfg, Mode::infer);
  EXPECT_FALSE(i1.cache.has_value());
  EXPECT_EQ(i1.subject_probs, i2.subject_probs);
  EXPECT_EQ(i1.posture_probs, i2.posture_probs);
  EXPECT_THROW(model_forward(Tensor<float>({2, 1, 30, 64}), p, cfg, Mode::infer), ShapeError);
}

TEST(ModelBackward, FullModelGradientCheck) {
  auto cfg = mini_config();
  SeededRng rng(12);
  auto p = init_params<double>(cfg, rng);
  // Nonzero BN shifts and biases so every path carries signal.
  for (auto& t : p.bn_beta) for (auto& v : t.data()) v = rng.uniform(-0.2, 0.2);
  for (auto& t : p.dense_b) for (auto& v : t.data()) v = rng.uniform(-0.2, 0.2);
  auto batch = random_batch(cfg, 4, rng);
  const std::uint64_t mask_seed = 99;
  const double lambda = 0.3;

  SeededRng mrng(mask_seed);
  auto fwd = model_forward(batch.x, p, cfg, Mode::train, &mrng);
  auto back = model_backward(fwd.cache, p, cfg, batch.subjects, batch.postures, lambda);

  auto names = ModelParams<double>::trainable_names();
  auto params = p.trainable();
  auto grads = back.grads.trainable();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto numeric = numeric_gradient(*params[i], [&] { return total_loss(batch, p, cfg, lambda, mask_seed); });
    EXPECT_LE(relative_error(*grads[i], numeric), 1e-4) << names[i];
  }
}

TEST(ModelBackward, LambdaZeroLeavesOnlyL2OnSubjectHead) {
  auto cfg = mini_config();
  SeededRng rng(13);
  auto p = init_params<double>(cfg, rng);
  auto batch = random_batch(cfg, 4, rng);
  auto fwd = model_forward(batch.x, p, cfg, Mode::train, &rng);
  auto g = model_backward(fwd.cache, p, cfg, batch.subjects, batch.postures, 0.0).grads;
  for (std::size_t i = 0; i < p.subject_w.size(); ++i)
    EXPECT_EQ(g.subject_w[i], static_cast<double>(2.0 * cfg.l2_sigma) * p.subject_w[i]);
  for (auto v : g.subject_b.data()) EXPECT_EQ(v, 0.0);
}

TEST(ModelBackward, LabelPermutationInvarianceAtEndpoints) {
  auto cfg = mini_config();
  SeededRng rng(14);
  auto p = init_params<double>(cfg, rng);
  auto batch = random_batch(cfg, 4, rng);
  auto permuted = batch;
  std::rotate(permuted.postures.begin(), permuted.postures.begin() + 1, permuted.postures.end());
  permuted.postures[0] = (permuted.postures[0] + 1) % 4;
  auto grads_for = [&](const Batch& b, double lambda) {
    SeededRng r(5);
    auto f = model_forward(b.x, p, cfg, Mode::train, &r);
    return model_backward(f.cache, p, cfg, b.subjects, b.postures, lambda).grads;
  };
  EXPECT_EQ(grads_for(batch, 1.0), grads_for(permuted, 1.0));
  EXPECT_NE(grads_for(batch, 0.5), grads_for(permuted, 0.5));

  auto psub = batch;
  std::reverse(psub.subjects.begin(), psub.subjects.end());
  psub.subjects[0] = (psub.subjects[0] + 1) % 3;
  EXPECT_EQ(grads_for(batch, 0.0), grads_for(psub, 0.0));
}

TEST(ModelBackward, MissingCacheIsUsageError) {
  auto cfg = mini_config();
  SeededRng rng(15);
  auto p = init_params<double>(cfg, rng);
  std::vector<int> s{0, 1}, q{0, 1};
  EXPECT_THROW(model_backward<double>(std::nullopt, p, cfg, s, q, 0.5), UsageError);
  auto batch = random_batch(cfg, 4, rng);
  auto fwd = model_forward(batch.x, p, cfg, Mode::train, &rng);
  EXPECT_THROW(model_backward(fwd.cache, p, cfg, s, q, 0.5), UsageError);
}

TEST(ModelBackward, DuplicatedSampleKeepsGradientDirection) {
  // Mean loss over {a, b, a, b} equals mean loss over {a, b}; with dropout off
  // and batch statistics unchanged by duplication, gradients match.
  auto cfg = mini_config();
  cfg.conv_dropout = {0, 0, 0, 0};
  cfg.dense_dropout = 0;
  SeededRng rng(16);
  auto p = init_params<double>(cfg, rng);
  auto pair = random_batch(cfg, 2, rng);
  Batch dup;
  dup.x = Tensor<double>({4, 1, 32, 64});
  const std::size_t frame = 32 * 64;
  for (std::size_t i = 0; i < 4; ++i) {
    std::copy_n(pair.x.ptr() + (i % 2) * frame, frame, dup.x.ptr() + i * frame);
    dup.subjects.push_back(pair.subjects[i % 2]);
    dup.postures.push_back(pair.postures[i % 2]);
  }
  auto ga = model_backward(model_forward(pair.x, p, cfg, Mode::train, &rng).cache, p, cfg,
                           pair.subjects, pair.postures, 0.5).grads;
  auto gb = model_backward(model_forward(dup.x, p, cfg, Mode::train, &rng).cache, p, cfg,
                           dup.subjects, dup.postures, 0.5).grads;
  auto a = ga.trainable(), b = gb.trainable();
  // Tensors whose gradients nearly cancel are compared on the global gradient scale.
  double scale = 0;
  for (const auto* t : a)
    for (auto v : t->data()) scale = std::max(scale, std::abs(v));
  auto names = ModelParams<double>::trainable_names();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_LE(relative_error(*b[i], *a[i], scale), 1e-9) << names[i];
}

TEST(Adam, ZeroGradientLeavesParams) {
  std::vector<Shape> shapes{{3}};
  auto s = AdamState<double>::for_shapes(shapes);
  Tensor<double> p({3}, std::vector<double>{1, 2, 3}), g({3});
  auto before = p;
  std::vector<Tensor<double>*> ps{&p};
  std::vector<const Tensor<double>*> gs{&g};
  adam_update<double>(ps, gs, s, 2e-5);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepClosedForm) {
  auto s = AdamState<double>::for_shapes({{4}});
  Tensor<double> p = Tensor<double>::constant({4}, 0.5), g = Tensor<double>::constant({4}, 1.0);
  std::vector<Tensor<double>*> ps{&p};
  std::vector<const Tensor<double>*> gs{&g};
  const double lr = 2e-5;
  adam_update<double>(ps, gs, s, lr);
  // t=1: m_hat = g, v_hat = g^2
  const double mhat = (0.1 * 1.0) / (1 - 0.9), vhat = (0.001 * 1.0) / (1 - 0.999);
  const double expected = 0.5 - lr * mhat / (std::sqrt(vhat) + 1e-8);
  for (auto v : p.data()) EXPECT_NEAR(v, expected, 1e-15);
}

TEST(Adam, IdenticalTensorsGetIdenticalUpdates) {
  auto s = AdamState<double>::for_shapes({{5}, {5}});
  SeededRng rng(17);
  auto a = random_tensor<double>({5}, rng);
  auto b = a;
  auto g = random_tensor<double>({5}, rng);
  std::vector<Tensor<double>*> ps{&a, &b};
  std::vector<const Tensor<double>*> gs{&g, &g};
  for (int i = 0; i < 3; ++i) adam_update<double>(ps, gs, s, 1e-3);
  EXPECT_EQ(a, b);
}

TEST(Adam, StepDecreasesQuadratic) {
  auto s = AdamState<double>::for_shapes({{1}});
  Tensor<double> w = Tensor<double>::constant({1}, 3.0);
  auto loss = [&] { return (w[0] - 1.0) * (w[0] - 1.0); };
  const double before = loss();
  Tensor<double> g = Tensor<double>::constant({1}, 2.0 * (w[0] - 1.0));
  std::vector<Tensor<double>*> ps{&w};
  std::vector<const Tensor<double>*> gs{&g};
  adam_update<double>(ps, gs, s, 1e-3);
  EXPECT_LT(loss(), before);
}

TEST(Adam, ShapeMismatchIsUsageError) {
  auto s = AdamState<double>::for_shapes({{2}});
  Tensor<double> p({2}), g({3});
  std::vector<Tensor<double>*> ps{&p};
  std::vector<const Tensor<double>*> gs{&g};
  EXPECT_THROW(adam_update<double>(ps, gs, s, 1e-3), UsageError);
}

TEST(LrSchedule, StepDecay) {
  for (std::uint64_t e = 0; e < 10; ++e) EXPECT_DOUBLE_EQ(lr_schedule(2e-5, e), 2e-5);
  EXPECT_DOUBLE_EQ(lr_schedule(2e-5, 10), 2e-5 * 0.95);
  EXPECT_NEAR(lr_schedule(2e-5, 10), 1.9e-5, 1e-18);
  EXPECT_NEAR(lr_schedule(2e-5, 39), 1.71475e-5, 1e-17);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig cfg = mini_config();
  SeededRng rng(18);
  Checkpoint<float> ck;
  ck.config = cfg;
  ck.params = init_params<float>(cfg, rng);
  ck.adam = make_adam(ck.params, 2e-5);
  for (auto& m : ck.adam.m) for (auto& v : m.data()) v = static_cast<float>(rng.gaussian());
  for (auto& m : ck.adam.v) for (auto& v : m.data()) v = static_cast<float>(rng.uniform());
  ck.adam.step = 77;
  ck.epoch = 3;
  ck.seed = 0xdeadbeefcafeULL;
  const auto bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 5), "PNET1");
  auto back = decode_checkpoint<float>(bytes);
  EXPECT_EQ(back, ck);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptAndTruncatedInputsRefused) {
  ModelConfig cfg = mini_config();
  SeededRng rng(19);
  Checkpoint<double> ck{cfg, init_params<double>(cfg, rng), {}, 0, 1};
  ck.adam = make_adam(ck.params, 2e-5);
  auto bytes = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint<double>(bytes.substr(0, bytes.size() / 2)), LoadError);
  EXPECT_THROW(decode_checkpoint<double>(""), LoadError);
  auto bad_magic = bytes;
  bad_magic[0] = 'Q';
  EXPECT_THROW(decode_checkpoint<double>(bad_magic), LoadError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x5a;
  EXPECT_THROW(decode_checkpoint<double>(flipped), LoadError);
  EXPECT_THROW(decode_checkpoint<float>(bytes), LoadError);  // scalar width mismatch
}
