#include <gtest/gtest.h>

#include <boost/math/special_functions/beta.hpp>
#include <map>

#include "pnet/harness.hpp"
#include "pnet/synthetic.hpp"
#include "test_util.hpp"

using namespace pnet;
using pnet::testing::TempDir;

namespace {

ModelConfig mini_model(std::size_t subjects = 3, std::size_t postures = 17) {
  ModelConfig m;
  m.conv_channels = {4, 4, 8, 8};
  m.dense_width = 16;
  m.num_subjects = subjects;
  m.num_postures = postures;
  m.bn_momentum = 0.9;  // short runs: running statistics must settle within a few hundred steps
  return m;
}

// Normalized synthetic frames for every (subject, posture) pair.
Dataset synthetic_dataset(int subjects, std::size_t frames_per, std::uint64_t seed, int postures = 17) {
  Dataset d;
  auto tax = default_taxonomy();
  int seq = 0;
  for (int s = 1; s <= subjects; ++s)
    for (int p = 1; p <= postures; ++p, ++seq) {
      SeededRng rng(derive_seed(seed, static_cast<std::uint64_t>(seq)));
      for (std::size_t t = 0; t < frames_per; ++t) {
        auto f = normalize_frames(synthetic::frame(s, p, tax, rng));
        d.push(f.ptr(), s - 1, p - 1, seq);
      }
    }
  return d;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.model = mini_model();
  c.base_lr = 1e-3;
  c.epochs = 2;
  c.batch_size = 16;
  c.seed = 5;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- splits

TEST(KFold, SizesAndPartition) {
  auto p = kfold_split(100, 10, 1);
  ASSERT_EQ(p.folds.size(), 10u);
  for (const auto& f : p.folds) EXPECT_EQ(f.test.size(), 10u);
  EXPECT_FALSE(check_plan(p, 100));
  auto q = kfold_split(103, 10, 1);
  std::map<std::size_t, int> sizes;
  for (const auto& f : q.folds) ++sizes[f.test.size()];
  EXPECT_EQ(sizes[10], 7);
  EXPECT_EQ(sizes[11], 3);
  EXPECT_FALSE(check_plan(q, 103));
  EXPECT_THROW(kfold_split(9, 10, 1), ConfigError);
  EXPECT_NE(kfold_split(100, 10, 1).folds[0].test, kfold_split(100, 10, 2).folds[0].test);
  EXPECT_EQ(kfold_split(100, 10, 1).folds[3].test, kfold_split(100, 10, 1).folds[3].test);
}

TEST(Loso, OneFoldPerSubjectWithExclusion) {
  std::vector<int> subj;
  for (int i = 0; i < 13 * 7; ++i) subj.push_back(i % 13);
  auto p = loso_split(subj);
  ASSERT_EQ(p.folds.size(), 13u);
  EXPECT_FALSE(check_plan(p, subj.size(), subj));
  const auto& f5 = p.folds[4];
  EXPECT_EQ(f5.held_out_subject, 4);
  for (auto i : f5.train) EXPECT_NE(subj[i], 4);
  std::size_t total = 0;
  for (const auto& f : p.folds) total += f.test.size();
  EXPECT_EQ(total, subj.size());
  std::vector<int> one(10, 3);
  EXPECT_THROW(loso_split(one), ConfigError);
}

TEST(FoldPlanProperty, ThousandRandomPlansSatisfyInvariants) {
  SeededRng rng(99);
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 400));
    const std::uint64_t seed = rng.next_u64();
    switch (inst % 3) {
      case 0: {
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(2, std::min<std::int64_t>(20, n)));
        auto p = kfold_split(n, k, seed);
        ASSERT_EQ(p.folds.size(), k);
        auto err = check_plan(p, n);
        ASSERT_FALSE(err) << *err;
        break;
      }
      case 1: {
        const int subjects = static_cast<int>(rng.uniform_int(2, 13));
        std::vector<int> subj(n);
        for (std::size_t i = 0; i < n; ++i) subj[i] = static_cast<int>(i % subjects);
        rng.shuffle(subj.begin(), subj.end());
        auto p = loso_split(subj);
        auto err = check_plan(p, n, subj);
        ASSERT_FALSE(err) << *err;
        break;
      }
      default: {
        const int seqs = static_cast<int>(rng.uniform_int(2, std::min<std::int64_t>(60, n)));
        std::vector<int> seq(n);
        for (std::size_t i = 0; i < n; ++i) seq[i] = static_cast<int>(i % seqs);
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(2, seqs));
        auto p = sequence_kfold_split(seq, k, seed);
        auto err = check_plan(p, n);
        ASSERT_FALSE(err) << *err;
        for (const auto& f : p.folds) {
          std::set<int> tr, te;
          for (auto i : f.train) tr.insert(seq[i]);
          for (auto i : f.test) te.insert(seq[i]);
          for (int s : te) ASSERT_FALSE(tr.count(s));
        }
      }
    }
  }
}

TEST(CheckPlan, DetectsViolations) {
  auto p = kfold_split(20, 4, 1);
  p.folds[1].test.push_back(p.folds[0].test[0]);
  EXPECT_TRUE(check_plan(p, 20));
  std::vector<int> subj{0, 0, 1, 1};
  auto l = loso_split(subj);
  l.folds[0].train.push_back(0);
  EXPECT_TRUE(check_plan(l, 4, subj));
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, HandComputedTwoByTwo) {
  ConfusionMatrix cm(2);
  cm.counts = {8, 2, 1, 9};
  auto m = compute_metrics(cm);
  EXPECT_NEAR(*m.classes[0].precision, 800.0 / 9.0, 1e-12);
  EXPECT_NEAR(*m.classes[0].recall, 80.0, 1e-12);
  EXPECT_NEAR(*m.classes[0].specificity, 90.0, 1e-12);
  EXPECT_NEAR(m.accuracy, 85.0, 1e-12);
}

TEST(Metrics, IdentityAndDegenerate) {
  ConfusionMatrix id(3);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 10; ++r) id.add(c, c);
  auto m = compute_metrics(id);
  EXPECT_EQ(m.accuracy, 100.0);
  for (const auto& c : m.classes) {
    EXPECT_EQ(*c.precision, 100.0);
    EXPECT_EQ(*c.recall, 100.0);
    EXPECT_EQ(*c.specificity, 100.0);
  }
  ConfusionMatrix one(2);
  one.counts = {5, 0, 5, 0};
  auto d = compute_metrics(one);
  EXPECT_EQ(*d.classes[0].precision, 50.0);
  EXPECT_EQ(*d.classes[0].recall, 100.0);
  EXPECT_EQ(*d.classes[1].recall, 0.0);
  EXPECT_FALSE(d.classes[1].precision);  // never predicted: undefined, not 0
  EXPECT_THROW(compute_metrics(ConfusionMatrix(3)), UsageError);
}

TEST(Metrics, RandomMatricesMatchDefinitionOracle) {
  SeededRng rng(4);
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t k = static_cast<std::size_t>(rng.uniform_int(2, 6));
    ConfusionMatrix cm(k);
    for (auto& v : cm.counts) v = static_cast<std::uint64_t>(rng.uniform_int(0, 30));
    cm.counts[0] += 1;
    auto m = compute_metrics(cm);
    double total = 0, trace = 0;
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t p = 0; p < k; ++p) total += static_cast<double>(cm.at(t, p)), trace += t == p ? static_cast<double>(cm.at(t, p)) : 0;
    EXPECT_NEAR(m.accuracy, 100 * trace / total, 1e-12);
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t t = 0; t < k; ++t)
        for (std::size_t p = 0; p < k; ++p) {
          const double v = static_cast<double>(cm.at(t, p));
          if (t == c && p == c) tp += v;
          else if (p == c) fp += v;
          else if (t == c) fn += v;
          else tn += v;
        }
      if (tp + fp > 0) {
        EXPECT_NEAR(*m.classes[c].precision, 100 * tp / (tp + fp), 1e-12);
      } else {
        EXPECT_FALSE(m.classes[c].precision);
      }
      if (tp + fn > 0) {
        EXPECT_NEAR(*m.classes[c].recall, 100 * tp / (tp + fn), 1e-12);
      }
      if (tn + fp > 0) {
        EXPECT_NEAR(*m.classes[c].specificity, 100 * tn / (tn + fp), 1e-12);
      }
    }
  }
}

TEST(Metrics, CollapseIsBlockSum) {
  SeededRng rng(12);
  ConfusionMatrix cm(17);
  for (auto& v : cm.counts) v = static_cast<std::uint64_t>(rng.uniform_int(0, 9));
  auto map = coarse_map(default_taxonomy());
  auto c = cm.collapse(map, 3);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      std::uint64_t s = 0;
      for (std::size_t t = 0; t < 17; ++t)
        for (std::size_t p = 0; p < 17; ++p)
          if (map[t] == a && map[p] == b) s += cm.at(t, p);
      EXPECT_EQ(c.at(a, b), s);
    }
  EXPECT_EQ(parse_grid(detail::grid_text(cm)), cm);
}

// ---------------------------------------------------------------- welch

TEST(Welch, ReferenceValues) {
  // Frozen from scipy.stats.ttest_ind(a, b, equal_var=False).
  struct Case {
    std::vector<double> a, b;
    double t, p, df;
  };
  std::vector<Case> cases{
      {{1, 2, 3, 4, 5}, {2, 3, 4, 5, 6}, -1.0, 0.34659350708733416, 8.0},
      {{0.81, 0.84, 0.79, 0.9, 0.86, 0.83}, {0.88, 0.91, 0.87, 0.93}, -2.8237815932814088, 0.02267234154513209,
       7.8912772107873765},
      {{10, 12, 9, 15, 11}, {3, 4, 2.5}, 7.351060250227859, 0.000592304107894051, 5.24885985303171},
  };
  for (const auto& c : cases) {
    auto r = welch_t_test(c.a, c.b);
    EXPECT_NEAR(r.t, c.t, 1e-12);
    EXPECT_NEAR(r.df, c.df, 1e-12);
    EXPECT_NEAR(r.p, c.p, 1e-12);
  }
}

TEST(Welch, RandomInstancesMatchIncompleteBetaOracle) {
  SeededRng rng(21);
  for (int inst = 0; inst < 200; ++inst) {
    std::vector<double> a(static_cast<std::size_t>(rng.uniform_int(2, 12))), b(static_cast<std::size_t>(rng.uniform_int(2, 12)));
    for (auto& v : a) v = rng.gaussian(rng.uniform(-1, 1), 1.0);
    for (auto& v : b) v = rng.gaussian(0.0, rng.uniform(0.2, 3.0));
    auto r = welch_t_test(a, b);
    long double ma = 0, mb = 0, va = 0, vb = 0;
    for (double v : a) ma += v;
    for (double v : b) mb += v;
    ma /= a.size();
    mb /= b.size();
    for (double v : a) va += (v - ma) * (v - ma);
    for (double v : b) vb += (v - mb) * (v - mb);
    va /= (a.size() - 1);
    vb /= (b.size() - 1);
    const long double se2 = va / a.size() + vb / b.size();
    const double t = static_cast<double>((ma - mb) / std::sqrt(se2));
    const double df = static_cast<double>(se2 * se2 / ((va / a.size()) * (va / a.size()) / (a.size() - 1) +
                                                       (vb / b.size()) * (vb / b.size()) / (b.size() - 1)));
    // Two-sided p of Student t: I_{df/(df+t^2)}(df/2, 1/2).
    const double p = boost::math::ibeta(df / 2, 0.5, df / (df + t * t));
    EXPECT_NEAR(r.t, t, 1e-12 * std::max(1.0, std::abs(t)));
    EXPECT_NEAR(r.df, df, 1e-12 * df);
    EXPECT_NEAR(r.p, p, 1e-12);
  }
}

TEST(Welch, IdentityScaleAndDegenerate) {
  std::vector<double> a{0.8, 0.9, 0.85}, b = a;
  auto r = welch_t_test(a, b);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_NEAR(r.p, 1.0, 1e-15);
  std::vector<double> x{1, 2, 4, 8}, y{3, 3.5, 9, 1, 2};
  auto base = welch_t_test(x, y);
  for (auto& v : x) v *= 7.5;
  for (auto& v : y) v *= 7.5;
  EXPECT_NEAR(welch_t_test(x, y).t, base.t, 1e-12);
  std::vector<double> c1{1, 1, 1}, c2{2, 2};
  EXPECT_THROW(welch_t_test(c1, c2), NumericError);
  std::vector<double> tiny{1};
  EXPECT_THROW(welch_t_test(tiny, c2), UsageError);
}

// ---------------------------------------------------------------- config

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c;
  c.lambda = 0.2;
  c.scheme = Scheme::loso;
  c.model.dense_width = 99;
  c.only_folds = {1, 3};
  c.augment.p_rotate = 0.3;
  TrainConfig d;
  apply_config_json(d, json::parse(train_config_json(c).dump()));
  EXPECT_EQ(train_config_json(d), train_config_json(c));
  EXPECT_THROW(apply_config_json(d, json::parse(R"({"lamda": 0.1})")), ConfigError);
  EXPECT_THROW(apply_config_json(d, json::parse(R"({"model": {"width": 3}})")), ConfigError);
  EXPECT_THROW(apply_config_json(d, json::parse(R"({"scheme": "holdout"})")), ConfigError);
  EXPECT_THROW(apply_config_json(d, json::parse(R"({"epochs": "many"})")), ConfigError);
  TrainConfig bad;
  bad.batch_size = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.lambda = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

// ---------------------------------------------------------------- training

TEST(Train, BatchingKeepsFinalBatchOfTwoOrMore) {
  auto d = synthetic_dataset(3, 2, 1);  // 102 frames
  auto c = quick_config();
  c.epochs = 1;
  c.batch_size = 50;
  auto idx = all_indices(d.size());
  auto r = train_model<float>(d, idx, c);
  EXPECT_EQ(r.curves[0].batches, 3u);
  EXPECT_EQ(r.curves[0].samples, 102u);
  c.batch_size = 101;
  r = train_model<float>(d, idx, c);
  EXPECT_EQ(r.curves[0].batches, 1u);
  EXPECT_EQ(r.curves[0].samples, 101u);
  EXPECT_THROW(train_model<float>(d, std::span<const std::size_t>{}, c), ConfigError);
}

TEST(Train, SameSeedGivesBitwiseIdenticalParams) {
  auto d = synthetic_dataset(3, 2, 2);
  auto c = quick_config();
  c.augment_train = true;
  auto idx = all_indices(d.size());
  auto a = train_model<float>(d, idx, c);
  auto b = train_model<float>(d, idx, c);
  EXPECT_TRUE(a.state.params == b.state.params);
  EXPECT_EQ(encode_checkpoint(to_checkpoint(a.state, c.model)), encode_checkpoint(to_checkpoint(b.state, c.model)));
  c.seed = 6;
  auto e = train_model<float>(d, idx, c);
  EXPECT_FALSE(a.state.params == e.state.params);
}

TEST(Train, ResumeFromCheckpointEqualsUninterrupted) {
  auto d = synthetic_dataset(3, 2, 3);
  auto c = quick_config();
  c.augment_train = true;
  c.epochs = 3;
  auto idx = all_indices(d.size());
  auto full = train_model<float>(d, idx, c);
  c.epochs = 2;
  auto part = train_model<float>(d, idx, c);
  TempDir dir("resume");
  save_checkpoint(to_checkpoint(part.state, c.model), dir.path() / "m.pnet");
  auto loaded = from_checkpoint(load_checkpoint<float>(dir.path() / "m.pnet"));
  c.epochs = 3;
  auto resumed = train_model<float>(d, idx, c, loaded);
  ASSERT_EQ(resumed.curves.size(), 1u);
  EXPECT_EQ(resumed.curves[0].epoch, 2u);
  EXPECT_TRUE(resumed.state.params == full.state.params);
  EXPECT_TRUE(resumed.state.adam == full.state.adam);
}

TEST(Train, NanAbortNamesEpochAndBatch) {
  auto d = synthetic_dataset(3, 1, 4);
  auto c = quick_config();
  auto s = init_train_state<float>(c, 1);
  s.params.posture_b[0] = std::numeric_limits<float>::quiet_NaN();
  auto idx = all_indices(d.size());
  try {
    train_epoch(s, d, idx, c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("epoch 0"), std::string::npos) << m;
    EXPECT_NE(m.find("batch 0"), std::string::npos) << m;
  }
}

TEST(Train, LabelsOutsideModelAreRejected) {
  auto d = synthetic_dataset(3, 1, 4);
  auto c = quick_config();
  c.model.num_subjects = 2;
  auto idx = all_indices(d.size());
  EXPECT_THROW(train_model<float>(d, idx, c), LabelError);
  auto s = init_train_state<float>(c, 1);
  EXPECT_THROW(evaluate_model(s.params, c.model, d, idx, coarse_map(default_taxonomy()), 3, true), LabelError);
}

TEST(Train, LambdaZeroLeavesSubjectHeadAtChance) {
  const int subjects = 6;
  auto d = synthetic_dataset(subjects, 3, 8, 6);
  auto c = quick_config();
  c.model = mini_model(subjects, 6);
  c.model.conv_dropout = {0, 0, 0, 0};
  c.model.dense_dropout = 0;
  c.lambda = 0.0;
  c.epochs = 30;
  auto idx = all_indices(d.size());
  auto r = train_model<float>(d, idx, c);
  auto pred = predict(r.state.params, c.model, d, idx);
  double user = 0, post = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    user += pred.subject[i] == d.subject[i];
    post += pred.posture[i] == d.posture[i];
  }
  user /= static_cast<double>(idx.size());
  post /= static_cast<double>(idx.size());
  EXPECT_LT(user, 0.45);  // chance is 1/6
  EXPECT_GT(post, 0.9);
  EXPECT_GT(r.curves.front().posture_loss, r.curves.back().posture_loss);
}

// ---------------------------------------------------------------- experiments

TEST(Experiment, KfoldRunWritesArtifactsAndIsReproducible) {
  auto d = synthetic_dataset(3, 2, 9);
  auto c = quick_config();
  c.folds = 3;
  c.epochs = 1;
  TempDir dir("run");
  auto r1 = run_experiment(d, default_taxonomy(), c, dir.path() / "a");
  auto r2 = run_experiment(d, default_taxonomy(), c, dir.path() / "b");
  namespace fs = std::filesystem;
  for (const char* f : {"config.json", "aggregate.json", "confusion_posture17_pooled.tsv", "timings.json",
                        "fold_00/metrics.json", "fold_00/confusion_posture17.tsv", "fold_00/confusion_posture3.tsv",
                        "fold_00/confusion_subject.tsv", "fold_00/curves.tsv", "fold_02/model.pnet"})
    EXPECT_TRUE(fs::exists(dir.path() / "a" / f)) << f;
  EXPECT_FALSE(fs::exists(dir.path() / "a" / "LOCK"));
  for (const char* f : {"aggregate.json", "fold_01/metrics.json", "fold_01/model.pnet", "fold_01/curves.tsv"})
    EXPECT_EQ(read_file_bytes(dir.path() / "a" / f), read_file_bytes(dir.path() / "b" / f)) << f;
  // Stored grids reproduce the stored metrics.
  auto grid = parse_grid(read_file_bytes(dir.path() / "a" / "fold_01" / "confusion_posture17.tsv"));
  auto stored = json::parse(read_file_bytes(dir.path() / "a" / "fold_01" / "metrics.json"));
  EXPECT_EQ(stored["posture17"]["accuracy"].get<double>(), compute_metrics(grid).accuracy);
  EXPECT_EQ(r1.aggregate.summary, r2.aggregate.summary);
  EXPECT_EQ(r1.folds.size(), 3u);
}

TEST(Experiment, LockedDirectoryIsRefused) {
  auto d = synthetic_dataset(3, 1, 9);
  auto c = quick_config();
  c.folds = 2;
  c.epochs = 1;
  TempDir dir("lock");
  RunLock held(dir.path());
  EXPECT_THROW(run_experiment(d, default_taxonomy(), c, dir.path()), UsageError);
}

TEST(Experiment, LosoSkipsSubjectHeadAndSweepEmitsWelch) {
  auto d = synthetic_dataset(3, 1, 10);
  auto c = quick_config();
  c.scheme = Scheme::loso;
  c.epochs = 1;
  TempDir dir("sweep");
  auto s = run_lambda_sweep(d, default_taxonomy(), c, {0.2}, dir.path());
  ASSERT_EQ(s.runs.size(), 2u);
  EXPECT_EQ(s.lambdas[0], 0.0);
  for (const auto& o : s.runs[1].folds) EXPECT_FALSE(o.eval.subject);
  EXPECT_EQ(s.runs[1].folds.size(), 3u);
  EXPECT_TRUE(s.summary["runs"][1].contains("welch_vs_lambda0"));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "sweep.json"));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "lambda_0.20" / "aggregate.json"));
  auto agg = s.runs[1].aggregate.summary;
  EXPECT_FALSE(agg.contains("subject"));
  EXPECT_EQ(agg["per_fold"][2]["held_out_subject"], 3);
}

TEST(Dataset, AssembleWithStride) {
  SeededRng rng(1);
  std::vector<CleanSequence> seqs{{"a", 2, 3, pnet::testing::random_tensor<float>({9, 32, 64}, rng, 0, 1)},
                                  {"b", 1, 17, pnet::testing::random_tensor<float>({4, 32, 64}, rng, 0, 1)}};
  auto d = assemble_dataset(seqs, 4);
  ASSERT_EQ(d.size(), 3u + 1u);
  EXPECT_EQ(d.subject[0], 1);
  EXPECT_EQ(d.posture[3], 16);
  EXPECT_EQ(d.sequence[3], 1);
  EXPECT_EQ(d.frame(1)[5], seqs[0].frames[4 * 2048 + 5]);
  EXPECT_THROW(assemble_dataset(seqs, 0), ConfigError);
}
