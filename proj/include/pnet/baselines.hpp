#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pnet/errors.hpp"
#include "pnet/harness.hpp"
#include "pnet/layers.hpp"
#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

// ---------------------------------------------------------------------------
// Features, version 1:
//   0 mean, 1 std, 2 skewness, 3 excess kurtosis, 4 active cells (> 0.05),
//   5 centre-of-pressure row, 6 centre-of-pressure col,
//   7..12 region means over a 2x3 grid (row-major regions),
//   13..17 region stds of the first five regions.
// Population moments. Skewness and kurtosis are 0 for a flat frame; the
// centre of pressure of an all-zero frame is the grid centre.

inline constexpr std::size_t kFeatureCount = 18;
inline constexpr int kFeatureVersion = 1;
inline constexpr double kActiveThreshold = 0.05;

using FeatureVector = std::array<double, kFeatureCount>;

inline FeatureVector extract_features(const float* f, std::size_t h, std::size_t w) {
  FeatureVector out{};
  const std::size_t n = h * w;
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += f[i];
  const double mean = sum / static_cast<double>(n);
  double m2 = 0, m3 = 0, m4 = 0, cop_r = 0, cop_c = 0, active = 0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double v = f[r * w + c], d = v - mean;
      m2 += d * d;
      m3 += d * d * d;
      m4 += d * d * d * d;
      cop_r += v * static_cast<double>(r);
      cop_c += v * static_cast<double>(c);
      active += v > kActiveThreshold;
    }
  m2 /= static_cast<double>(n);
  m3 /= static_cast<double>(n);
  m4 /= static_cast<double>(n);
  out[0] = mean;
  out[1] = std::sqrt(m2);
  out[2] = m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
  out[3] = m2 > 0 ? m4 / (m2 * m2) - 3.0 : 0.0;
  out[4] = active;
  out[5] = sum > 0 ? cop_r / sum : (static_cast<double>(h) - 1) / 2;
  out[6] = sum > 0 ? cop_c / sum : (static_cast<double>(w) - 1) / 2;
  for (std::size_t reg = 0; reg < 6; ++reg) {
    const std::size_t r0 = (reg / 3) * h / 2, r1 = (reg / 3 + 1) * h / 2;
    const std::size_t c0 = (reg % 3) * w / 3, c1 = (reg % 3 + 1) * w / 3;
    double s = 0, ss = 0;
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) s += f[r * w + c];
    const double cnt = static_cast<double>((r1 - r0) * (c1 - c0));
    const double rm = s / cnt;
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) ss += (f[r * w + c] - rm) * (f[r * w + c] - rm);
    out[7 + reg] = rm;
    if (reg < 5) out[13 + reg] = std::sqrt(ss / cnt);
  }
  return out;
}

inline FeatureVector extract_features(const Tensor<float>& frame) {
  if (frame.rank() != 2) throw ShapeError("extract_features: expected [H,W], got " + shape_str(frame.shape()));
  if (frame.dim(0) < 2 || frame.dim(1) < 3) throw ShapeError("extract_features: frame too small for 2x3 regions");
  return extract_features(frame.ptr(), frame.dim(0), frame.dim(1));
}

/// Row-major n x kFeatureCount matrix of the dataset's frames.
inline std::vector<double> feature_matrix(const Dataset& d) {
  std::vector<double> m(d.size() * kFeatureCount);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto f = extract_features(d.frame(i), d.height, d.width);
    std::copy(f.begin(), f.end(), m.begin() + static_cast<std::ptrdiff_t>(i * kFeatureCount));
  }
  return m;
}

/// Z-scoring fitted on a training subset; constant features map to 0.
struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(std::span<const double> x, std::size_t dim, std::span<const std::size_t> rows) {
    Standardizer s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
    const double n = static_cast<double>(rows.size());
    for (auto r : rows)
      for (std::size_t j = 0; j < dim; ++j) s.mean[j] += x[r * dim + j] / n;
    std::vector<double> var(dim, 0.0);
    for (auto r : rows)
      for (std::size_t j = 0; j < dim; ++j) var[j] += (x[r * dim + j] - s.mean[j]) * (x[r * dim + j] - s.mean[j]) / n;
    for (std::size_t j = 0; j < dim; ++j) s.scale[j] = var[j] > 0 ? 1.0 / std::sqrt(var[j]) : 0.0;
    return s;
  }

  std::vector<double> apply(std::span<const double> x, std::size_t dim, std::span<const std::size_t> rows) const {
    std::vector<double> out(rows.size() * dim);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = (x[rows[i] * dim + j] - mean[j]) * scale[j];
    return out;
  }
};

// ---------------------------------------------------------------------------
// k nearest neighbours

struct KnnModel {
  std::size_t dim = 0;
  std::vector<double> x;  // row-major
  std::vector<int> y;
  std::size_t k = 10;

  std::size_t size() const { return y.size(); }
};

inline KnnModel knn_fit(std::vector<double> x, std::vector<int> y, std::size_t dim, std::size_t k = 10) {
  if (k == 0) throw ConfigError("kNN needs k >= 1");
  if (y.size() < k) throw ConfigError("kNN needs at least k=" + std::to_string(k) + " training points, got " +
                                      std::to_string(y.size()));
  if (x.size() != y.size() * dim) throw ShapeError("kNN: feature matrix does not match label count");
  return {dim, std::move(x), std::move(y), k};
}

/// Majority vote of the k nearest points (Euclidean). Equal distances are
/// ranked by training index; vote ties go to the smallest summed distance, then the lowest label.
inline int knn_classify(const KnnModel& m, std::span<const double> q) {
  if (q.size() != m.dim) throw ShapeError("kNN query has wrong dimension");
  std::vector<std::pair<double, std::size_t>> dist(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    double s = 0;
    const double* row = m.x.data() + i * m.dim;
    for (std::size_t j = 0; j < m.dim; ++j) s += (row[j] - q[j]) * (row[j] - q[j]);
    dist[i] = {s, i};
  }
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(m.k), dist.end());
  std::vector<std::pair<int, std::pair<std::size_t, double>>> votes;  // label -> (count, summed distance)
  for (std::size_t i = 0; i < m.k; ++i) {
    const int label = m.y[dist[i].second];
    auto it = std::find_if(votes.begin(), votes.end(), [&](const auto& v) { return v.first == label; });
    if (it == votes.end()) {
      votes.push_back({label, {0, 0.0}});
      it = votes.end() - 1;
    }
    ++it->second.first;
    it->second.second += std::sqrt(dist[i].first);
  }
  auto best = votes.front();
  for (const auto& v : votes) {
    const auto& [cnt, sd] = v.second;
    const auto& [bcnt, bsd] = best.second;
    if (cnt > bcnt || (cnt == bcnt && (sd < bsd || (sd == bsd && v.first < best.first)))) best = v;
  }
  return best.first;
}

// ---------------------------------------------------------------------------
// Bagged decision trees (Gini)

struct TreeNode {
  int feature = -1;  // -1: leaf
  double threshold = 0.0;
  int left = -1, right = -1;
  int label = 0;
  std::uint32_t samples = 0;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;

  int predict(std::span<const double> q) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      i = q[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].label;
  }
  std::size_t depth() const {
    std::function<std::size_t(int)> rec = [&](int i) -> std::size_t {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      return n.feature < 0 ? 0 : 1 + std::max(rec(n.left), rec(n.right));
    };
    return nodes.empty() ? 0 : rec(0);
  }
  bool operator==(const DecisionTree& o) const {
    if (nodes.size() != o.nodes.size()) return false;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto &a = nodes[i], &b = o.nodes[i];
      if (a.feature != b.feature || a.threshold != b.threshold || a.left != b.left || a.right != b.right ||
          a.label != b.label || a.samples != b.samples)
        return false;
    }
    return true;
  }
};

struct TreeEnsemble {
  std::size_t dim = 0;
  int num_classes = 0;
  std::vector<DecisionTree> trees;
  std::vector<std::uint64_t> seeds;

  bool operator==(const TreeEnsemble& o) const {
    return dim == o.dim && num_classes == o.num_classes && trees == o.trees && seeds == o.seeds;
  }
};

struct TreeConfig {
  std::size_t n_trees = 50;
  std::size_t max_depth = 12;
  std::uint64_t seed = 1;
};

namespace detail {

struct TreeBuilder {
  std::span<const double> x;
  std::span<const int> y;
  std::size_t dim;
  int k;
  std::size_t max_depth;
  DecisionTree tree;

  static double gini(const std::vector<std::uint32_t>& c, double n) {
    if (n == 0) return 0.0;
    double s = 0;
    for (auto v : c) s += (v / n) * (v / n);
    return 1.0 - s;
  }

  int build(std::vector<std::size_t>& rows, std::size_t depth) {
    std::vector<std::uint32_t> counts(static_cast<std::size_t>(k), 0);
    for (auto r : rows) ++counts[static_cast<std::size_t>(y[r])];
    TreeNode node;
    node.samples = static_cast<std::uint32_t>(rows.size());
    node.label = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(node);
    const bool pure = counts[static_cast<std::size_t>(node.label)] == rows.size();
    if (pure || depth >= max_depth || rows.size() < 2) return id;

    // Best split by weighted Gini; zero-gain splits are allowed so that
    // interactions (XOR-like) can still be separated further down.
    const double n = static_cast<double>(rows.size());
    double best = std::numeric_limits<double>::infinity();
    int best_f = -1;
    double best_t = 0;
    std::vector<std::size_t> order(rows);
    for (std::size_t f = 0; f < dim; ++f) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double va = x[a * dim + f], vb = x[b * dim + f];
        return va < vb || (va == vb && a < b);
      });
      std::vector<std::uint32_t> left(static_cast<std::size_t>(k), 0), right = counts;
      for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        const int lab = y[order[i]];
        ++left[static_cast<std::size_t>(lab)];
        --right[static_cast<std::size_t>(lab)];
        const double v = x[order[i] * dim + f], vn = x[order[i + 1] * dim + f];
        if (v == vn) continue;
        const double nl = static_cast<double>(i + 1), nr = n - nl;
        const double imp = (nl * gini(left, nl) + nr * gini(right, nr)) / n;
        if (imp < best) {
          best = imp;
          best_f = static_cast<int>(f);
          best_t = v + (vn - v) / 2;
        }
      }
    }
    if (best_f < 0) return id;  // every feature constant on this node
    std::vector<std::size_t> lrows, rrows;
    for (auto r : rows) (x[r * dim + static_cast<std::size_t>(best_f)] <= best_t ? lrows : rrows).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    const int l = build(lrows, depth + 1);
    const int r = build(rrows, depth + 1);
    auto& nd = tree.nodes[static_cast<std::size_t>(id)];
    nd.feature = best_f;
    nd.threshold = best_t;
    nd.left = l;
    nd.right = r;
    return id;
  }
};

}  // namespace detail

inline TreeEnsemble train_bagged_trees(std::span<const double> x, std::span<const int> y, std::size_t dim,
                                       int num_classes, const TreeConfig& cfg) {
  if (y.empty()) throw ConfigError("bagged trees: empty training set");
  if (x.size() != y.size() * dim) throw ShapeError("bagged trees: feature matrix does not match label count");
  if (cfg.n_trees == 0) throw ConfigError("bagged trees: n_trees must be >= 1");
  for (int v : y)
    if (v < 0 || v >= num_classes) throw LabelError("bagged trees: label " + std::to_string(v) + " out of range");
  TreeEnsemble e{dim, num_classes, {}, {}};
  const std::size_t n = y.size();
  for (std::size_t t = 0; t < cfg.n_trees; ++t) {
    const std::uint64_t s = derive_seed(cfg.seed, t);
    SeededRng rng(s);
    std::vector<std::size_t> rows(n);
    for (auto& r : rows) r = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    detail::TreeBuilder b{x, y, dim, num_classes, cfg.max_depth, {}};
    b.build(rows, 0);
    e.trees.push_back(std::move(b.tree));
    e.seeds.push_back(s);
  }
  return e;
}

/// Majority vote over trees; ties go to the lowest label.
inline int predict(const TreeEnsemble& e, std::span<const double> q) {
  if (q.size() != e.dim) throw ShapeError("tree query has wrong dimension");
  std::vector<std::size_t> votes(static_cast<std::size_t>(e.num_classes), 0);
  for (const auto& t : e.trees) ++votes[static_cast<std::size_t>(t.predict(q))];
  return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

// ---------------------------------------------------------------------------
// Multilayer perceptron on the nn kernels

struct MlpConfig {
  std::vector<std::size_t> hidden{128, 256, 256, 128, 64};
  double leaky_slope = 0.2;
  double lr = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
};

template <typename T>
struct Mlp {
  std::vector<Tensor<T>> w, b;
  double leaky_slope = 0.2;

  std::vector<Tensor<T>*> params() {
    std::vector<Tensor<T>*> p;
    for (std::size_t i = 0; i < w.size(); ++i) p.push_back(&w[i]), p.push_back(&b[i]);
    return p;
  }
  std::vector<Shape> shapes() const {
    std::vector<Shape> s;
    for (std::size_t i = 0; i < w.size(); ++i) s.push_back(w[i].shape()), s.push_back(b[i].shape());
    return s;
  }
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) out.push_back(w[i].dim(1));
    return out;
  }
};

template <typename T>
Mlp<T> init_mlp(std::size_t in, std::size_t classes, const MlpConfig& c, SeededRng& rng) {
  Mlp<T> m;
  m.leaky_slope = c.leaky_slope;
  const double gain = std::sqrt(2.0 / (1.0 + c.leaky_slope * c.leaky_slope));
  std::size_t fan = in;
  for (std::size_t width : c.hidden) {
    m.w.push_back(Tensor<T>::gaussian({fan, width}, 0.0, gain / std::sqrt(static_cast<double>(fan)), rng));
    m.b.push_back(Tensor<T>({width}));
    fan = width;
  }
  m.w.push_back(Tensor<T>::gaussian({fan, classes}, 0.0, 1.0 / std::sqrt(static_cast<double>(fan)), rng));
  m.b.push_back(Tensor<T>({classes}));
  return m;
}

template <typename T>
struct MlpForward {
  std::vector<Tensor<T>> inputs;  // input of each layer
  std::vector<Tensor<T>> pre;     // pre-activation of each hidden layer
  Tensor<T> probs;
};

template <typename T>
MlpForward<T> mlp_forward(const Mlp<T>& m, const Tensor<T>& x) {
  MlpForward<T> f;
  Tensor<T> h = x;
  for (std::size_t i = 0; i + 1 < m.w.size(); ++i) {
    f.inputs.push_back(h);
    f.pre.push_back(dense(h, m.w[i], m.b[i]));
    h = leaky_relu(f.pre.back(), m.leaky_slope);
  }
  f.inputs.push_back(h);
  f.probs = softmax(dense(h, m.w.back(), m.b.back()));
  return f;
}

template <typename T>
struct MlpGrads {
  T loss;
  std::vector<Tensor<T>> dw, db;
};

template <typename T>
MlpGrads<T> mlp_backward(const Mlp<T>& m, const MlpForward<T>& f, std::span<const int> labels) {
  MlpGrads<T> g{cross_entropy(f.probs, labels), std::vector<Tensor<T>>(m.w.size()), std::vector<Tensor<T>>(m.w.size())};
  Tensor<T> dy = cross_entropy_backward(f.probs, labels, 1.0);
  for (std::size_t i = m.w.size(); i-- > 0;) {
    auto dg = dense_backward(f.inputs[i], m.w[i], dy, i > 0);
    g.dw[i] = std::move(dg.dw);
    g.db[i] = std::move(dg.db);
    if (i > 0) dy = leaky_relu_backward(f.pre[i - 1], dg.dx, m.leaky_slope);
  }
  return g;
}

template <typename T>
Tensor<T> rows_tensor(std::span<const double> x, std::size_t dim, std::span<const std::size_t> rows) {
  Tensor<T> t({rows.size(), dim});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < dim; ++j) t[i * dim + j] = static_cast<T>(x[rows[i] * dim + j]);
  return t;
}

template <typename T>
Mlp<T> train_mlp(std::span<const double> x, std::span<const int> y, std::size_t dim, int num_classes,
                 const MlpConfig& c) {
  if (y.empty()) throw ConfigError("MLP: empty training set");
  if (c.batch_size < 1) throw ConfigError("MLP: batch_size must be >= 1");
  SeededRng init(derive_seed(c.seed, 0));
  auto m = init_mlp<T>(dim, static_cast<std::size_t>(num_classes), c, init);
  auto adam = AdamState<T>::for_shapes(m.shapes());
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> lab;
  for (std::size_t e = 0; e < c.epochs; ++e) {
    SeededRng rng(derive_seed(c.seed, 1000 + e));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t s = 0; s < order.size(); s += c.batch_size) {
      std::span<const std::size_t> rows(order.data() + s, std::min(c.batch_size, order.size() - s));
      lab.clear();
      for (auto r : rows) lab.push_back(y[r]);
      auto f = mlp_forward(m, rows_tensor<T>(x, dim, rows));
      auto g = mlp_backward(m, f, lab);
      if (!std::isfinite(static_cast<double>(g.loss)))
        throw NumericError("MLP: non-finite loss at epoch " + std::to_string(e));
      std::vector<const Tensor<T>*> gs;
      for (std::size_t i = 0; i < m.w.size(); ++i) gs.push_back(&g.dw[i]), gs.push_back(&g.db[i]);
      auto ps = m.params();
      adam_update<T>(ps, gs, adam, c.lr);
    }
  }
  return m;
}

template <typename T>
std::vector<int> mlp_predict(const Mlp<T>& m, std::span<const double> x, std::size_t dim) {
  const std::size_t n = x.size() / dim;
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  auto f = mlp_forward(m, rows_tensor<T>(x, dim, rows));
  const std::size_t k = f.probs.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<int>(std::max_element(f.probs.ptr() + i * k, f.probs.ptr() + (i + 1) * k) - (f.probs.ptr() + i * k));
  return out;
}

// ---------------------------------------------------------------------------
// Baselines through the fold machinery

enum class BaselineKind { knn, trees, mlp };

inline std::string to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::knn: return "knn";
    case BaselineKind::trees: return "trees";
    case BaselineKind::mlp: return "mlp";
  }
  return "?";
}

inline BaselineKind parse_baseline(const std::string& s) {
  if (s == "knn") return BaselineKind::knn;
  if (s == "trees") return BaselineKind::trees;
  if (s == "mlp") return BaselineKind::mlp;
  throw ConfigError("unknown baseline '" + s + "' (knn | trees | mlp)");
}

struct BaselineConfig {
  BaselineKind kind = BaselineKind::knn;
  std::size_t knn_k = 10;
  TreeConfig trees;
  MlpConfig mlp;
  std::size_t num_postures = kNumPostures;
};

/// Trains on the fine posture labels of each fold's train set and evaluates
/// its test set; reports mirror the CNN run layout (no subject head).
inline ExperimentResult run_baseline(const Dataset& d, const Taxonomy& tax, const BaselineConfig& bc,
                                     const FoldPlan& plan, const std::filesystem::path& run_dir,
                                     bool take_lock = true) {
  std::optional<RunLock> lock;
  if (take_lock) lock.emplace(run_dir);
  const auto feats = feature_matrix(d);
  const auto coarse = coarse_map(tax);
  const std::size_t dim = kFeatureCount;
  ExperimentResult res;
  res.plan = plan;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    FoldOutcome o;
    o.fold = f;
    o.held_out_subject = fold.held_out_subject;
    o.train_size = fold.train.size();
    try {
      std::vector<int> ytr;
      for (auto i : fold.train) ytr.push_back(d.posture[i]);
      std::vector<int> pred(fold.test.size());
      if (bc.kind == BaselineKind::trees) {
        const Standardizer identity{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
        auto xtr = identity.apply(feats, dim, fold.train);
        auto xte = identity.apply(feats, dim, fold.test);
        TreeConfig tc = bc.trees;
        tc.seed = derive_seed(bc.trees.seed, f);
        auto e = train_bagged_trees(xtr, ytr, dim, static_cast<int>(bc.num_postures), tc);
        for (std::size_t i = 0; i < fold.test.size(); ++i) pred[i] = predict(e, std::span(xte).subspan(i * dim, dim));
      } else {
        auto z = Standardizer::fit(feats, dim, fold.train);
        auto xtr = z.apply(feats, dim, fold.train);
        auto xte = z.apply(feats, dim, fold.test);
        if (bc.kind == BaselineKind::knn) {
          auto m = knn_fit(std::move(xtr), ytr, dim, bc.knn_k);
          for (std::size_t i = 0; i < fold.test.size(); ++i)
            pred[i] = knn_classify(m, std::span(xte).subspan(i * dim, dim));
        } else {
          MlpConfig mc = bc.mlp;
          mc.seed = derive_seed(bc.mlp.seed, f);
          auto m = train_mlp<float>(xtr, ytr, dim, static_cast<int>(bc.num_postures), mc);
          pred = mlp_predict(m, xte, dim);
        }
      }
      o.eval.posture_fine = ConfusionMatrix(bc.num_postures);
      for (std::size_t i = 0; i < fold.test.size(); ++i) o.eval.posture_fine.add(d.posture[fold.test[i]], pred[i]);
      o.eval.posture_coarse = o.eval.posture_fine.collapse(coarse, kNumCategories);
      write_fold_artifacts(run_dir / fold_dir_name(f), o, plan.scheme);
    } catch (const Error& e) {
      throw Error("baseline " + to_string(bc.kind) + " fold " + std::to_string(f) + " failed: " + e.what());
    }
    res.folds.push_back(std::move(o));
  }
  res.aggregate = aggregate_outcomes(res.folds, plan.scheme, to_string(bc.kind));
  res.aggregate.summary["feature_version"] = kFeatureVersion;
  detail::write_text(run_dir / "aggregate.json", res.aggregate.summary.dump(2) + "\n");
  return res;
}

}  // namespace pnet
