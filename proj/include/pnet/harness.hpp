#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "pnet/checkpoint.hpp"
#include "pnet/dataio.hpp"
#include "pnet/errors.hpp"
#include "pnet/layers.hpp"
#include "pnet/model.hpp"
#include "pnet/rng.hpp"
#include "pnet/signal.hpp"

namespace pnet {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Dataset: one row per frame, labels as zero-based class indices.

struct Dataset {
  std::size_t height = kFrameH;
  std::size_t width = kFrameW;
  std::vector<float> pixels;
  std::vector<int> subject;   // subject id - 1
  std::vector<int> posture;   // posture id - 1
  std::vector<int> sequence;  // index of the source sequence

  std::size_t size() const { return subject.size(); }
  std::size_t frame_size() const { return height * width; }
  const float* frame(std::size_t i) const { return pixels.data() + i * frame_size(); }

  void push(const float* f, int subj, int post, int seq) {
    pixels.insert(pixels.end(), f, f + frame_size());
    subject.push_back(subj);
    posture.push_back(post);
    sequence.push_back(seq);
  }
};

/// Flattens sequences into frames, keeping every `stride`-th frame of each.
inline Dataset assemble_dataset(const std::vector<CleanSequence>& seqs, std::size_t stride = 1) {
  if (stride == 0) throw ConfigError("frame stride must be >= 1");
  Dataset d;
  if (!seqs.empty()) {
    d.height = seqs.front().frames.dim(1);
    d.width = seqs.front().frames.dim(2);
  }
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& q = seqs[s];
    if (q.frames.dim(1) != d.height || q.frames.dim(2) != d.width)
      throw ShapeError("sequence " + q.source + " has frame shape " + shape_str(q.frames.shape()));
    if (q.subject < 1 || q.posture < 1) throw LabelError("sequence " + q.source + " has no labels");
    for (std::size_t t = 0; t < q.length(); t += stride)
      d.push(q.frames.ptr() + t * d.frame_size(), q.subject - 1, q.posture - 1, static_cast<int>(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Configuration

enum class Scheme { kfold, loso, sequence_kfold };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::kfold: return "kfold";
    case Scheme::loso: return "loso";
    case Scheme::sequence_kfold: return "sequence_kfold";
  }
  return "?";
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "kfold") return Scheme::kfold;
  if (s == "loso") return Scheme::loso;
  if (s == "sequence_kfold") return Scheme::sequence_kfold;
  throw ConfigError("unknown scheme '" + s + "' (kfold | loso | sequence_kfold)");
}

inline double default_lambda(Scheme s) { return s == Scheme::loso ? 0.2 : 0.5; }

struct TrainConfig {
  ModelConfig model;
  double lambda = 0.5;
  double base_lr = 2e-5;
  double lr_decay = 0.95;
  std::uint64_t lr_decay_period = 10;
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  std::size_t eval_batch_size = 256;
  std::uint64_t seed = 1;
  bool augment_train = false;
  bool augment_test = false;
  AugmentPolicy augment;
  Scheme scheme = Scheme::kfold;
  std::size_t folds = 10;
  std::vector<std::size_t> only_folds;  // empty: all folds

  void validate() const {
    model.validate();
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for batch normalization");
    if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
    if (lr_decay_period == 0) throw ConfigError("lr_decay_period must be >= 1");
    if (scheme != Scheme::loso && folds < 2) throw ConfigError("folds must be >= 2");
    augment.validate();
  }
};

inline json model_config_json(const ModelConfig& m) {
  return {{"conv_channels", m.conv_channels}, {"dense_width", m.dense_width},
          {"num_subjects", m.num_subjects},   {"num_postures", m.num_postures},
          {"leaky_slope", m.leaky_slope},     {"conv_dropout", m.conv_dropout},
          {"dense_dropout", m.dense_dropout}, {"l2_sigma", m.l2_sigma},
          {"input_height", m.input_height},   {"input_width", m.input_width},
          {"pool_stride", m.pool_stride},     {"bn_epsilon", m.bn_epsilon},
          {"bn_momentum", m.bn_momentum}};
}

inline json train_config_json(const TrainConfig& c) {
  return {{"model", model_config_json(c.model)},
          {"lambda", c.lambda},
          {"base_lr", c.base_lr},
          {"lr_decay", c.lr_decay},
          {"lr_decay_period", c.lr_decay_period},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"eval_batch_size", c.eval_batch_size},
          {"seed", c.seed},
          {"augment_train", c.augment_train},
          {"augment_test", c.augment_test},
          {"augment_policy",
           {{"p_rotate180", c.augment.p_rotate180},
            {"p_shift_x", c.augment.p_shift_x},
            {"p_shift_y", c.augment.p_shift_y},
            {"p_rotate", c.augment.p_rotate},
            {"max_shift_x", c.augment.max_shift_x},
            {"max_shift_y", c.augment.max_shift_y},
            {"max_angle", c.augment.max_angle}}},
          {"scheme", to_string(c.scheme)},
          {"folds", c.folds},
          {"only_folds", c.only_folds}};
}

namespace detail {

template <typename V>
void take(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(where + key + ": " + e.what());
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }))
      throw ConfigError("unknown config key '" + where + it.key() + "'");
}

}  // namespace detail

/// Overlays the keys present in `j` onto `c`; unknown keys are an error.
inline void apply_config_json(TrainConfig& c, const json& j) {
  detail::reject_unknown(j,
                         {"model", "lambda", "base_lr", "lr_decay", "lr_decay_period", "epochs", "batch_size",
                          "eval_batch_size", "seed", "augment_train", "augment_test", "augment_policy", "scheme",
                          "folds", "only_folds"},
                         "");
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(m,
                           {"conv_channels", "dense_width", "num_subjects", "num_postures", "leaky_slope",
                            "conv_dropout", "dense_dropout", "l2_sigma", "input_height", "input_width",
                            "pool_stride", "bn_epsilon", "bn_momentum"},
                           "model.");
    const std::string w = "model.";
    detail::take(m, "conv_channels", c.model.conv_channels, w);
    detail::take(m, "dense_width", c.model.dense_width, w);
    detail::take(m, "num_subjects", c.model.num_subjects, w);
    detail::take(m, "num_postures", c.model.num_postures, w);
    detail::take(m, "leaky_slope", c.model.leaky_slope, w);
    detail::take(m, "conv_dropout", c.model.conv_dropout, w);
    detail::take(m, "dense_dropout", c.model.dense_dropout, w);
    detail::take(m, "l2_sigma", c.model.l2_sigma, w);
    detail::take(m, "input_height", c.model.input_height, w);
    detail::take(m, "input_width", c.model.input_width, w);
    detail::take(m, "pool_stride", c.model.pool_stride, w);
    detail::take(m, "bn_epsilon", c.model.bn_epsilon, w);
    detail::take(m, "bn_momentum", c.model.bn_momentum, w);
  }
  detail::take(j, "lambda", c.lambda, "");
  detail::take(j, "base_lr", c.base_lr, "");
  detail::take(j, "lr_decay", c.lr_decay, "");
  detail::take(j, "lr_decay_period", c.lr_decay_period, "");
  detail::take(j, "epochs", c.epochs, "");
  detail::take(j, "batch_size", c.batch_size, "");
  detail::take(j, "eval_batch_size", c.eval_batch_size, "");
  detail::take(j, "seed", c.seed, "");
  detail::take(j, "augment_train", c.augment_train, "");
  detail::take(j, "augment_test", c.augment_test, "");
  detail::take(j, "folds", c.folds, "");
  detail::take(j, "only_folds", c.only_folds, "");
  if (j.contains("scheme")) c.scheme = parse_scheme(j["scheme"].get<std::string>());
  if (j.contains("augment_policy")) {
    const auto& a = j["augment_policy"];
    detail::reject_unknown(
        a, {"p_rotate180", "p_shift_x", "p_shift_y", "p_rotate", "max_shift_x", "max_shift_y", "max_angle"},
        "augment_policy.");
    const std::string w = "augment_policy.";
    detail::take(a, "p_rotate180", c.augment.p_rotate180, w);
    detail::take(a, "p_shift_x", c.augment.p_shift_x, w);
    detail::take(a, "p_shift_y", c.augment.p_shift_y, w);
    detail::take(a, "p_rotate", c.augment.p_rotate, w);
    detail::take(a, "max_shift_x", c.augment.max_shift_x, w);
    detail::take(a, "max_shift_y", c.augment.max_shift_y, w);
    detail::take(a, "max_angle", c.augment.max_angle, w);
  }
}

// ---------------------------------------------------------------------------
// Fold plans

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  int held_out_subject = -1;  // zero-based, loso only
};

struct FoldPlan {
  Scheme scheme = Scheme::kfold;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

namespace detail {

// Seeded shuffle of `items`, then k contiguous parts whose sizes differ by at most one.
inline std::vector<std::vector<std::size_t>> shuffled_parts(std::vector<std::size_t> items, std::size_t k,
                                                            std::uint64_t seed) {
  SeededRng rng(seed);
  rng.shuffle(items.begin(), items.end());
  std::vector<std::vector<std::size_t>> parts(k);
  const std::size_t n = items.size(), base = n / k, extra = n % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    parts[f].assign(items.begin() + pos, items.begin() + pos + len);
    pos += len;
  }
  return parts;
}

inline std::vector<std::size_t> complement(const std::vector<std::size_t>& sorted_test, std::size_t n) {
  std::vector<std::size_t> out;
  out.reserve(n - sorted_test.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (j < sorted_test.size() && sorted_test[j] == i)
      ++j;
    else
      out.push_back(i);
  }
  return out;
}

}  // namespace detail

inline FoldPlan kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  if (n < k) throw ConfigError("k-fold needs at least k=" + std::to_string(k) + " samples, got " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  FoldPlan plan{Scheme::kfold, seed, {}};
  for (auto& part : detail::shuffled_parts(std::move(idx), k, seed)) {
    std::sort(part.begin(), part.end());
    Fold f;
    f.train = detail::complement(part, n);
    f.test = std::move(part);
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

/// k-fold over whole sequences, so consecutive frames never straddle train and test.
inline FoldPlan sequence_kfold_split(std::span<const int> sequence_of, std::size_t k, std::uint64_t seed) {
  std::set<int> ids(sequence_of.begin(), sequence_of.end());
  if (ids.size() < k)
    throw ConfigError("sequence k-fold needs at least k=" + std::to_string(k) + " sequences, got " +
                      std::to_string(ids.size()));
  std::vector<std::size_t> seqs(ids.begin(), ids.end());
  FoldPlan plan{Scheme::sequence_kfold, seed, {}};
  for (auto& part : detail::shuffled_parts(std::move(seqs), k, seed)) {
    std::set<std::size_t> chosen(part.begin(), part.end());
    Fold f;
    for (std::size_t i = 0; i < sequence_of.size(); ++i)
      (chosen.count(static_cast<std::size_t>(sequence_of[i])) ? f.test : f.train).push_back(i);
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

inline FoldPlan loso_split(std::span<const int> subject_of) {
  std::set<int> subjects(subject_of.begin(), subject_of.end());
  if (subjects.size() < 2) throw ConfigError("leave-one-subject-out needs at least 2 subjects");
  FoldPlan plan{Scheme::loso, 0, {}};
  for (int s : subjects) {
    Fold f;
    f.held_out_subject = s;
    for (std::size_t i = 0; i < subject_of.size(); ++i) (subject_of[i] == s ? f.test : f.train).push_back(i);
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

inline FoldPlan make_plan(const Dataset& d, const TrainConfig& c) {
  switch (c.scheme) {
    case Scheme::kfold: return kfold_split(d.size(), c.folds, derive_seed(c.seed, 0xF01D));
    case Scheme::loso: return loso_split(d.subject);
    case Scheme::sequence_kfold: return sequence_kfold_split(d.sequence, c.folds, derive_seed(c.seed, 0xF01D));
  }
  throw ConfigError("unknown scheme");
}

/// Returns a description of the first violated plan invariant, or nullopt.
inline std::optional<std::string> check_plan(const FoldPlan& plan, std::size_t n,
                                             std::span<const int> subject_of = {}) {
  std::vector<int> seen(n, 0);
  std::size_t min_test = n, max_test = 0;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    std::vector<char> in_test(n, 0);
    for (auto i : fold.test) {
      if (i >= n) return "fold " + std::to_string(f) + ": test index out of range";
      if (seen[i]++) return "fold " + std::to_string(f) + ": index " + std::to_string(i) + " in two test sets";
      in_test[i] = 1;
    }
    if (fold.train.size() + fold.test.size() != n) return "fold " + std::to_string(f) + ": train+test != n";
    for (auto i : fold.train)
      if (i >= n || in_test[i]) return "fold " + std::to_string(f) + ": train overlaps test";
    min_test = std::min(min_test, fold.test.size());
    max_test = std::max(max_test, fold.test.size());
    if (plan.scheme == Scheme::loso) {
      for (auto i : fold.test)
        if (subject_of[i] != fold.held_out_subject) return "fold " + std::to_string(f) + ": foreign subject in test";
      for (auto i : fold.train)
        if (subject_of[i] == fold.held_out_subject) return "fold " + std::to_string(f) + ": held-out subject in train";
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!seen[i]) return "index " + std::to_string(i) + " never tested";
  if (plan.scheme == Scheme::kfold && max_test - min_test > 1) return "k-fold test sizes differ by more than one";
  if (plan.scheme == Scheme::loso) {
    std::set<int> subjects(subject_of.begin(), subject_of.end());
    if (subjects.size() != plan.folds.size()) return "loso: fold count differs from subject count";
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double user_loss = 0.0;
  double posture_loss = 0.0;
  double combined_loss = 0.0;
  double l2 = 0.0;
  double user_acc = 0.0;     // fraction, train-mode forward
  double posture_acc = 0.0;
  std::size_t samples = 0;
  std::size_t batches = 0;
};

template <typename T>
struct TrainState {
  ModelParams<T> params;
  AdamState<T> adam;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t seed = 0;
};

template <typename T>
TrainState<T> init_train_state(const TrainConfig& c, std::uint64_t seed) {
  c.validate();
  SeededRng rng(derive_seed(seed, 0));
  TrainState<T> s;
  s.params = init_params<T>(c.model, rng);
  s.adam = make_adam(s.params, c.base_lr);
  s.adam.decay = c.lr_decay;
  s.adam.decay_period = c.lr_decay_period;
  s.seed = seed;
  return s;
}

template <typename T>
Checkpoint<T> to_checkpoint(const TrainState<T>& s, const ModelConfig& cfg) {
  return {cfg, s.params, s.adam, s.epoch, s.seed};
}

template <typename T>
TrainState<T> from_checkpoint(Checkpoint<T> c) {
  return {std::move(c.params), std::move(c.adam), c.epoch, c.seed};
}

namespace detail {

inline std::size_t argmax_row(const float* p, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(p, p + n) - p);
}
inline std::size_t argmax_row(const double* p, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(p, p + n) - p);
}

template <typename T>
void check_dataset_labels(const Dataset& d, std::span<const std::size_t> idx, const ModelConfig& m) {
  if (d.height != m.input_height || d.width != m.input_width)
    throw ShapeError("dataset frames are " + std::to_string(d.height) + "x" + std::to_string(d.width) +
                     ", model expects " + std::to_string(m.input_height) + "x" + std::to_string(m.input_width));
  for (auto i : idx) {
    if (i >= d.size()) throw UsageError("sample index " + std::to_string(i) + " out of range");
    if (d.subject[i] < 0 || static_cast<std::size_t>(d.subject[i]) >= m.num_subjects)
      throw LabelError("subject label " + std::to_string(d.subject[i] + 1) + " outside model's " +
                       std::to_string(m.num_subjects) + " subjects");
    if (d.posture[i] < 0 || static_cast<std::size_t>(d.posture[i]) >= m.num_postures)
      throw LabelError("posture label " + std::to_string(d.posture[i] + 1) + " outside model's " +
                       std::to_string(m.num_postures) + " postures");
  }
}

// Copies frames idx[begin, begin+len) into a [len,1,H,W] batch, augmenting if asked.
template <typename T>
Tensor<T> gather_batch(const Dataset& d, std::span<const std::size_t> idx, const AugmentPolicy* aug,
                       SeededRng* rng) {
  const std::size_t fs = d.frame_size();
  Tensor<T> x({idx.size(), 1, d.height, d.width});
  std::vector<float> frame(fs), scratch;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const float* src = d.frame(idx[b]);
    if (aug) {
      std::copy_n(src, fs, frame.data());
      apply_augment(frame.data(), d.height, d.width, draw_augment(*aug, *rng), scratch);
      src = frame.data();
    }
    std::transform(src, src + fs, x.ptr() + b * fs, [](float v) { return static_cast<T>(v); });
  }
  return x;
}

}  // namespace detail

/// One epoch over `idx`. The shuffle, augmentation, and dropout draws come from
/// a stream derived from (state seed, epoch), so resuming from a checkpoint
/// replays exactly what an uninterrupted run would have done.
template <typename T>
EpochStats train_epoch(TrainState<T>& s, const Dataset& d, std::span<const std::size_t> idx, const TrainConfig& c) {
  if (idx.empty()) throw ConfigError("empty training set");
  detail::check_dataset_labels<T>(d, idx, c.model);
  SeededRng rng(derive_seed(s.seed, 1'000'003ULL + s.epoch));
  std::vector<std::size_t> order(idx.begin(), idx.end());
  rng.shuffle(order.begin(), order.end());
  EpochStats st;
  st.epoch = s.epoch;
  st.lr = lr_for_epoch(s.adam, s.epoch);
  const std::size_t n = order.size(), m = c.model.num_subjects, np = c.model.num_postures;
  std::vector<int> subj, post;
  double user_correct = 0, post_correct = 0;
  for (std::size_t start = 0; start < n; start += c.batch_size) {
    const std::size_t len = std::min(c.batch_size, n - start);
    if (len < 2) break;
    std::span<const std::size_t> bidx(order.data() + start, len);
    subj.resize(len);
    post.resize(len);
    for (std::size_t b = 0; b < len; ++b) {
      subj[b] = d.subject[bidx[b]];
      post[b] = d.posture[bidx[b]];
    }
    auto x = detail::gather_batch<T>(d, bidx, c.augment_train ? &c.augment : nullptr, &rng);
    auto fwd = model_forward(x, s.params, c.model, Mode::train, &rng);
    auto bwd = model_backward(fwd.cache, s.params, c.model, subj, post, c.lambda);
    if (!std::isfinite(bwd.loss.total()))
      throw NumericError("non-finite loss at epoch " + std::to_string(s.epoch) + ", batch " +
                         std::to_string(st.batches) + " (samples " + std::to_string(start) + ".." +
                         std::to_string(start + len - 1) + " of the shuffled order)");
    update_running_stats(s.params, *fwd.cache, c.model);
    adam_step(s.params, bwd.grads, s.adam, st.lr);
    const double w = static_cast<double>(len);
    st.user_loss += bwd.loss.user * w;
    st.posture_loss += bwd.loss.posture * w;
    st.combined_loss += bwd.loss.combined * w;
    st.l2 += bwd.loss.l2 * w;
    for (std::size_t b = 0; b < len; ++b) {
      user_correct += detail::argmax_row(fwd.subject_probs.ptr() + b * m, m) == static_cast<std::size_t>(subj[b]);
      post_correct += detail::argmax_row(fwd.posture_probs.ptr() + b * np, np) == static_cast<std::size_t>(post[b]);
    }
    st.samples += len;
    ++st.batches;
  }
  if (st.samples > 0) {
    const double ns = static_cast<double>(st.samples);
    st.user_loss /= ns;
    st.posture_loss /= ns;
    st.combined_loss /= ns;
    st.l2 /= ns;
    st.user_acc = user_correct / ns;
    st.posture_acc = post_correct / ns;
  }
  ++s.epoch;
  return st;
}

template <typename T>
struct TrainResult {
  TrainState<T> state;
  std::vector<EpochStats> curves;
};

/// Trains until c.epochs epochs are complete, starting from `start` if given.
template <typename T>
TrainResult<T> train_model(const Dataset& d, std::span<const std::size_t> idx, const TrainConfig& c,
                           std::optional<TrainState<T>> start = std::nullopt,
                           const std::function<void(const EpochStats&)>& on_epoch = {}) {
  c.validate();
  if (idx.empty()) throw ConfigError("empty training set");
  TrainResult<T> r{start ? std::move(*start) : init_train_state<T>(c, c.seed), {}};
  while (r.state.epoch < c.epochs) {
    r.curves.push_back(train_epoch(r.state, d, idx, c));
    if (on_epoch) on_epoch(r.curves.back());
  }
  return r;
}

struct Predictions {
  std::vector<int> subject;
  std::vector<int> posture;
};

/// Inference-mode argmax for each head. With `aug`, each test frame is augmented first.
template <typename T>
Predictions predict(const ModelParams<T>& p, const ModelConfig& m, const Dataset& d, std::span<const std::size_t> idx,
                    std::size_t batch = 256, const AugmentPolicy* aug = nullptr, SeededRng* rng = nullptr) {
  if (aug && !rng) throw UsageError("augmented prediction needs an rng");
  detail::check_dataset_labels<T>(d, idx, m);
  Predictions out;
  for (std::size_t start = 0; start < idx.size(); start += batch) {
    const std::size_t len = std::min(batch, idx.size() - start);
    auto x = detail::gather_batch<T>(d, idx.subspan(start, len), aug, rng);
    auto fwd = model_forward(x, p, m, Mode::infer);
    for (std::size_t b = 0; b < len; ++b) {
      out.subject.push_back(static_cast<int>(detail::argmax_row(fwd.subject_probs.ptr() + b * m.num_subjects, m.num_subjects)));
      out.posture.push_back(static_cast<int>(detail::argmax_row(fwd.posture_probs.ptr() + b * m.num_postures, m.num_postures)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;  // row = true class, col = predicted

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : k(classes), counts(classes * classes, 0) {}

  void add(int truth, int pred) {
    if (truth < 0 || pred < 0 || static_cast<std::size_t>(truth) >= k || static_cast<std::size_t>(pred) >= k)
      throw LabelError("confusion matrix label outside 0.." + std::to_string(k - 1));
    ++counts[static_cast<std::size_t>(truth) * k + static_cast<std::size_t>(pred)];
  }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * k + p]; }
  std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }
  std::uint64_t row_sum(std::size_t t) const {
    return std::accumulate(counts.begin() + t * k, counts.begin() + (t + 1) * k, std::uint64_t{0});
  }
  std::uint64_t col_sum(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < k; ++t) s += at(t, p);
    return s;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.k != k) throw ShapeError("confusion matrix size mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
  /// Block sums through a class map (fine index -> coarse index).
  ConfusionMatrix collapse(std::span<const int> map, std::size_t coarse_k) const {
    if (map.size() != k) throw ShapeError("collapse map has " + std::to_string(map.size()) + " entries for " +
                                          std::to_string(k) + " classes");
    ConfusionMatrix c(coarse_k);
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t p = 0; p < k; ++p)
        c.counts[static_cast<std::size_t>(map[t]) * coarse_k + static_cast<std::size_t>(map[p])] += at(t, p);
    return c;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassMetrics {
  std::optional<double> precision;    // percent; undefined when nothing was predicted as this class
  std::optional<double> recall;       // undefined when the class has no samples
  std::optional<double> specificity;  // undefined when every sample is of this class
  std::uint64_t support = 0;
};

struct MetricsSummary {
  std::vector<ClassMetrics> classes;
  double accuracy = 0.0;  // percent
  std::optional<double> mean_precision, mean_recall, mean_specificity;
};

namespace detail {
inline std::optional<double> pct(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}
inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) s += *x, ++n;
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}
}  // namespace detail

inline MetricsSummary compute_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (cm.k == 0 || total == 0) throw UsageError("compute_metrics: empty confusion matrix");
  MetricsSummary m;
  std::uint64_t trace = 0;
  std::vector<std::optional<double>> ps, rs, ss;
  for (std::size_t c = 0; c < cm.k; ++c) {
    const std::uint64_t tp = cm.at(c, c), row = cm.row_sum(c), col = cm.col_sum(c);
    const std::uint64_t fp = col - tp, tn = total - row - fp;
    ClassMetrics cl;
    cl.precision = detail::pct(tp, col);
    cl.recall = detail::pct(tp, row);
    cl.specificity = detail::pct(tn, tn + fp);
    cl.support = row;
    trace += tp;
    m.classes.push_back(cl);
    if (row > 0) {  // class means cover classes present in the test set
      ps.push_back(cl.precision);
      rs.push_back(cl.recall);
      ss.push_back(cl.specificity);
    }
  }
  m.accuracy = 100.0 * static_cast<double>(trace) / static_cast<double>(total);
  m.mean_precision = detail::mean_defined(ps);
  m.mean_recall = detail::mean_defined(rs);
  m.mean_specificity = detail::mean_defined(ss);
  return m;
}

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};

inline WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw UsageError("welch_t_test needs at least 2 values per sample");
  auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  if (!(sa + sb > 0.0)) throw NumericError("welch_t_test: both samples have zero variance");
  WelchResult r;
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1) + sb * sb / (nb - 1));
  boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  r.p = std::min(r.p, 1.0);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  ConfusionMatrix posture_fine;
  ConfusionMatrix posture_coarse;
  std::optional<ConfusionMatrix> subject;
  // Subject confusion restricted to test samples of each coarse category.
  std::vector<ConfusionMatrix> subject_by_category;
};

/// `coarse_of[f]` gives the coarse class of fine posture index f.
template <typename T>
EvalReport evaluate_model(const ModelParams<T>& p, const ModelConfig& m, const Dataset& d,
                          std::span<const std::size_t> test, std::span<const int> coarse_of, std::size_t coarse_k,
                          bool include_subject, std::size_t batch = 256, const AugmentPolicy* aug = nullptr,
                          SeededRng* rng = nullptr) {
  if (test.empty()) throw ConfigError("empty test set");
  if (!p.all_finite()) throw NumericError("evaluate_model: parameters contain non-finite values");
  auto pred = predict(p, m, d, test, batch, aug, rng);
  EvalReport r{ConfusionMatrix(m.num_postures), {}, std::nullopt, {}};
  for (std::size_t i = 0; i < test.size(); ++i) r.posture_fine.add(d.posture[test[i]], pred.posture[i]);
  r.posture_coarse = r.posture_fine.collapse(coarse_of, coarse_k);
  if (include_subject) {
    r.subject = ConfusionMatrix(m.num_subjects);
    r.subject_by_category.assign(coarse_k, ConfusionMatrix(m.num_subjects));
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto j = test[i];
      r.subject->add(d.subject[j], pred.subject[i]);
      r.subject_by_category[static_cast<std::size_t>(coarse_of[static_cast<std::size_t>(d.posture[j])])].add(
          d.subject[j], pred.subject[i]);
    }
  }
  return r;
}

/// Category index of each posture index; taxonomy ids must run 1..n.
inline std::vector<int> coarse_map(const Taxonomy& t) {
  std::vector<int> out;
  for (const auto& [id, e] : t.entries) {
    if (id != static_cast<int>(out.size()) + 1) throw ConfigError("taxonomy ids must be contiguous from 1");
    out.push_back(static_cast<int>(e.category));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report serialization

namespace detail {

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json metrics_json(const MetricsSummary& m) {
  json per = json::array();
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    const auto& k = m.classes[c];
    per.push_back({{"class", c + 1},
                   {"support", k.support},
                   {"precision", opt_json(k.precision)},
                   {"recall", opt_json(k.recall)},
                   {"specificity", opt_json(k.specificity)}});
  }
  return {{"accuracy", m.accuracy},
          {"mean_precision", opt_json(m.mean_precision)},
          {"mean_recall", opt_json(m.mean_recall)},
          {"mean_specificity", opt_json(m.mean_specificity)},
          {"classes", per}};
}

inline std::string grid_text(const ConfusionMatrix& cm) {
  std::ostringstream os;
  for (std::size_t t = 0; t < cm.k; ++t) {
    for (std::size_t p = 0; p < cm.k; ++p) os << (p ? "\t" : "") << cm.at(t, p);
    os << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) { write_file_bytes(p, s); }

inline std::string curves_text(const std::vector<EpochStats>& curves) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch\tlr\tuser_loss\tposture_loss\tcombined_loss\tl2\tuser_acc\tposture_acc\n";
  for (const auto& e : curves)
    os << e.epoch << '\t' << e.lr << '\t' << e.user_loss << '\t' << e.posture_loss << '\t' << e.combined_loss << '\t'
       << e.l2 << '\t' << e.user_acc << '\t' << e.posture_acc << '\n';
  return os.str();
}

}  // namespace detail

inline ConfusionMatrix parse_grid(const std::string& text) {
  std::vector<std::vector<std::uint64_t>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::uint64_t> r;
    std::uint64_t v;
    while (ls >> v) r.push_back(v);
    rows.push_back(std::move(r));
  }
  ConfusionMatrix cm(rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() != rows.size()) throw ParseError("confusion grid is not square");
    for (std::size_t p = 0; p < rows.size(); ++p) cm.counts[t * cm.k + p] = rows[t][p];
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Experiments

struct FoldOutcome {
  std::size_t fold = 0;
  int held_out_subject = -1;
  std::size_t train_size = 0;
  EvalReport eval;
  std::vector<EpochStats> curves;
};

/// Exclusive marker so two processes never write into one run directory.
class RunLock {
 public:
  explicit RunLock(std::filesystem::path dir) : path_(std::move(dir) / "LOCK") {
    std::filesystem::create_directories(path_.parent_path());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw UsageError("run directory " + path_.parent_path().string() + " is locked by another process (" +
                             path_.string() + ")");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

inline std::string fold_dir_name(std::size_t f) {
  std::ostringstream os;
  os << "fold_" << std::setw(2) << std::setfill('0') << f;
  return os.str();
}

inline json fold_json(const FoldOutcome& o, Scheme scheme) {
  json j{{"fold", o.fold},
         {"scheme", to_string(scheme)},
         {"train_size", o.train_size},
         {"test_size", o.eval.posture_fine.total()},
         {"posture17", detail::metrics_json(compute_metrics(o.eval.posture_fine))},
         {"posture3", detail::metrics_json(compute_metrics(o.eval.posture_coarse))}};
  if (o.held_out_subject >= 0) j["held_out_subject"] = o.held_out_subject + 1;
  if (o.eval.subject) {
    j["subject"] = detail::metrics_json(compute_metrics(*o.eval.subject));
    json by = json::object();
    for (std::size_t c = 0; c < o.eval.subject_by_category.size(); ++c) {
      const auto& cm = o.eval.subject_by_category[c];
      by[to_string(static_cast<Category>(c))] = cm.total() ? json(compute_metrics(cm).accuracy) : json(nullptr);
    }
    j["subject_accuracy_by_category"] = by;
  }
  return j;
}

inline void write_fold_artifacts(const std::filesystem::path& dir, const FoldOutcome& o, Scheme scheme) {
  detail::write_text(dir / "confusion_posture17.tsv", detail::grid_text(o.eval.posture_fine));
  detail::write_text(dir / "confusion_posture3.tsv", detail::grid_text(o.eval.posture_coarse));
  if (o.eval.subject) detail::write_text(dir / "confusion_subject.tsv", detail::grid_text(*o.eval.subject));
  if (!o.curves.empty()) detail::write_text(dir / "curves.tsv", detail::curves_text(o.curves));
  detail::write_text(dir / "metrics.json", fold_json(o, scheme).dump(2) + "\n");
}

namespace detail {

// Unweighted mean over folds, per class and overall, skipping undefined entries.
inline json mean_metrics(const std::vector<MetricsSummary>& ms) {
  json j;
  std::vector<double> acc;
  for (const auto& m : ms) acc.push_back(m.accuracy);
  j["accuracy"] = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  auto field_mean = [&](auto get) {
    std::vector<std::optional<double>> v;
    for (const auto& m : ms) v.push_back(get(m));
    return opt_json(mean_defined(v));
  };
  j["mean_precision"] = field_mean([](const MetricsSummary& m) { return m.mean_precision; });
  j["mean_recall"] = field_mean([](const MetricsSummary& m) { return m.mean_recall; });
  j["mean_specificity"] = field_mean([](const MetricsSummary& m) { return m.mean_specificity; });
  json per = json::array();
  for (std::size_t c = 0; c < ms.front().classes.size(); ++c) {
    per.push_back({{"class", c + 1},
                   {"precision", field_mean([&](const MetricsSummary& m) { return m.classes[c].precision; })},
                   {"recall", field_mean([&](const MetricsSummary& m) { return m.classes[c].recall; })},
                   {"specificity", field_mean([&](const MetricsSummary& m) { return m.classes[c].specificity; })}});
  }
  j["classes"] = per;
  return j;
}

}  // namespace detail

struct AggregateReport {
  json summary;
  std::vector<double> fold_posture17_accuracy;  // per fold; per subject under loso
  std::vector<double> fold_posture3_accuracy;
};

inline AggregateReport aggregate_outcomes(const std::vector<FoldOutcome>& outs, Scheme scheme, const std::string& model) {
  if (outs.empty()) throw UsageError("no fold outcomes to aggregate");
  AggregateReport r;
  std::vector<MetricsSummary> fine, coarse, subj;
  ConfusionMatrix pooled_fine(outs.front().eval.posture_fine.k), pooled_coarse(outs.front().eval.posture_coarse.k);
  json per_fold = json::array();
  for (const auto& o : outs) {
    fine.push_back(compute_metrics(o.eval.posture_fine));
    coarse.push_back(compute_metrics(o.eval.posture_coarse));
    pooled_fine += o.eval.posture_fine;
    pooled_coarse += o.eval.posture_coarse;
    r.fold_posture17_accuracy.push_back(fine.back().accuracy);
    r.fold_posture3_accuracy.push_back(coarse.back().accuracy);
    json pf{{"fold", o.fold}, {"posture17_accuracy", fine.back().accuracy}, {"posture3_accuracy", coarse.back().accuracy}};
    if (o.held_out_subject >= 0) pf["held_out_subject"] = o.held_out_subject + 1;
    if (o.eval.subject) {
      subj.push_back(compute_metrics(*o.eval.subject));
      pf["subject_accuracy"] = subj.back().accuracy;
    }
    per_fold.push_back(pf);
  }
  json s{{"model", model},
         {"scheme", to_string(scheme)},
         {"folds", outs.size()},
         {"posture17", detail::mean_metrics(fine)},
         {"posture3", detail::mean_metrics(coarse)},
         {"posture17_pooled_accuracy", compute_metrics(pooled_fine).accuracy},
         {"posture3_pooled_accuracy", compute_metrics(pooled_coarse).accuracy}};
  if (!subj.empty()) {
    s["subject"] = detail::mean_metrics(subj);
    const std::size_t ck = outs.front().eval.subject_by_category.size();
    json by = json::object();
    for (std::size_t c = 0; c < ck; ++c) {
      ConfusionMatrix pooled(outs.front().eval.subject->k);
      for (const auto& o : outs) pooled += o.eval.subject_by_category[c];
      by[to_string(static_cast<Category>(c))] = pooled.total() ? json(compute_metrics(pooled).accuracy) : json(nullptr);
    }
    s["subject_accuracy_by_category"] = by;
  }
  s["per_fold"] = per_fold;
  r.summary = std::move(s);
  return r;
}

struct RunOptions {
  bool save_checkpoints = true;
  std::ostream* log = nullptr;
  bool lock = true;  // false when the caller already holds the run directory
};

struct ExperimentResult {
  FoldPlan plan;
  std::vector<FoldOutcome> folds;
  AggregateReport aggregate;
};

/// Trains and evaluates the CNN on every fold of the configured scheme and
/// writes config.json, fold_XX/{metrics.json,confusion_*.tsv,curves.tsv,model.pnet},
/// aggregate.json, and pooled confusion grids into `run_dir`.
inline ExperimentResult run_experiment(const Dataset& d, const Taxonomy& tax, const TrainConfig& c,
                                       const std::filesystem::path& run_dir, const RunOptions& opt = {}) {
  c.validate();
  namespace fs = std::filesystem;
  std::optional<RunLock> lock;
  if (opt.lock) lock.emplace(run_dir);
  detail::write_text(run_dir / "config.json", train_config_json(c).dump(2) + "\n");
  const auto coarse = coarse_map(tax);
  ExperimentResult res;
  res.plan = make_plan(d, c);
  const bool subject_eval = c.scheme != Scheme::loso;
  json timings = json::object();
  for (std::size_t f = 0; f < res.plan.folds.size(); ++f) {
    if (!c.only_folds.empty() && std::find(c.only_folds.begin(), c.only_folds.end(), f) == c.only_folds.end())
      continue;
    const auto& fold = res.plan.folds[f];
    const auto t0 = std::chrono::steady_clock::now();
    FoldOutcome o;
    try {
      o.fold = f;
      o.held_out_subject = fold.held_out_subject;
      o.train_size = fold.train.size();
      TrainConfig fc = c;
      fc.seed = derive_seed(c.seed, 100 + f);
      auto tr = train_model<float>(d, fold.train, fc, std::nullopt, [&](const EpochStats& e) {
        if (opt.log)
          *opt.log << "fold " << f << " epoch " << e.epoch << " loss " << e.combined_loss << " user_acc "
                   << e.user_acc << " posture_acc " << e.posture_acc << std::endl;
      });
      o.curves = std::move(tr.curves);
      SeededRng test_rng(derive_seed(fc.seed, 0x7E57));
      o.eval = evaluate_model(tr.state.params, c.model, d, fold.test, coarse, kNumCategories, subject_eval,
                              c.eval_batch_size, c.augment_test ? &c.augment : nullptr, &test_rng);
      const auto dir = run_dir / fold_dir_name(f);
      if (opt.save_checkpoints) save_checkpoint(to_checkpoint(tr.state, c.model), dir / "model.pnet");
      write_fold_artifacts(dir, o, c.scheme);
    } catch (const Error& e) {
      throw Error("fold " + std::to_string(f) + " failed: " + e.what());
    }
    timings[fold_dir_name(f)] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.log) *opt.log << "fold " << f << " posture17 acc " << compute_metrics(o.eval.posture_fine).accuracy << std::endl;
    res.folds.push_back(std::move(o));
  }
  res.aggregate = aggregate_outcomes(res.folds, c.scheme, "cnn");
  res.aggregate.summary["lambda"] = c.lambda;
  res.aggregate.summary["seed"] = c.seed;
  res.aggregate.summary["t_test_unit"] =
      c.scheme == Scheme::loso ? "per-subject accuracy (one LOSO fold per subject)" : "per-fold accuracy";
  detail::write_text(run_dir / "aggregate.json", res.aggregate.summary.dump(2) + "\n");
  ConfusionMatrix pooled(c.model.num_postures);
  for (const auto& o : res.folds) pooled += o.eval.posture_fine;
  detail::write_text(run_dir / "confusion_posture17_pooled.tsv", detail::grid_text(pooled));
  detail::write_text(run_dir / "confusion_posture3_pooled.tsv",
                     detail::grid_text(pooled.collapse(coarse, kNumCategories)));
  // Wall-clock times live apart from the reports so reports stay byte-reproducible.
  detail::write_text(run_dir / "timings.json", timings.dump(2) + "\n");
  return res;
}

struct SweepResult {
  std::vector<double> lambdas;
  std::vector<ExperimentResult> runs;
  json summary;
};

/// One run per lambda (same folds and seeds), plus a Welch test of each lambda's
/// per-fold fine posture accuracy against lambda = 0.
inline SweepResult run_lambda_sweep(const Dataset& d, const Taxonomy& tax, const TrainConfig& c,
                                    std::vector<double> lambdas, const std::filesystem::path& root,
                                    const RunOptions& opt = {}) {
  if (std::find(lambdas.begin(), lambdas.end(), 0.0) == lambdas.end()) lambdas.insert(lambdas.begin(), 0.0);
  SweepResult s;
  s.lambdas = lambdas;
  for (double l : lambdas) {
    TrainConfig lc = c;
    lc.lambda = l;
    std::ostringstream name;
    name << "lambda_" << std::fixed << std::setprecision(2) << l;
    s.runs.push_back(run_experiment(d, tax, lc, root / name.str(), opt));
  }
  const auto base_it = std::find(lambdas.begin(), lambdas.end(), 0.0);
  const auto& base = s.runs[static_cast<std::size_t>(base_it - lambdas.begin())].aggregate;
  json rows = json::array();
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const auto& a = s.runs[i].aggregate;
    const auto& acc = a.fold_posture17_accuracy;
    json row{{"lambda", lambdas[i]},
             {"posture17_mean_accuracy", std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size())},
             {"posture3_mean_accuracy", a.summary["posture3"]["accuracy"]}};
    if (lambdas[i] != 0.0) {
      try {
        auto w = welch_t_test(acc, base.fold_posture17_accuracy);
        row["welch_vs_lambda0"] = {{"t", w.t}, {"df", w.df}, {"p", w.p}};
      } catch (const Error& e) {
        row["welch_vs_lambda0"] = {{"error", e.what()}};
      }
    }
    rows.push_back(row);
  }
  s.summary = {{"scheme", to_string(c.scheme)},
               {"t_test", "Welch, two-sided, per-fold posture17 accuracy vs lambda=0"},
               {"runs", rows}};
  detail::write_text(root / "sweep.json", s.summary.dump(2) + "\n");
  return s;
}

}  // namespace pnet
