#pragma once

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pnet/baselines.hpp"
#include "pnet/binio.hpp"
#include "pnet/dataio.hpp"
#include "pnet/harness.hpp"
#include "pnet/signal.hpp"

namespace pnet::cli {

namespace fs = std::filesystem;

inline constexpr const char* kDatasetEnv = "PNET_DATASET";
inline constexpr const char* kToolVersion = "pnet 1.0";

enum class Task { posture17, posture3 };

inline std::string to_string(Task t) { return t == Task::posture17 ? "posture17" : "posture3"; }

inline Task parse_task(const std::string& s) {
  if (s == "posture17") return Task::posture17;
  if (s == "posture3") return Task::posture3;
  throw ConfigError("unknown task '" + s + "' (posture17 | posture3)");
}

/// Everything a command needs; serialized verbatim into each run directory.
struct RunConfig {
  fs::path dataset_root;
  fs::path cache_dir = "pnet-cache";
  fs::path output_dir;
  fs::path taxonomy_file;  // empty: built-in taxonomy
  FrameFormat format;
  PreprocessOptions preprocess;
  std::size_t frame_stride = 1;
  Task task = Task::posture17;
  std::optional<BaselineKind> baseline;
  BaselineConfig baselines;
  TrainConfig train;
  bool lambda_explicit = false;  // otherwise lambda follows the scheme
  std::vector<double> lambda_sweep;

  /// Fills defaults that depend on other fields and checks the result.
  void finalize() {
    if (dataset_root.empty())
      if (const char* env = std::getenv(kDatasetEnv)) dataset_root = env;
    if (!lambda_explicit) train.lambda = default_lambda(train.scheme);
    if (frame_stride == 0) throw ConfigError("frame_stride must be >= 1");
    if (task == Task::posture3) train.model.num_postures = kNumCategories;
    train.validate();
  }

  Taxonomy taxonomy() const { return taxonomy_file.empty() ? default_taxonomy() : load_taxonomy(taxonomy_file); }
};

inline json format_json(const FrameFormat& f) {
  return {{"delimiter", f.delimiter == Delimiter::comma ? "comma" : "whitespace"},
          {"record_rows", f.record_rows},
          {"record_cols", f.record_cols},
          {"transpose", f.transpose}};
}

inline json to_json(const RunConfig& c) {
  json j{{"dataset_root", c.dataset_root.string()},
         {"cache_dir", c.cache_dir.string()},
         {"output_dir", c.output_dir.string()},
         {"taxonomy_file", c.taxonomy_file.string()},
         {"format", format_json(c.format)},
         {"preprocess",
          {{"full_scale", c.preprocess.full_scale},
           {"trim", c.preprocess.trim},
           {"empty_threshold", c.preprocess.empty_threshold}}},
         {"frame_stride", c.frame_stride},
         {"task", to_string(c.task)},
         {"baseline", c.baseline ? json(to_string(*c.baseline)) : json(nullptr)},
         {"baselines",
          {{"knn_k", c.baselines.knn_k},
           {"n_trees", c.baselines.trees.n_trees},
           {"max_depth", c.baselines.trees.max_depth},
           {"seed", c.baselines.trees.seed},
           {"mlp_epochs", c.baselines.mlp.epochs},
           {"mlp_lr", c.baselines.mlp.lr},
           {"mlp_batch_size", c.baselines.mlp.batch_size}}},
         {"train", train_config_json(c.train)},
         {"lambda_sweep", c.lambda_sweep}};
  return j;
}

/// Overlays a config document onto `c`. Unknown keys are errors.
inline void apply_json(RunConfig& c, const json& j) {
  using detail::reject_unknown;
  using detail::take;
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  reject_unknown(j,
                 {"dataset_root", "cache_dir", "output_dir", "taxonomy_file", "format", "preprocess", "frame_stride",
                  "task", "baseline", "baselines", "train", "lambda_sweep"},
                 "");
  std::string s;
  if (j.contains("dataset_root")) take(j, "dataset_root", s, ""), c.dataset_root = s;
  if (j.contains("cache_dir")) take(j, "cache_dir", s, ""), c.cache_dir = s;
  if (j.contains("output_dir")) take(j, "output_dir", s, ""), c.output_dir = s;
  if (j.contains("taxonomy_file")) take(j, "taxonomy_file", s, ""), c.taxonomy_file = s;
  if (j.contains("format")) {
    const auto& f = j["format"];
    reject_unknown(f, {"delimiter", "record_rows", "record_cols", "transpose"}, "format.");
    if (f.contains("delimiter")) {
      take(f, "delimiter", s, "format.");
      if (s == "comma") c.format.delimiter = Delimiter::comma;
      else if (s == "whitespace") c.format.delimiter = Delimiter::whitespace;
      else throw ConfigError("format.delimiter: expected comma | whitespace");
    }
    take(f, "record_rows", c.format.record_rows, "format.");
    take(f, "record_cols", c.format.record_cols, "format.");
    take(f, "transpose", c.format.transpose, "format.");
  }
  if (j.contains("preprocess")) {
    const auto& p = j["preprocess"];
    reject_unknown(p, {"full_scale", "trim", "empty_threshold"}, "preprocess.");
    take(p, "full_scale", c.preprocess.full_scale, "preprocess.");
    take(p, "trim", c.preprocess.trim, "preprocess.");
    take(p, "empty_threshold", c.preprocess.empty_threshold, "preprocess.");
  }
  take(j, "frame_stride", c.frame_stride, "");
  if (j.contains("task")) take(j, "task", s, ""), c.task = parse_task(s);
  if (j.contains("baseline")) {
    if (j["baseline"].is_null()) c.baseline.reset();
    else take(j, "baseline", s, ""), c.baseline = parse_baseline(s);
  }
  if (j.contains("baselines")) {
    const auto& b = j["baselines"];
    reject_unknown(b, {"knn_k", "n_trees", "max_depth", "seed", "mlp_epochs", "mlp_lr", "mlp_batch_size"},
                   "baselines.");
    take(b, "knn_k", c.baselines.knn_k, "baselines.");
    take(b, "n_trees", c.baselines.trees.n_trees, "baselines.");
    take(b, "max_depth", c.baselines.trees.max_depth, "baselines.");
    take(b, "seed", c.baselines.trees.seed, "baselines.");
    c.baselines.mlp.seed = c.baselines.trees.seed;
    take(b, "mlp_epochs", c.baselines.mlp.epochs, "baselines.");
    take(b, "mlp_lr", c.baselines.mlp.lr, "baselines.");
    take(b, "mlp_batch_size", c.baselines.mlp.batch_size, "baselines.");
  }
  if (j.contains("train")) {
    apply_config_json(c.train, j["train"]);
    if (j["train"].contains("lambda")) c.lambda_explicit = true;
  }
  take(j, "lambda_sweep", c.lambda_sweep, "");
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

// ---------------------------------------------------------------------------
// preprocess

struct CacheInfo {
  fs::path dir;
  std::string key;
  bool hit = false;
  std::size_t sequences = 0;
  std::size_t frames = 0;
};

struct PreprocessOutcome {
  CacheInfo cache;
  std::vector<CleanSequence> sequences;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Hash of everything the cached output depends on, including raw file bytes.
inline std::string cache_key(const RunConfig& c, const DatasetManifest& m) {
  std::string desc = c.preprocess.describe() + "|" + format_json(c.format).dump() + "|" +
                     format_taxonomy(m.taxonomy) + "|" + kToolVersion;
  std::uint64_t h = fnv1a(desc);
  for (const auto& e : m.entries) {
    h = fnv1a(e.path + "\t" + std::to_string(e.subject) + "\t" + std::to_string(e.posture) + "\n", h);
    h = fnv1a(read_file_bytes(c.dataset_root / e.path), h);
  }
  return hex64(h);
}

inline std::string seq_file_name(std::size_t i) {
  std::ostringstream os;
  os << "seq_" << std::setw(5) << std::setfill('0') << i << ".pseq";
  return os.str();
}

inline std::string removal_report_text(const RunConfig& c, const RemovalReport& r,
                                       const std::vector<std::string>& trimmed_away, std::size_t raw_sequences,
                                       std::size_t raw_frames, std::size_t out_of_range, std::size_t kept_frames) {
  std::ostringstream os;
  os << "# pnet removal report\n"
     << "preprocess\t" << c.preprocess.describe() << '\n'
     << "raw_sequences\t" << raw_sequences << '\n'
     << "raw_frames\t" << raw_frames << '\n'
     << "out_of_range_values\t" << out_of_range << '\n'
     << "sequences_too_short\t" << trimmed_away.size() << '\n'
     << "empty_frames_removed\t" << r.empty_frames.size() << '\n'
     << "sequences_dropped_empty\t" << r.dropped_sequences.size() << '\n'
     << "frames_kept\t" << kept_frames << '\n';
  for (const auto& s : trimmed_away) os << "too_short\t" << s << '\n';
  for (const auto& s : r.dropped_sequences) os << "dropped\t" << s << '\n';
  for (const auto& f : r.empty_frames) os << "empty_frame\t" << f.source << '\t' << f.index << '\n';
  return os.str();
}

inline std::vector<CleanSequence> load_cache_dir(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw LoadError("cache " + dir.string() + " has no index.json");
  auto idx = json::parse(in);
  std::vector<CleanSequence> out;
  const std::size_t n = idx.at("sequences").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) out.push_back(load_sequence(dir / seq_file_name(i)));
  return out;
}

/// Runs the signal pipeline once per distinct input and reuses the cache afterwards.
inline PreprocessOutcome preprocess(const RunConfig& c, std::ostream* log = nullptr) {
  if (c.dataset_root.empty())
    throw UsageError(std::string("no dataset root: pass --data or set ") + kDatasetEnv + " (layout " + kLayoutRule +
                     ")");
  const auto tax = c.taxonomy();
  auto manifest = build_manifest(c.dataset_root, tax);
  if (manifest.entries.empty())
    throw IngestError("no sequence files under " + c.dataset_root.string() + "; expected layout " + kLayoutRule);
  PreprocessOutcome out;
  out.cache.key = cache_key(c, manifest);
  out.cache.dir = c.cache_dir / out.cache.key;
  if (fs::exists(out.cache.dir / "COMPLETE")) {
    out.cache.hit = true;
    out.sequences = load_cache_dir(out.cache.dir);
  } else {
    std::vector<CleanSequence> clean;
    std::vector<std::string> too_short, warnings = manifest.warnings;
    std::size_t raw_frames = 0, oor = 0;
    for (const auto& e : manifest.entries) {
      auto raw = parse_frame_file(c.dataset_root / e.path, c.format, e.subject, e.posture);
      raw.source = e.path;
      raw_frames += raw.length();
      oor += raw.out_of_range;
      if (auto s = preprocess_sequence(raw, c.preprocess, &warnings)) clean.push_back(std::move(*s));
      else too_short.push_back(e.path);
    }
    auto dropped = drop_empty_samples(std::move(clean), c.preprocess.empty_threshold);
    out.sequences = std::move(dropped.kept);
    std::size_t kept = 0;
    for (const auto& s : out.sequences) kept += s.length();

    const fs::path tmp = c.cache_dir / (out.cache.key + ".tmp" + std::to_string(::getpid()));
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    for (std::size_t i = 0; i < out.sequences.size(); ++i) save_sequence(tmp / seq_file_name(i), out.sequences[i]);
    detail::write_text(tmp / "manifest.txt", format_manifest(manifest));
    detail::write_text(tmp / "removal_report.txt",
                       removal_report_text(c, dropped.report, too_short, manifest.entries.size(), raw_frames, oor,
                                           kept));
    json idx{{"key", out.cache.key},
             {"tool", kToolVersion},
             {"preprocess", c.preprocess.describe()},
             {"sequences", out.sequences.size()},
             {"frames", kept},
             {"warnings", warnings}};
    detail::write_text(tmp / "index.json", idx.dump(2) + "\n");
    detail::write_text(tmp / "COMPLETE", "");
    std::error_code ec;
    fs::rename(tmp, out.cache.dir, ec);
    if (ec) {  // another process finished the same key first
      fs::remove_all(tmp);
      if (!fs::exists(out.cache.dir / "COMPLETE")) throw IngestError("cannot install cache " + out.cache.dir.string());
    }
  }
  out.cache.sequences = out.sequences.size();
  for (const auto& s : out.sequences) out.cache.frames += s.length();
  if (log) {
    *log << (out.cache.hit ? "cache hit " : "cache written ") << out.cache.dir.string() << '\n'
         << "sequences " << out.cache.sequences << ", frames " << out.cache.frames << '\n';
    if (!out.cache.hit) *log << "removal report: " << (out.cache.dir / "removal_report.txt").string() << '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// train

inline Taxonomy category_taxonomy() {
  Taxonomy t;
  for (int c = 0; c < kNumCategories; ++c)
    t.entries[c + 1] = {static_cast<Category>(c), to_string(static_cast<Category>(c))};
  return t;
}

/// Dataset and taxonomy for the configured task granularity.
inline std::pair<Dataset, Taxonomy> task_dataset(const RunConfig& c, const std::vector<CleanSequence>& seqs) {
  auto d = assemble_dataset(seqs, c.frame_stride);
  auto tax = c.taxonomy();
  if (c.task == Task::posture3) {
    const auto coarse = coarse_map(tax);
    for (auto& p : d.posture) p = coarse[static_cast<std::size_t>(p)];
    tax = category_taxonomy();
  }
  return {std::move(d), std::move(tax)};
}

inline json run_manifest(const RunConfig& c, const std::string& kind, const CacheInfo& cache, const Dataset& d,
                         const FoldPlan& plan) {
  json folds = json::array();
  for (std::size_t f = 0; f < plan.folds.size(); ++f)
    if (c.train.only_folds.empty() || kind == "baseline" ||
        std::find(c.train.only_folds.begin(), c.train.only_folds.end(), f) != c.train.only_folds.end())
      folds.push_back(fold_dir_name(f));
  json subjects = json::array();
  {
    std::vector<int> s(d.subject);
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    for (int v : s) subjects.push_back(v + 1);
  }
  return {{"tool", kToolVersion},
          {"kind", kind},
          {"config", to_json(c)},
          {"cache_key", cache.key},
          {"dataset", {{"frames", d.size()}, {"sequences", cache.sequences}, {"subjects", subjects}}},
          {"expected_folds", folds}};
}

inline std::string lambda_dir_name(double l) {
  std::ostringstream os;
  os << "lambda_" << std::fixed << std::setprecision(2) << l;
  return os.str();
}

/// CNN experiment, lambda sweep, or baseline, depending on the config.
inline void train(const RunConfig& c, std::ostream* log = nullptr) {
  if (c.output_dir.empty()) throw UsageError("no output directory: pass --out");
  auto pre = preprocess(c, log);
  auto [d, tax] = task_dataset(c, pre.sequences);
  if (d.size() == 0) throw IngestError("no frames left after preprocessing");
  const auto plan = make_plan(d, c.train);
  if (auto err = check_plan(plan, d.size(), d.subject)) throw UsageError("fold plan invalid: " + *err);
  RunLock lock(c.output_dir);
  RunOptions opt;
  opt.log = log;

  if (c.baseline) {
    detail::write_text(c.output_dir / "run.json", run_manifest(c, "baseline", pre.cache, d, plan).dump(2) + "\n");
    BaselineConfig bc = c.baselines;
    bc.kind = *c.baseline;
    bc.num_postures = c.train.model.num_postures;
    run_baseline(d, tax, bc, plan, c.output_dir, false);
  } else if (!c.lambda_sweep.empty()) {
    auto m = run_manifest(c, "sweep", pre.cache, d, plan);
    std::vector<double> ls = c.lambda_sweep;
    if (std::find(ls.begin(), ls.end(), 0.0) == ls.end()) ls.insert(ls.begin(), 0.0);
    json dirs = json::array();
    for (double l : ls) dirs.push_back(lambda_dir_name(l));
    m["sweep_dirs"] = dirs;
    detail::write_text(c.output_dir / "run.json", m.dump(2) + "\n");
    for (double l : ls) {
      RunConfig sub = c;
      sub.train.lambda = l;
      sub.lambda_explicit = true;
      sub.lambda_sweep.clear();
      sub.output_dir = c.output_dir / lambda_dir_name(l);
      fs::create_directories(sub.output_dir);
      detail::write_text(sub.output_dir / "run.json", run_manifest(sub, "experiment", pre.cache, d, plan).dump(2) + "\n");
    }
    run_lambda_sweep(d, tax, c.train, ls, c.output_dir, opt);
  } else {
    detail::write_text(c.output_dir / "run.json", run_manifest(c, "experiment", pre.cache, d, plan).dump(2) + "\n");
    run_experiment(d, tax, c.train, c.output_dir, [&] {
      auto o = opt;
      o.lock = false;
      return o;
    }());
  }
}

// ---------------------------------------------------------------------------
// report

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw LoadError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(p.string() + ": " + e.what());
  }
}

inline std::string fmt_pct(const json& v) {
  if (v.is_null()) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << v.get<double>();
  return os.str();
}

inline std::vector<std::string> missing_folds(const fs::path& run_dir, const json& manifest) {
  std::vector<std::string> missing;
  for (const auto& f : manifest.at("expected_folds"))
    if (!fs::exists(run_dir / f.get<std::string>() / "metrics.json")) missing.push_back(f.get<std::string>());
  return missing;
}

inline void report_curves(const fs::path& run_dir, const json& manifest, std::ostream& out) {
  std::map<std::size_t, std::vector<std::vector<double>>> by_epoch;
  for (const auto& f : manifest.at("expected_folds")) {
    std::ifstream in(run_dir / f.get<std::string>() / "curves.tsv");
    if (!in) return;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::size_t epoch;
      std::vector<double> v(7);
      ls >> epoch;
      for (auto& x : v) ls >> x;
      by_epoch[epoch].push_back(v);
    }
  }
  if (by_epoch.empty()) return;
  out << "\nLoss curves (mean over folds)\n"
      << "epoch\tlr\tuser_loss\tposture_loss\tcombined_loss\tuser_acc\tposture_acc\n";
  for (const auto& [e, rows] : by_epoch) {
    std::vector<double> m(7, 0.0);
    for (const auto& r : rows)
      for (std::size_t i = 0; i < 7; ++i) m[i] += r[i] / static_cast<double>(rows.size());
    out << e << '\t' << std::setprecision(4) << m[0] << '\t' << m[1] << '\t' << m[2] << '\t' << m[3] << '\t' << m[5]
        << '\t' << m[6] << '\n';
  }
}

inline void report_grid(const fs::path& path, const std::string& title, std::ostream& out) {
  if (!fs::exists(path)) return;
  out << '\n' << title << " (rows: true, cols: predicted)\n" << read_file_bytes(path);
}

inline int report_experiment(const fs::path& run_dir, std::ostream& out) {
  const auto manifest = read_json(run_dir / "run.json");
  const auto missing = missing_folds(run_dir, manifest);
  const auto& cfg = manifest.at("config");
  out << "Run " << run_dir.string() << '\n'
      << "kind " << manifest.at("kind").get<std::string>() << ", scheme "
      << cfg.at("train").at("scheme").get<std::string>() << ", task " << cfg.at("task").get<std::string>();
  if (manifest.at("kind") == "experiment") out << ", lambda " << cfg.at("train").at("lambda").get<double>();
  else out << ", baseline " << cfg.at("baseline").get<std::string>();
  out << ", seed " << cfg.at("train").at("seed").get<std::uint64_t>() << '\n';
  if (!missing.empty() || !fs::exists(run_dir / "aggregate.json")) {
    out << "INCOMPLETE run: missing";
    for (const auto& m : missing) out << ' ' << m;
    if (missing.empty()) out << " aggregate.json";
    out << '\n';
    return 2;
  }
  const auto agg = read_json(run_dir / "aggregate.json");
  const bool is3 = cfg.at("task") == "posture3";
  out << "\nPosture accuracy (%), mean over folds\n"
      << (is3 ? "" : "17-class\t") << "3-category\n";
  if (!is3) out << fmt_pct(agg.at("posture17").at("accuracy")) << '\t';
  out << fmt_pct(agg.at("posture3").at("accuracy")) << '\n';

  const char* cats[] = {"supine", "right", "left"};
  out << "\nPosture category precision (%)\nsupine\tright\tleft\tmean\n";
  const auto& pc = agg.at("posture3").at("classes");
  for (std::size_t c = 0; c < 3; ++c) out << fmt_pct(pc.at(c).at("precision")) << '\t';
  out << fmt_pct(agg.at("posture3").at("mean_precision")) << '\n';

  if (agg.contains("subject")) {
    out << "\nSubject identification accuracy (%) by posture category\nsupine\tright\tleft\toverall\n";
    for (const char* c : cats) out << fmt_pct(agg.at("subject_accuracy_by_category").at(c)) << '\t';
    out << fmt_pct(agg.at("subject").at("accuracy")) << '\n';
  }

  out << "\nPer fold\nfold\theld_out\tposture17\tposture3\tsubject\n";
  for (const auto& f : agg.at("per_fold")) {
    out << f.at("fold").get<std::size_t>() << '\t'
        << (f.contains("held_out_subject") ? std::to_string(f["held_out_subject"].get<int>()) : "-") << '\t'
        << fmt_pct(f.at("posture17_accuracy")) << '\t' << fmt_pct(f.at("posture3_accuracy")) << '\t'
        << (f.contains("subject_accuracy") ? fmt_pct(f["subject_accuracy"]) : "-") << '\n';
  }
  report_curves(run_dir, manifest, out);
  report_grid(run_dir / "confusion_posture3_pooled.tsv", "Pooled 3-category confusion", out);
  report_grid(run_dir / "confusion_posture17_pooled.tsv", "Pooled posture confusion", out);
  return 0;
}

/// Renders a run directory to `out` without modifying it. Returns 0 when the
/// run is complete and 2 when folds are missing.
inline int report(const fs::path& run_dir, std::ostream& out) {
  if (!fs::exists(run_dir / "run.json")) throw UsageError(run_dir.string() + " is not a run directory (no run.json)");
  const auto manifest = read_json(run_dir / "run.json");
  if (manifest.at("kind") != "sweep") return report_experiment(run_dir, out);
  int rc = 0;
  std::vector<std::string> incomplete;
  for (const auto& d : manifest.at("sweep_dirs")) {
    const auto sub = run_dir / d.get<std::string>();
    if (!fs::exists(sub / "aggregate.json") || !missing_folds(sub, read_json(sub / "run.json")).empty())
      incomplete.push_back(d.get<std::string>());
  }
  out << "Lambda sweep " << run_dir.string() << '\n';
  if (!incomplete.empty() || !fs::exists(run_dir / "sweep.json")) {
    out << "INCOMPLETE sweep: unfinished";
    for (const auto& s : incomplete) out << ' ' << s;
    if (incomplete.empty()) out << " sweep.json";
    out << '\n';
    rc = 2;
  } else {
    const auto sw = read_json(run_dir / "sweep.json");
    out << sw.at("t_test").get<std::string>() << "\nlambda\tposture17\tposture3\tt\tdf\tp\n";
    for (const auto& r : sw.at("runs")) {
      out << std::fixed << std::setprecision(2) << r.at("lambda").get<double>() << '\t'
          << fmt_pct(r.at("posture17_mean_accuracy")) << '\t' << fmt_pct(r.at("posture3_mean_accuracy"));
      if (r.contains("welch_vs_lambda0") && r["welch_vs_lambda0"].contains("p")) {
        const auto& w = r["welch_vs_lambda0"];
        out << '\t' << std::setprecision(3) << w["t"].get<double>() << '\t' << w["df"].get<double>() << '\t'
            << std::setprecision(4) << w["p"].get<double>();
      } else {
        out << "\t-\t-\t-";
      }
      out << '\n';
    }
    out.unsetf(std::ios::floatfield);
  }
  for (const auto& d : manifest.at("sweep_dirs")) {
    const auto sub = run_dir / d.get<std::string>();
    if (!fs::exists(sub / "run.json")) continue;
    out << "\n== " << d.get<std::string>() << " ==\n";
    rc = std::max(rc, report_experiment(sub, out));
  }
  return rc;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  std::optional<std::size_t> fold;
  bool augment_test = false;
};

/// Re-scores saved fold checkpoints on their test sets. Returns 1 when a
/// non-augmented re-score disagrees with the stored metrics.
inline int evaluate(const fs::path& run_dir, const EvaluateOptions& eo, std::ostream& out, std::ostream* log = nullptr) {
  const auto manifest = read_json(run_dir / "run.json");
  if (manifest.at("kind") != "experiment")
    throw UsageError("evaluate needs a CNN experiment directory (sweeps: pass one lambda_* subdirectory)");
  RunConfig c;
  apply_json(c, manifest.at("config"));
  c.finalize();
  auto pre = preprocess(c, log);
  if (pre.cache.key != manifest.at("cache_key"))
    throw UsageError("dataset or preprocessing changed since this run (cache key " + pre.cache.key + ", run used " +
                     manifest.at("cache_key").get<std::string>() + ")");
  auto [d, tax] = task_dataset(c, pre.sequences);
  const auto plan = make_plan(d, c.train);
  const auto coarse = coarse_map(tax);
  int rc = 0;
  out << "fold\tposture17\tstored\tposture3\tsubject\n";
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    if (eo.fold && *eo.fold != f) continue;
    const auto dir = run_dir / fold_dir_name(f);
    if (!fs::exists(dir / "model.pnet")) continue;
    auto ck = load_checkpoint<float>(dir / "model.pnet");
    TrainConfig fc = c.train;
    fc.seed = derive_seed(c.train.seed, 100 + f);
    SeededRng rng(derive_seed(fc.seed, 0x7E57));
    auto rep = evaluate_model(ck.params, ck.config, d, plan.folds[f].test, coarse, kNumCategories,
                              c.train.scheme != Scheme::loso, c.train.eval_batch_size,
                              eo.augment_test ? &c.train.augment : nullptr, &rng);
    const double acc = compute_metrics(rep.posture_fine).accuracy;
    const auto stored = read_json(dir / "metrics.json").at("posture17").at("accuracy").get<double>();
    out << f << '\t' << fmt_pct(acc) << '\t' << fmt_pct(stored) << '\t'
        << fmt_pct(compute_metrics(rep.posture_coarse).accuracy) << '\t'
        << (rep.subject ? fmt_pct(compute_metrics(*rep.subject).accuracy) : "-") << '\n';
    if (!eo.augment_test && !c.train.augment_test && acc != stored) rc = 1;
  }
  return rc;
}

// ---------------------------------------------------------------------------
// frame-dump and augment-stats

inline constexpr std::string_view kShades = " .:-=+*#%@";

/// One character per cell; values are clamped to [0,1] and rounded to the nearest shade.
inline std::vector<std::string> ascii_rows(const float* f, std::size_t h, std::size_t w) {
  std::vector<std::string> rows(h, std::string(w, ' '));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double v = std::clamp(static_cast<double>(f[r * w + c]), 0.0, 1.0);
      auto i = static_cast<std::size_t>(std::lround(v * static_cast<double>(kShades.size() - 1)));
      rows[r][c] = kShades[i];
    }
  return rows;
}

/// Raw frame `index` (scaled by full scale) beside the same frame after the
/// median filter and normalization.
inline void frame_dump(const fs::path& file, std::size_t index, const FrameFormat& fmt, const PreprocessOptions& p,
                       std::ostream& out) {
  auto raw = parse_frame_file(file, fmt, 0, 0);
  if (index >= raw.length())
    throw UsageError("frame index " + std::to_string(index) + " out of range (" + std::to_string(raw.length()) +
                     " frames in " + file.string() + ")");
  const std::size_t h = raw.frames.dim(1), w = raw.frames.dim(2);
  auto scaled = normalize_frames(raw.frames, p.full_scale);
  auto clean = normalize_frames(median_filter_3d(raw.frames), p.full_scale);
  auto a = ascii_rows(scaled.ptr() + index * h * w, h, w);
  auto b = ascii_rows(clean.ptr() + index * h * w, h, w);
  out << file.string() << " frame " << index << " of " << raw.length() << " (" << h << "x" << w
      << ", row 0 at top, col 0 at left; shades \"" << kShades << "\")\n";
  out << "+" << std::string(w, '-') << "+   +" << std::string(w, '-') << "+\n";
  for (std::size_t r = 0; r < h; ++r) out << "|" << a[r] << "|   |" << b[r] << "|\n";
  out << "+" << std::string(w, '-') << "+   +" << std::string(w, '-') << "+\n";
  out << std::left << std::setw(static_cast<int>(w) + 5) << " raw" << " median filtered + normalized\n";
}

struct AugmentStats {
  std::size_t draws = 0;
  std::array<std::size_t, 4> fired{};
  std::array<double, 4> expected{};
};

inline AugmentStats augment_stats(const AugmentPolicy& p, std::uint64_t seed, std::size_t draws) {
  p.validate();
  SeededRng rng(seed);
  AugmentStats s;
  s.draws = draws;
  s.expected = {p.p_rotate180, p.p_shift_x, p.p_shift_y, p.p_rotate};
  for (std::size_t i = 0; i < draws; ++i) {
    auto d = draw_augment(p, rng);
    for (std::size_t k = 0; k < 4; ++k) s.fired[k] += d.fired[k];
  }
  return s;
}

inline void print_augment_stats(const AugmentStats& s, std::uint64_t seed, std::ostream& out) {
  const char* names[] = {"rotate180", "shift_x", "shift_y", "rotate"};
  out << "draws " << s.draws << ", seed " << seed << "\nstep\texpected\tobserved\n";
  for (std::size_t k = 0; k < 4; ++k)
    out << names[k] << '\t' << std::fixed << std::setprecision(2) << s.expected[k] << '\t' << std::setprecision(4)
        << static_cast<double>(s.fired[k]) / static_cast<double>(s.draws) << '\n';
  out.unsetf(std::ios::floatfield);
}

}  // namespace pnet::cli
