// pnet command-line front end. Exit codes: 0 success, 1 failure, 2 usage or
// configuration error, 3 incomplete run (report) or re-score mismatch (evaluate).

#include <CLI11.hpp>
#include <iostream>

#include "pnet/cli.hpp"
#include "pnet/synthetic.hpp"

namespace {

using namespace pnet;
using namespace pnet::cli;

struct Flags {
  std::optional<std::string> config, data, cache, out, taxonomy, delimiter, scheme, task, baseline, lambda_sweep;
  std::optional<std::size_t> stride, epochs, batch_size, folds, trim;
  std::optional<double> lambda, lr, bn_momentum;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> only_folds;
  bool no_transpose = false, augment = false, augment_test = false, quiet = false;
};

void add_data_flags(CLI::App* c, Flags& f) {
  c->add_option("--config", f.config, "JSON run config; flags override its values");
  c->add_option("--data", f.data, std::string("Dataset root (default: $") + kDatasetEnv + ")");
  c->add_option("--cache", f.cache, "Preprocessing cache directory (default: pnet-cache)");
  c->add_option("--taxonomy", f.taxonomy, "Posture taxonomy file ('id category [stem]' per line)");
  c->add_option("--delimiter", f.delimiter, "Field delimiter of raw files")->check(CLI::IsMember({"whitespace", "comma"}));
  c->add_flag("--no-transpose", f.no_transpose, "Raw records are already 32 rows x 64 columns");
  c->add_option("--trim", f.trim, "Frames trimmed from each sequence end");
  c->add_flag("-q,--quiet", f.quiet, "No progress output");
}

void add_train_flags(CLI::App* c, Flags& f) {
  c->add_option("--out", f.out, "Run directory")->required();
  c->add_option("--stride", f.stride, "Keep every n-th frame of each sequence");
  c->add_option("--scheme", f.scheme, "kfold | loso | sequence_kfold")
      ->check(CLI::IsMember({"kfold", "loso", "sequence_kfold"}));
  c->add_option("--task", f.task, "posture17 | posture3")->check(CLI::IsMember({"posture17", "posture3"}));
  c->add_option("--lambda", f.lambda, "User-loss weight (default 0.5 for kfold, 0.2 for loso)");
  c->add_option("--lambda-sweep", f.lambda_sweep, "Comma-separated lambdas; one run each plus Welch tests vs 0");
  c->add_option("--seed", f.seed, "Master seed");
  c->add_option("--epochs", f.epochs, "Training epochs");
  c->add_option("--batch-size", f.batch_size, "Minibatch size");
  c->add_option("--lr", f.lr, "Base learning rate");
  c->add_option("--bn-momentum", f.bn_momentum, "Batch-norm running-statistics momentum");
  c->add_option("--folds", f.folds, "Number of folds for k-fold schemes");
  c->add_option("--only-fold", f.only_folds, "Run only these folds (repeatable)");
  c->add_flag("--augment", f.augment, "Augment training batches");
  c->add_flag("--augment-test", f.augment_test, "Augment test frames");
  c->add_option("--baseline", f.baseline, "Train a baseline instead of the CNN")
      ->check(CLI::IsMember({"knn", "trees", "mlp"}));
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--lambda-sweep: bad value '" + item + "'");
    }
  }
  return out;
}

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config ? load_run_config(*f.config) : RunConfig{};
  if (f.data) c.dataset_root = *f.data;
  if (f.cache) c.cache_dir = *f.cache;
  if (f.out) c.output_dir = *f.out;
  if (f.taxonomy) c.taxonomy_file = *f.taxonomy;
  if (f.delimiter) c.format.delimiter = *f.delimiter == "comma" ? Delimiter::comma : Delimiter::whitespace;
  if (f.no_transpose) {
    c.format.transpose = false;
    c.format.record_rows = kFrameH;
    c.format.record_cols = kFrameW;
  }
  if (f.trim) c.preprocess.trim = *f.trim;
  if (f.stride) c.frame_stride = *f.stride;
  if (f.scheme) c.train.scheme = parse_scheme(*f.scheme);
  if (f.task) c.task = parse_task(*f.task);
  if (f.lambda) c.train.lambda = *f.lambda, c.lambda_explicit = true;
  if (f.lambda_sweep) c.lambda_sweep = parse_list(*f.lambda_sweep);
  if (f.seed) c.train.seed = *f.seed, c.baselines.trees.seed = *f.seed, c.baselines.mlp.seed = *f.seed;
  if (f.epochs) c.train.epochs = *f.epochs;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.lr) c.train.base_lr = *f.lr;
  if (f.bn_momentum) c.train.model.bn_momentum = *f.bn_momentum;
  if (f.folds) c.train.folds = *f.folds;
  if (!f.only_folds.empty()) c.train.only_folds = f.only_folds;
  if (f.augment) c.train.augment_train = true;
  if (f.augment_test) c.train.augment_test = true;
  if (f.baseline) c.baseline = parse_baseline(*f.baseline);
  c.finalize();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multitask pressure-map posture and subject recognition"};
  app.require_subcommand(1);
  Flags f;

  auto* pre = app.add_subcommand("preprocess", "Parse, filter and cache the dataset; write manifest and removal report");
  add_data_flags(pre, f);

  auto* tr = app.add_subcommand("train", "Train and evaluate over the configured fold scheme");
  add_data_flags(tr, f);
  add_train_flags(tr, f);

  std::string run_dir;
  EvaluateOptions eo;
  std::optional<std::size_t> eval_fold;
  auto* ev = app.add_subcommand("evaluate", "Re-score saved fold checkpoints of a run");
  ev->add_option("run", run_dir, "Run directory")->required();
  ev->add_option("--fold", eval_fold, "Only this fold");
  ev->add_flag("--augment-test", eo.augment_test, "Augment test frames");
  ev->add_flag("-q,--quiet", f.quiet, "No progress output");

  auto* rep = app.add_subcommand("report", "Summarize a run directory (tables, curves, confusion grids)");
  rep->add_option("run", run_dir, "Run directory")->required();

  std::string file;
  std::size_t index = 0;
  auto* fd = app.add_subcommand("frame-dump", "ASCII rendering of a raw frame beside its preprocessed version");
  fd->add_option("file", file, "Raw sequence file")->required()->check(CLI::ExistingFile);
  fd->add_option("--index", index, "Frame index within the file");
  fd->add_option("--delimiter", f.delimiter, "Field delimiter")->check(CLI::IsMember({"whitespace", "comma"}));
  fd->add_flag("--no-transpose", f.no_transpose, "Raw records are already 32 rows x 64 columns");

  std::uint64_t aug_seed = 1;
  std::size_t draws = 10000;
  auto* as = app.add_subcommand("augment-stats", "Empirical firing frequency of each augmentation step");
  as->add_option("--seed", aug_seed, "Seed");
  as->add_option("--draws", draws, "Number of draws")->check(CLI::PositiveNumber);

  std::string synth_out;
  synthetic::Options so;
  auto* sy = app.add_subcommand("synth", "Write a synthetic stand-in dataset in the raw on-disk layout");
  sy->add_option("out", synth_out, "Output root")->required();
  sy->add_option("--subjects", so.subjects, "Subjects")->check(CLI::Range(1, 99));
  sy->add_option("--frames", so.frames, "Frames per sequence");
  sy->add_option("--seed", so.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::ostream* log = f.quiet ? nullptr : &std::cerr;
  try {
    if (*pre) {
      preprocess(resolve(f), log);
    } else if (*tr) {
      train(resolve(f), log);
      if (log) *log << "run complete: " << *f.out << '\n';
    } else if (*ev) {
      eo.fold = eval_fold;
      if (evaluate(run_dir, eo, std::cout, log) != 0) {
        std::cerr << "pnet: re-scored accuracy differs from stored metrics\n";
        return 3;
      }
    } else if (*rep) {
      return report(run_dir, std::cout) == 0 ? 0 : 3;
    } else if (*fd) {
      RunConfig c;
      if (f.delimiter) c.format.delimiter = *f.delimiter == "comma" ? Delimiter::comma : Delimiter::whitespace;
      if (f.no_transpose) c.format = {c.format.delimiter, kFrameH, kFrameW, false};
      frame_dump(file, index, c.format, c.preprocess, std::cout);
    } else if (*as) {
      print_augment_stats(augment_stats(AugmentPolicy{}, aug_seed, draws), aug_seed, std::cout);
    } else if (*sy) {
      synthetic::write_dataset(synth_out, so);
      std::cout << "wrote " << so.subjects << " subjects x " << kNumPostures << " postures to " << synth_out << '\n';
    }
  } catch (const UsageError& e) {
    std::cerr << "pnet: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "pnet: config: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "pnet: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "pnet: unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
