#include "cli.hpp"

#include "fumnet/checkpoint.hpp"
#include "fumnet/diagnostics.hpp"
#include "fumnet/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>

namespace fumnet::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataOptions {
  std::string dataset = "synthetic";  // or a folder dataset root
  std::string train_split, val_split, test_split;
  Index num_classes = 30;
  Index samples_per_class = 30;
  double noise_sigma = 0.1;
  Index max_shift = 4;
  std::uint64_t data_seed = 0;
};

struct RunConfig {
  DataOptions data;
  Index n_way = 5;
  Index k_shot = 1;
  Index query_size = 16;
  std::string variant = "proposed";
  Index episodes = 60000;
  Index eval_interval = 500;
  Index val_episodes = 100;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  std::vector<Index> filter_sizes{16, 32};
  Index k = 2;
  Index c = 64;
  Index d = 64;
  Index image_size = 84;
  std::string output = "runs/train";
};

struct EvalConfig {
  DataOptions data;
  std::string checkpoint;
  std::string split = "test";
  Index episodes = 600;
  Index k_shot = 1;
  Index query_size = 16;
  std::uint64_t seed = 0;
  std::string report;
};

struct GenConfig {
  std::string output;
  Index num_classes = 30;
  Index samples_per_class = 30;
  double noise_sigma = 0.1;
  Index max_shift = 4;
  std::uint64_t seed = 0;
  Index image_size = 84;
};

void add_data_options(CLI::App* app, DataOptions& o) {
  app->add_option("--dataset", o.dataset, "'synthetic' or the root of a folder dataset")->capture_default_str();
  app->add_option("--train-split", o.train_split, "train split file (default <root>/train.txt)");
  app->add_option("--val-split", o.val_split, "validation split file (default <root>/val.txt)");
  app->add_option("--test-split", o.test_split, "test split file (default <root>/test.txt)");
  app->add_option("--num-classes", o.num_classes, "synthetic: total classes")->capture_default_str();
  app->add_option("--samples-per-class", o.samples_per_class, "synthetic: images per class")->capture_default_str();
  app->add_option("--noise-sigma", o.noise_sigma, "synthetic: gaussian pixel noise")->capture_default_str();
  app->add_option("--max-shift", o.max_shift, "synthetic: max circular shift in pixels")->capture_default_str();
  app->add_option("--data-seed", o.data_seed, "synthetic: generator seed")->capture_default_str();
}

std::filesystem::path split_path(const DataOptions& o, Split split) {
  const std::string& given = split == Split::train ? o.train_split : split == Split::val ? o.val_split : o.test_split;
  if (!given.empty()) return given;
  return std::filesystem::path(o.dataset) / (to_string(split) + ".txt");
}

SyntheticConfig synthetic_config(const DataOptions& o, Index image_size) {
  SyntheticConfig s;
  s.num_classes = o.num_classes;
  s.samples_per_class = o.samples_per_class;
  s.noise_sigma = o.noise_sigma;
  s.max_shift = o.max_shift;
  s.seed = o.data_seed;
  s.image_size = image_size;
  return s;
}

void validate_data_options(const DataOptions& o) {
  if (o.dataset == "synthetic") {
    if (o.num_classes < 3 || o.samples_per_class < 6) throw UsageError("synthetic data needs --num-classes >= 3 and --samples-per-class >= 6");
    if (o.noise_sigma < 0 || o.max_shift < 0) throw UsageError("--noise-sigma and --max-shift must be non-negative");
  }
}

DatasetSplits load_splits(const DataOptions& o, Index image_size, std::initializer_list<Split> wanted) {
  PreprocessConfig pre;
  pre.target = image_size;
  if (o.dataset == "synthetic") {
    // The synthetic generator draws at 84 pixels like a real dataset; preprocessing rescales it.
    return make_synthetic_splits(synthetic_config(o, 84), pre);
  }
  DatasetSplits s;
  for (Split split : wanted) {
    Dataset ds = load_folder_dataset(o.dataset, split_path(o, split), split, pre);
    (split == Split::train ? s.train : split == Split::val ? s.val : s.test) = std::move(ds);
  }
  return s;
}

ModelConfig model_config(const RunConfig& r) {
  ModelConfig m;
  m.k = r.k;
  m.c = r.c;
  m.d = r.d;
  m.filter_sizes = r.filter_sizes;
  m.n_way = r.n_way;
  m.variant = parse_variant(r.variant);
  m.image_size = r.image_size;
  return m;
}

nlohmann::json run_config_json(const RunConfig& r) {
  nlohmann::json j;
  j["dataset"] = r.data.dataset;
  j["n_way"] = r.n_way;
  j["k_shot"] = r.k_shot;
  j["query_size"] = r.query_size;
  j["variant"] = r.variant;
  j["episodes"] = r.episodes;
  j["eval_interval"] = r.eval_interval;
  j["val_episodes"] = r.val_episodes;
  j["seed"] = r.seed;
  j["lr"] = r.lr;
  j["filter_sizes"] = r.filter_sizes;
  j["k"] = r.k;
  j["c"] = r.c;
  j["d"] = r.d;
  j["image_size"] = r.image_size;
  if (r.data.dataset == "synthetic") {
    j["num_classes"] = r.data.num_classes;
    j["samples_per_class"] = r.data.samples_per_class;
    j["noise_sigma"] = r.data.noise_sigma;
    j["max_shift"] = r.data.max_shift;
    j["data_seed"] = r.data.data_seed;
  }
  return j;
}

std::string percent(double v, int precision = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << 100.0 * v;
  return os.str();
}

int cmd_train(const RunConfig& r, std::ostream& out) {
  ModelConfig mc;
  try {
    mc = model_config(r);
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  validate_data_options(r.data);
  if (r.k_shot < 1 || r.query_size < 1) throw UsageError("--k-shot and --query-size must be positive");
  if (r.episodes < 1 || r.eval_interval < 1 || r.val_episodes < 1) throw UsageError("--episodes, --eval-interval and --val-episodes must be positive");
  if (!(r.lr > 0)) throw UsageError("--lr must be positive");

  const DatasetSplits splits = load_splits(r.data, r.image_size, {Split::train, Split::val});
  Rng init = make_stream(r.seed, "init");
  FumModel<float> model(mc, init);

  TrainOptions opt;
  opt.episodes = r.episodes;
  opt.eval_interval = r.eval_interval;
  opt.val_episodes = r.val_episodes;
  opt.n_way = r.n_way;
  opt.k_shot = r.k_shot;
  opt.query_size = r.query_size;
  opt.seed = r.seed;
  opt.adam.learning_rate = r.lr;
  opt.output_dir = r.output;
  std::filesystem::create_directories(opt.output_dir);
  {
    std::ofstream cfg(opt.output_dir / "run_config.json");
    cfg << run_config_json(r).dump(2) << '\n';
  }

  out << "training " << to_string(mc.variant) << ", " << r.n_way << "-way " << r.k_shot << "-shot, " << r.episodes
      << " episodes -> " << r.output << '\n';
  const TrainResult result = meta_train(model, splits.train, splits.val, opt, [&](const MetricsRecord& m) {
    out << "episode " << m.episode_index << "  loss " << std::fixed << std::setprecision(4) << m.train_loss
        << "  val " << percent(m.eval_accuracy) << "% ± " << percent(m.ci95) << "  lr " << std::defaultfloat
        << m.learning_rate << '\n'
        << std::flush;
  });
  out << "best validation accuracy: " << percent(result.best_val_accuracy) << "% at episode " << result.best_episode
      << " (" << result.best_checkpoint.string() << ")\n";
  return ExitCode::ok;
}

int cmd_eval(const EvalConfig& e, std::ostream& out) {
  if (e.episodes < 1) throw UsageError("--episodes must be positive");
  if (e.k_shot < 1 || e.query_size < 1) throw UsageError("--k-shot and --query-size must be positive");
  Split split;
  if (e.split == "train") split = Split::train;
  else if (e.split == "val") split = Split::val;
  else if (e.split == "test") split = Split::test;
  else throw UsageError("--split must be train, val or test");
  validate_data_options(e.data);

  const Checkpoint ck = load_checkpoint(e.checkpoint);
  Rng unused(0);
  FumModel<float> model(ck.config, unused);
  apply_checkpoint(ck, model);

  const DatasetSplits splits = load_splits(e.data, ck.config.image_size, {split});
  const Dataset& ds = split == Split::train ? splits.train : split == Split::val ? splits.val : splits.test;
  const EvalReport report = evaluate(model, ds, ck.config.n_way, e.k_shot, e.episodes, e.seed, e.query_size);

  out << "accuracy: " << percent(report.mean_accuracy) << "% ± " << percent(report.ci95_halfwidth) << '\n';
  out << "(" << report.episode_count << " " << ck.config.n_way << "-way " << e.k_shot << "-shot episodes on the "
      << e.split << " split)\n";

  const std::filesystem::path path =
      e.report.empty() ? std::filesystem::path(e.checkpoint).parent_path() / "eval_report.json" : std::filesystem::path(e.report);
  nlohmann::json j;
  j["checkpoint"] = e.checkpoint;
  j["split"] = e.split;
  j["n_way"] = ck.config.n_way;
  j["k_shot"] = e.k_shot;
  j["query_size"] = e.query_size;
  j["seed"] = e.seed;
  j["episode_count"] = report.episode_count;
  j["mean_accuracy"] = report.mean_accuracy;
  j["ci95_halfwidth"] = report.ci95_halfwidth;
  j["per_episode"] = report.per_episode;
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("cannot write eval report " + path.string());
  out << "report written to " << path.string() << '\n';
  return ExitCode::ok;
}

int cmd_gradcheck(const std::string& fault, bool quick, std::ostream& out) {
  if (!fault.empty() && fault != "causal-padding") throw UsageError("unknown fault '" + fault + "'");
  testing_hooks::break_causal_padding = fault == "causal-padding";
  DiagnosticsOptions opt;
  opt.include_default_shape_chain = !quick;
  const DiagnosticsReport report = run_diagnostics(opt, [&](const DiagnosticResult& r) {
    out << (r.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(36) << r.name << r.detail << '\n' << std::flush;
  });
  testing_hooks::break_causal_padding = false;
  out << report.results.size() << " checks, " << report.failures().size() << " failed\n";
  if (report.all_passed()) return ExitCode::ok;
  out << "failed:";
  for (const auto& name : report.failures()) out << ' ' << name;
  out << '\n';
  return ExitCode::failure;
}

int cmd_gen_synthetic(const GenConfig& g, std::ostream& out) {
  SyntheticConfig s;
  s.num_classes = g.num_classes;
  s.samples_per_class = g.samples_per_class;
  s.noise_sigma = g.noise_sigma;
  s.max_shift = g.max_shift;
  s.seed = g.seed;
  s.image_size = g.image_size;
  if (s.num_classes < 3 || s.samples_per_class < 6 || s.noise_sigma < 0 || s.max_shift < 0 || s.image_size < 1) {
    throw UsageError("gen-synthetic needs --num-classes >= 3, --samples-per-class >= 6 and non-negative noise/shift");
  }
  const DatasetSplits splits = partition_classes(generate_synthetic_dataset(s), synthetic_split_sizes(s.num_classes));
  try {
    write_folder_dataset(splits, g.output);
  } catch (const std::filesystem::filesystem_error& e) {
    throw std::runtime_error(std::string("cannot write dataset: ") + e.what());
  }
  out << "wrote " << s.num_classes << " classes (" << splits.train.num_classes() << " train / " << splits.val.num_classes()
      << " val / " << splits.test.num_classes() << " test) to " << g.output << '\n';
  return ExitCode::ok;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

// Reads `key = value` lines ('#' comments and [section] lines ignored) into
// command-line tokens. Keys may use '_' or '-'; "[a, b]" lists become "a,b".
std::vector<std::string> config_tokens(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front()) {
      value = value.substr(1, value.size() - 2);
    } else if (value.size() >= 2 && value.front() == '[' && value.back() == ']') {
      std::string list;
      for (char ch : value.substr(1, value.size() - 2))
        if (ch != ' ' && ch != '\t') list.push_back(ch);
      value = list;
    }
    tokens.push_back("--" + key);
    tokens.push_back(value);
  }
  return tokens;
}

// Inserts the config file's settings right after the subcommand name so any
// flag on the actual command line comes later and wins.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty() || args.empty()) return args;
  std::vector<std::string> out{args.front()};
  for (auto& t : config_tokens(path)) out.push_back(std::move(t));
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot image classification with forget-update modules over channel vector sequences", "fumnet"};
  // Later occurrences win, which is how command-line flags override the config file.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;
  const std::string config_help = "flat key = value file; flags given on the command line take precedence";
  app.require_subcommand(1);
  app.fallthrough(false);

  RunConfig train;
  CLI::App* train_cmd = app.add_subcommand("train", "episodic meta-training");
  train_cmd->add_option("--config", config_path, config_help);
  add_data_options(train_cmd, train.data);
  train_cmd->add_option("--n-way", train.n_way, "classes per episode")->capture_default_str();
  train_cmd->add_option("--k-shot", train.k_shot, "support samples per class")->capture_default_str();
  train_cmd->add_option("--query-size", train.query_size, "queries per episode")->capture_default_str();
  train_cmd->add_option("--variant", train.variant, "proposed, tcn, update_only, gru_head or lstm_head")
      ->capture_default_str()
      ->check(CLI::IsMember({"proposed", "tcn", "update_only", "gru_head", "lstm_head"}));
  train_cmd->add_option("--episodes", train.episodes, "training episode budget")->capture_default_str();
  train_cmd->add_option("--eval-interval", train.eval_interval, "episodes between validation runs")->capture_default_str();
  train_cmd->add_option("--val-episodes", train.val_episodes, "episodes per validation run")->capture_default_str();
  train_cmd->add_option("--seed", train.seed, "root seed for init, sampling and validation")->capture_default_str();
  train_cmd->add_option("--lr", train.lr, "initial Adam learning rate")->capture_default_str();
  train_cmd->add_option("--filter-sizes", train.filter_sizes, "new features per block in each module")
      ->delimiter(',')
      ->expected(2)
      ->capture_default_str();
  train_cmd->add_option("--k", train.k, "causal kernel size")->capture_default_str();
  train_cmd->add_option("--c", train.c, "feature channels (sequence length)")->capture_default_str();
  train_cmd->add_option("--d", train.d, "channel vector dimension")->capture_default_str();
  train_cmd->add_option("--image-size", train.image_size, "input resolution (multiple of 4)")->capture_default_str();
  train_cmd->add_option("--output", train.output, "directory for metrics.jsonl and best.ckpt")->capture_default_str();

  EvalConfig eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on sampled episodes");
  eval_cmd->add_option("--config", config_path, config_help);
  add_data_options(eval_cmd, eval.data);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", eval.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--episodes", eval.episodes, "number of episodes")->capture_default_str();
  eval_cmd->add_option("--k-shot", eval.k_shot, "support samples per class")->capture_default_str();
  eval_cmd->add_option("--query-size", eval.query_size, "queries per episode")->capture_default_str();
  eval_cmd->add_option("--seed", eval.seed, "episode sampling seed")->capture_default_str();
  eval_cmd->add_option("--report", eval.report, "JSON report path (default: next to the checkpoint)");

  std::string fault;
  bool quick = false;
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "run the gradient, causality and shape diagnostics");
  grad_cmd->add_flag("--quick", quick, "skip the full-size shape chain");
  grad_cmd->add_option("--inject-fault", fault, "")->group("");

  GenConfig gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-synthetic", "write a synthetic dataset in the folder layout");
  gen_cmd->add_option("--config", config_path, config_help);
  gen_cmd->add_option("--output", gen.output, "output root")->required();
  gen_cmd->add_option("--num-classes", gen.num_classes, "total classes")->capture_default_str();
  gen_cmd->add_option("--samples-per-class", gen.samples_per_class, "images per class")->capture_default_str();
  gen_cmd->add_option("--noise-sigma", gen.noise_sigma, "gaussian pixel noise")->capture_default_str();
  gen_cmd->add_option("--max-shift", gen.max_shift, "max circular shift in pixels")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--image-size", gen.image_size, "image side length")->capture_default_str();

  std::vector<std::string> expanded;
  try {
    expanded = expand_config(args);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return ExitCode::usage;
  }

  try {
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ExitCode::ok : ExitCode::usage;
  }

  try {
    if (*train_cmd) return cmd_train(train, out);
    if (*eval_cmd) return cmd_eval(eval, out);
    if (*grad_cmd) return cmd_gradcheck(fault, quick, out);
    if (*gen_cmd) return cmd_gen_synthetic(gen, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return ExitCode::usage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return ExitCode::data;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return ExitCode::failure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return ExitCode::failure;
  }
  return ExitCode::usage;
}

}  // namespace fumnet::cli
