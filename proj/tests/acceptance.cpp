// Acceptance suite: one PASS/FAIL line per criterion. Criteria 8, 9 and 12
// train real models and take most of the runtime.

#include "fumnet/checkpoint.hpp"
#include "fumnet/diagnostics.hpp"
#include "fumnet/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace fumnet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string pct(double v) { return fmt(100.0 * v) + "%"; }

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng) {
  Vec<S> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(standard_normal(rng));
  return Tensor<S>(std::move(shape), std::move(v));
}

// Desk-scale model: default architecture with c = d = 16.
ModelConfig desk_config(Variant variant = Variant::proposed) {
  ModelConfig c;
  c.c = 16;
  c.d = 16;
  c.variant = variant;
  return c;
}

const DatasetSplits& synthetic_benchmark() {
  static const DatasetSplits splits = [] {
    SyntheticConfig s;  // 30 classes, 30 samples, noise 0.1, shift 4, seed 0
    return make_synthetic_splits(s, PreprocessConfig{});
  }();
  return splits;
}

constexpr std::uint64_t kTestSeed = 777;
constexpr Index kTestEpisodes = 600;

struct DeskRun {
  TrainResult result;
  EvalReport test;
  double train_seconds = 0.0;
};

DeskRun desk_run(Variant variant, std::uint64_t seed, Index episodes, Index eval_interval, const fs::path& dir) {
  const DatasetSplits& data = synthetic_benchmark();
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng init = make_stream(seed, "init");
  FumModel<float> model(desk_config(variant), init);
  TrainOptions opt;
  opt.episodes = episodes;
  opt.eval_interval = eval_interval;
  opt.val_episodes = 100;
  opt.seed = seed;
  opt.output_dir = dir;
  DeskRun run;
  const auto start = Clock::now();
  run.result = meta_train(model, data.train, data.val, opt, [&](const MetricsRecord& m) {
    std::cout << "    [" << to_string(variant) << " seed " << seed << "] episode " << m.episode_index << " val "
              << pct(m.eval_accuracy) << "\n"
              << std::flush;
  });
  run.train_seconds = seconds_since(start);
  const Checkpoint best = load_checkpoint(run.result.best_checkpoint);
  apply_checkpoint(best, model);
  run.test = evaluate(model, data.test, 5, 1, kTestEpisodes, kTestSeed);
  return run;
}

// 1. Gradient suite in double precision.
Outcome gradient_suite() {
  DiagnosticsOptions opt;
  opt.include_default_shape_chain = false;
  const auto start = Clock::now();
  const DiagnosticsReport report = run_diagnostics(opt);
  const double secs = seconds_since(start);
  int checks = 0;
  std::vector<std::string> failed;
  for (const auto& r : report.results) {
    if (r.name.rfind("grad.", 0) != 0) continue;
    ++checks;
    if (!r.passed) failed.push_back(r.name);
  }
  const bool has_e2e = std::any_of(report.results.begin(), report.results.end(),
                                   [](const auto& r) { return r.name == "grad.end_to_end.proposed"; });
  const ModelConfig tiny = tiny_model_config();
  const bool tiny_ok = tiny.c == 8 && tiny.d == 4 && tiny.n_way == 2 && tiny.filter_sizes == std::vector<Index>{2, 2};
  std::string detail = std::to_string(checks) + " gradient checks at rel tol 1e-4, " + fmt(secs, 1) + " s";
  for (const auto& f : failed) detail += ", failed " + f;
  return {failed.empty() && checks >= 10 && has_e2e && tiny_ok && secs < 120.0, detail};
}

// 2. Causality of the stacked pipeline up to the readout.
Outcome causality_suite() {
  int violations = 0, probes = 0;
  for (Variant v : {Variant::proposed, Variant::update_only, Variant::tcn}) {
    ModelConfig cfg;
    cfg.variant = v;
    Rng rng(21);
    FumModel<double> model(cfg, rng);
    NoGradGuard no_grad;
    const Tensor<double> seq = random_tensor<double>({1, cfg.c, cfg.sequence_width()}, rng);
    const Tensor<double> base = model.sequence_features(seq);
    const Index w = base.dim(2), win = cfg.sequence_width();
    for (Index t = 0; t < cfg.c; ++t) {
      Tensor<double> moved(seq.shape(), seq.data());
      for (Index j = 0; j < win; ++j) moved.data()[t * win + j] += static_cast<double>(standard_normal(rng));
      const Tensor<double> out = model.sequence_features(moved);
      ++probes;
      if (out.data().head(t * w) != base.data().head(t * w)) ++violations;
    }
  }
  return {violations == 0, std::to_string(probes) + " perturbations over 3 variants, " + std::to_string(violations) +
                               " changed an earlier step"};
}

// 3. Default shape chain and block layout.
Outcome shape_chain() {
  const ModelConfig cfg;
  Rng rng(31);
  FumModel<float> model(cfg, rng);
  model.set_mode(Mode::eval);
  NoGradGuard no_grad;
  std::vector<std::string> problems;
  auto expect = [&](const Shape& got, const Shape& want, const std::string& what) {
    if (got != want) problems.push_back(what + " " + to_string(got));
  };
  const Tensor<float> images = random_tensor<float>({6, 3, 84, 84}, rng);
  const Tensor<float> emb = model.embed(images);
  expect(emb.shape(), {6, 64, 64}, "embedding");
  const Tensor<float> seq = build_channel_vector_sequences(narrow(emb, 0, 0, 5), narrow(emb, 0, 5, 1));
  expect(seq.shape(), {1, 64, 384}, "sequence");
  const Tensor<float> m1 = model.modules()[0].forward(seq);
  expect(m1.shape(), {1, 64, 480}, "module 1");
  expect(model.modules()[1].forward(m1).shape(), {1, 64, 672}, "module 2");
  expect(model.predict(seq).shape(), {1, 5}, "scores");
  const std::vector<Index> dilations{1, 2, 4, 8, 16, 32};
  for (const auto& m : model.modules()) {
    if (m.blocks.size() != 6) problems.push_back("blocks per module " + std::to_string(m.blocks.size()));
    for (std::size_t i = 0; i < m.blocks.size() && i < 6; ++i)
      if (m.blocks[i].dilation() != dilations[i]) problems.push_back("dilation mismatch");
  }
  if (cfg.blocks_per_module() != 6) problems.push_back("blocks_per_module");
  std::string detail = "3x84x84 -> 64x64 -> 64x384 -> 64x480 -> 64x672 -> 5, 6 blocks, dilations 1..32";
  for (const auto& p : problems) detail += "; bad " + p;
  return {problems.empty(), detail};
}

// 4. Receptive field of one default module.
Outcome receptive_field() {
  const ModelConfig cfg;
  Rng rng(41);
  SequenceModule<double> module(Variant::proposed, cfg.sequence_width(), cfg.filter_sizes[0], cfg.k,
                                cfg.blocks_per_module(), rng);
  NoGradGuard no_grad;
  const Index steps = 96, win = cfg.sequence_width();
  const Tensor<double> x = random_tensor<double>({steps, win}, rng);
  Tensor<double> moved(x.shape(), x.data());
  moved.data().head(win).array() += 1.0;
  const Tensor<double> a = module.forward(x), b = module.forward(moved);
  const Index w = a.dim(1);
  Index last_reached = -1;
  for (Index t = 0; t < steps; ++t)
    if (a.data().segment(t * w, w) != b.data().segment(t * w, w)) last_reached = t;
  return {last_reached == cfg.c - 1,
          "impulse at step 0 last changes step " + std::to_string(last_reached) + " (expected 63, field 64)"};
}

// 5. K=1 class averaging is an exact identity.
Outcome k1_reduction() {
  const ModelConfig cfg;
  Rng rng(51);
  FumModel<float> model(cfg, rng);
  const Tensor<float> support = random_tensor<float>({5, 3, 84, 84}, rng);
  const Tensor<float> query = random_tensor<float>({3, 3, 84, 84}, rng);
  bool same = true;
  for (Mode mode : {Mode::train, Mode::eval}) {
    model.set_mode(mode);
    NoGradGuard no_grad;
    const Tensor<float> with = model.episode_logits(support, query, 1);
    const Tensor<float> emb = model.embed(concat<float>({support, query}, 0));
    const Tensor<float> without = model.forward(narrow(emb, 0, 0, 5), narrow(emb, 0, 5, 3));
    same = same && with.data() == without.data();
  }
  return {same, same ? "scores bit-identical in train and eval mode" : "scores differ"};
}

// 6. Untrained model sits at chance.
Outcome chance_level() {
  const ModelConfig cfg;
  Rng rng = make_stream(61, "init");
  FumModel<float> model(cfg, rng);
  const auto start = Clock::now();
  const EvalReport r = evaluate(model, synthetic_benchmark().test, 5, 1, kTestEpisodes, kTestSeed);
  const double half = 2.576 * std::sqrt(0.2 * 0.8 / static_cast<double>(kTestEpisodes));
  const bool ok = std::abs(r.mean_accuracy - 0.2) <= half;
  return {ok, "accuracy " + pct(r.mean_accuracy) + " over 600 episodes, band 20% +/- " + pct(half) + ", " +
                  fmt(seconds_since(start), 1) + " s"};
}

// 7. Memorize one fixed episode.
Outcome overfit_one_episode() {
  const ModelConfig cfg;
  const DatasetSplits& data = synthetic_benchmark();
  Rng sampler(71);
  const Episode episode = sample_episode(data.train, 5, 1, 16, sampler);
  const EpisodeTensors batch = episode_tensors(data.train, episode);
  Rng init = make_stream(71, "init");
  FumModel<float> model(cfg, init);
  model.set_mode(Mode::train);
  Adam adam(model.parameters());
  const auto start = Clock::now();
  int steps = 0;
  double acc = 0.0;
  while (true) {
    const Tensor<float> logits = model.episode_logits(batch.support, batch.query, batch.k_shot);
    acc = query_accuracy(logits, batch.query_labels);
    if (acc == 1.0 || steps == 500) break;
    softmax_cross_entropy(logits, std::span<const Index>(batch.query_labels)).backward();
    adam.step();
    ++steps;
  }
  const double secs = seconds_since(start);
  return {acc == 1.0 && secs < 300.0,
          "query accuracy " + pct(acc) + " after " + std::to_string(steps) + " steps, " + fmt(secs, 1) + " s"};
}

// 8. Desk-scale learning on the synthetic benchmark.
Outcome desk_learning(const fs::path& work, DeskRun& run) {
  const DatasetSplits& data = synthetic_benchmark();
  const bool sizes = data.train.num_classes() == 20 && data.val.num_classes() == 5 && data.test.num_classes() == 5;
  run = desk_run(Variant::proposed, 1, 2000, 250, work / "desk_a");
  const bool ok = sizes && run.test.mean_accuracy >= 0.70 && run.train_seconds < 1800.0;
  return {ok, "test accuracy " + pct(run.test.mean_accuracy) + " +/- " + pct(run.test.ci95_halfwidth) +
                  " after 2000 episodes (best val at " + std::to_string(run.result.best_episode) + "), " +
                  fmt(run.train_seconds / 60.0, 1) + " min"};
}

// 9. Ablation ordering over 3 seeds.
Outcome ablation_order(const fs::path& work) {
  const std::vector<Variant> variants{Variant::proposed, Variant::update_only, Variant::tcn};
  std::vector<std::vector<double>> acc(3);
  for (std::size_t v = 0; v < 3; ++v)
    for (std::uint64_t seed : {11u, 12u, 13u}) {
      const DeskRun r = desk_run(variants[v], seed, 1000, 250, work / ("ablation_" + to_string(variants[v])));
      acc[v].push_back(r.test.mean_accuracy);
    }
  auto mean = [](const std::vector<double>& x) { return std::accumulate(x.begin(), x.end(), 0.0) / x.size(); };
  auto var = [&](const std::vector<double>& x) {
    const double m = mean(x);
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return s / (x.size() - 1);
  };
  auto gap_ok = [&](std::size_t hi, std::size_t lo, std::string& why) {
    const double se = std::sqrt(var(acc[hi]) / acc[hi].size() + var(acc[lo]) / acc[lo].size());
    const double gap = mean(acc[hi]) - mean(acc[lo]);
    why += ", " + to_string(variants[hi]) + " - " + to_string(variants[lo]) + " = " + fmt(100.0 * gap) + " pts (se " +
           fmt(100.0 * se) + ")";
    return gap >= -se;
  };
  std::string detail = "means " + pct(mean(acc[0])) + " / " + pct(mean(acc[1])) + " / " + pct(mean(acc[2]));
  const bool first = gap_ok(0, 1, detail);
  const bool second = gap_ok(1, 2, detail);
  return {first && second, detail};
}

// 10. Plateau schedule on a scripted metric sequence.
Outcome plateau_schedule() {
  PlateauSchedule s;
  double lr = 0.001;
  std::vector<double> metrics{0.40, 0.45, 0.50};
  metrics.insert(metrics.end(), 7, 0.50);
  int reductions = 0;
  for (double m : metrics)
    if (auto next = s.update(m, lr)) {
      lr = *next;
      ++reductions;
    }
  return {lr == 0.001 * 0.9 && reductions == 1, "lr " + fmt(lr, 6) + " after 7 stagnant evaluations"};
}

// 11. Checkpoint round trip and rejection of damaged files.
Outcome checkpoint_round_trip(const fs::path& work) {
  const ModelConfig cfg;
  Rng rng(111);
  FumModel<float> model(cfg, rng);
  for (auto& b : model.buffers()) b.tensor.data() = b.tensor.data().setRandom().cwiseAbs().array() + 0.5f;
  model.set_mode(Mode::eval);
  const fs::path path = work / "round_trip.ckpt";
  save_checkpoint(path, model, {0.5, 10});
  Rng other(112);
  FumModel<float> loaded(cfg, other);
  apply_checkpoint(load_checkpoint(path), loaded);
  loaded.set_mode(Mode::eval);
  const Tensor<float> support = random_tensor<float>({5, 3, 84, 84}, rng);
  const Tensor<float> query = random_tensor<float>({2, 3, 84, 84}, rng);
  NoGradGuard no_grad;
  const bool identical = model.episode_logits(support, query, 1).data() == loaded.episode_logits(support, query, 1).data();

  std::ifstream in(path, std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  int rejected = 0;
  auto try_load = [&](std::string damaged) {
    std::ofstream(path, std::ios::binary) << damaged;
    try {
      load_checkpoint(path);
    } catch (const CheckpointError&) {
      ++rejected;
    }
  };
  std::string bad_magic = bytes;
  bad_magic[1] = '?';
  try_load(bad_magic);
  try_load(bytes.substr(0, bytes.size() / 2));
  try_load(bytes.substr(0, 10));
  fs::remove(path);
  return {identical && rejected == 3, std::string(identical ? "forward bit-identical" : "forward differs") + ", " +
                                          std::to_string(rejected) + "/3 damaged files rejected"};
}

std::vector<nlohmann::json> metrics_without_wall_time(const fs::path& file) {
  std::vector<nlohmann::json> out;
  std::ifstream in(file);
  std::string line;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    j.erase("wall_time_ms");
    out.push_back(std::move(j));
  }
  return out;
}

// 12. Same seed, same metrics log (wall-clock time excluded).
Outcome determinism(const fs::path& work, const DeskRun& first) {
  const DeskRun second = desk_run(Variant::proposed, 1, 2000, 250, work / "desk_b");
  const auto a = metrics_without_wall_time(work / "desk_a" / "metrics.jsonl");
  const auto b = metrics_without_wall_time(work / "desk_b" / "metrics.jsonl");
  std::ifstream ca(work / "desk_a" / "best.ckpt", std::ios::binary), cb(work / "desk_b" / "best.ckpt", std::ios::binary);
  const bool same_ckpt =
      std::string{std::istreambuf_iterator<char>(ca), {}} == std::string{std::istreambuf_iterator<char>(cb), {}};
  const bool same = !a.empty() && a == b && same_ckpt && first.test.per_episode == second.test.per_episode;
  return {same, std::to_string(a.size()) + " metric records " + (a == b ? "identical" : "differ") + ", best checkpoint " +
                    (same_ckpt ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fumnet acceptance suite"};
  std::vector<int> only;
  std::string work_dir = (fs::temp_directory_path() / "fumnet_acceptance").string();
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work-dir", work_dir, "scratch directory for training runs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}
                                              : std::set<int>(only.begin(), only.end());
  const fs::path work(work_dir);
  fs::create_directories(work);

  DeskRun desk;
  bool desk_done = false;
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!selected.contains(id)) return;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.passed) ++failures;
    std::cout << "criterion " << std::setw(2) << id << " " << (o.passed ? "PASS" : "FAIL") << "  " << name << ": "
              << o.detail << " [" << fmt(seconds_since(start), 1) << " s]\n"
              << std::flush;
  };

  report(1, "gradient suite", gradient_suite);
  report(2, "causality", causality_suite);
  report(3, "shape chain", shape_chain);
  report(4, "receptive field", receptive_field);
  report(5, "K=1 reduction", k1_reduction);
  report(6, "chance level", chance_level);
  report(7, "overfit one episode", overfit_one_episode);
  report(10, "plateau schedule", plateau_schedule);
  report(11, "checkpoint round trip", [&] { return checkpoint_round_trip(work); });
  report(8, "desk-scale learning", [&] {
    Outcome o = desk_learning(work, desk);
    desk_done = true;
    return o;
  });
  report(12, "determinism", [&] {
    if (!desk_done) desk = desk_run(Variant::proposed, 1, 2000, 250, work / "desk_a");
    return determinism(work, desk);
  });
  report(9, "ablation ordering", [&] { return ablation_order(work); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << '\n';
  return failures == 0 ? 0 : 1;
}
