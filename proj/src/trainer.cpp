#include "fumnet/trainer.hpp"

#include "fumnet/checkpoint.hpp"

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

namespace fumnet {

Adam::Adam(NamedTensors<float> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("Adam: learning rate must be positive");
  for (const auto& p : params_) {
    m_.push_back(Eigen::VectorXd::Zero(p.tensor.numel()));
    v_.push_back(Eigen::VectorXd::Zero(p.tensor.numel()));
  }
}

void Adam::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("Adam: learning rate must be positive");
  config_.learning_rate = lr;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

bool Adam::step() {
  for (const auto& p : params_) {
    if (p.tensor.has_grad() && !p.tensor.grad().allFinite()) {
      ++skipped_;
      std::cerr << "adam: non-finite gradient in " << p.name << ", step skipped\n";
      zero_grad();
      return false;
    }
  }
  ++step_count_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    const Eigen::VectorXd g = t.grad().template cast<double>();
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseAbs2();
    const Eigen::VectorXd update =
        config_.learning_rate * (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + config_.eps);
    t.data() -= update.cast<float>();
  }
  zero_grad();
  return true;
}

std::optional<double> PlateauSchedule::update(double metric, double current_lr) {
  if (!best || metric > *best) {
    best = metric;
    counter = 0;
    return std::nullopt;
  }
  if (++counter < patience) return std::nullopt;
  counter = 0;
  return current_lr * factor;
}

EpisodeTensors episode_tensors(const Dataset& dataset, const Episode& episode) {
  return {image_batch<float>(dataset, episode.support), image_batch<float>(dataset, episode.query),
          episode.query_labels, episode.k_shot};
}

Tensor<float> episode_loss(FumModel<float>& model, const EpisodeTensors& batch) {
  const Tensor<float> logits = model.episode_logits(batch.support, batch.query, batch.k_shot);
  return softmax_cross_entropy(logits, std::span<const Index>(batch.query_labels));
}

double query_accuracy(const Tensor<float>& logits, std::span<const Index> labels) {
  const Index rows = logits.dim(0), cols = logits.dim(1);
  if (static_cast<Index>(labels.size()) != rows) throw ShapeError("query_accuracy: label count mismatch");
  Index correct = 0;
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    for (Index c = 1; c < cols; ++c) {
      if (logits.raw()[r * cols + c] > logits.raw()[r * cols + best]) best = c;
    }
    if (best == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(rows);
}

float train_step(FumModel<float>& model, const Dataset& dataset, const Episode& episode, Adam& optimizer) {
  if (episode.n_way != model.config().n_way) {
    throw std::invalid_argument("train_step: episode is " + std::to_string(episode.n_way) + "-way but the model is " +
                                std::to_string(model.config().n_way) + "-way");
  }
  model.set_mode(Mode::train);
  const Tensor<float> loss = episode_loss(model, episode_tensors(dataset, episode));
  const float value = loss.item();
  loss.backward();
  optimizer.step();
  return value;
}

EvalReport summarize_accuracies(std::vector<double> accuracies) {
  EvalReport report;
  report.episode_count = static_cast<Index>(accuracies.size());
  if (accuracies.empty()) return report;
  const Eigen::Map<const Eigen::ArrayXd> a(accuracies.data(), report.episode_count);
  report.mean_accuracy = a.mean();
  const double var = (a - report.mean_accuracy).square().mean();
  report.ci95_halfwidth = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(report.episode_count));
  report.per_episode = std::move(accuracies);
  return report;
}

EvalReport evaluate(FumModel<float>& model, const Dataset& dataset, Index n_way, Index k_shot, Index episodes,
                    std::uint64_t seed, Index query_size) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episode count must be positive");
  if (n_way != model.config().n_way) {
    throw std::invalid_argument("evaluate: " + std::to_string(n_way) + "-way episodes for a " +
                                std::to_string(model.config().n_way) + "-way model");
  }
  const Mode previous = model.mode();
  model.set_mode(Mode::eval);
  NoGradGuard no_grad;
  Rng rng(seed);
  std::vector<double> acc;
  acc.reserve(static_cast<std::size_t>(episodes));
  for (Index e = 0; e < episodes; ++e) {
    const Episode episode = sample_episode(dataset, n_way, k_shot, query_size, rng);
    const EpisodeTensors batch = episode_tensors(dataset, episode);
    const Tensor<float> logits = model.episode_logits(batch.support, batch.query, batch.k_shot);
    acc.push_back(query_accuracy(logits, std::span<const Index>(batch.query_labels)));
  }
  model.set_mode(previous);
  return summarize_accuracies(std::move(acc));
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::json j;
  j["episode_index"] = r.episode_index;
  j["train_loss"] = r.train_loss;
  j["eval_accuracy"] = r.eval_accuracy;
  j["ci95"] = r.ci95;
  j["learning_rate"] = r.learning_rate;
  j["wall_time_ms"] = r.wall_time_ms;
  return j.dump();
}

MetricsRecord metrics_record_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.episode_index = j.at("episode_index").get<Index>();
  r.train_loss = j.at("train_loss").get<double>();
  r.eval_accuracy = j.at("eval_accuracy").get<double>();
  r.ci95 = j.at("ci95").get<double>();
  r.learning_rate = j.at("learning_rate").get<double>();
  r.wall_time_ms = j.at("wall_time_ms").get<double>();
  return r;
}

std::uint64_t validation_seed(std::uint64_t root_seed) {
  Rng rng = make_stream(root_seed, "eval");
  return rng();
}

TrainResult meta_train(FumModel<float>& model, const Dataset& train, const Dataset& validation,
                       const TrainOptions& options, const ProgressCallback& progress) {
  if (options.episodes < 1) throw std::invalid_argument("meta_train: episode budget must be positive");
  if (options.eval_interval < 1) throw std::invalid_argument("meta_train: eval interval must be positive");
  if (options.n_way != model.config().n_way) throw std::invalid_argument("meta_train: n_way differs from the model");
  for (const Dataset* ds : {&train, &validation}) {
    if (ds->num_classes() < options.n_way) {
      throw DataError(to_string(ds->split) + " split has " + std::to_string(ds->num_classes()) +
                      " classes, fewer than n_way = " + std::to_string(options.n_way));
    }
  }

  std::ofstream log;
  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(options.output_dir);
    log.open(options.output_dir / "metrics.jsonl", std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + (options.output_dir / "metrics.jsonl").string());
  }

  Adam optimizer(model.parameters(), options.adam);
  PlateauSchedule schedule;
  Rng sampler = make_stream(options.seed, "sampler");
  const std::uint64_t val_seed = validation_seed(options.seed);
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  double loss_sum = 0.0;
  Index loss_count = 0;
  for (Index e = 1; e <= options.episodes; ++e) {
    const Episode episode = sample_episode(train, options.n_way, options.k_shot, options.query_size, sampler);
    loss_sum += train_step(model, train, episode, optimizer);
    ++loss_count;
    if (e % options.eval_interval != 0 && e != options.episodes) continue;

    const EvalReport report =
        evaluate(model, validation, options.n_way, options.k_shot, options.val_episodes, val_seed, options.query_size);
    MetricsRecord rec;
    rec.episode_index = e;
    rec.train_loss = loss_sum / static_cast<double>(loss_count);
    rec.eval_accuracy = report.mean_accuracy;
    rec.ci95 = report.ci95_halfwidth;
    rec.learning_rate = optimizer.learning_rate();
    rec.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    loss_sum = 0.0;
    loss_count = 0;

    if (report.mean_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = report.mean_accuracy;
      result.best_episode = e;
      if (!options.output_dir.empty()) {
        result.best_checkpoint = options.output_dir / "best.ckpt";
        save_checkpoint(result.best_checkpoint, model, {report.mean_accuracy, e});
      }
    }
    if (auto lr = schedule.update(report.mean_accuracy, optimizer.learning_rate())) optimizer.set_learning_rate(*lr);

    result.metrics.push_back(rec);
    if (log.is_open()) {
      log << to_json_line(rec) << '\n';
      log.flush();
      if (!log) throw std::runtime_error("failed writing the metrics log");
    }
    if (progress) progress(rec);
  }
  result.final_learning_rate = optimizer.learning_rate();
  result.skipped_steps = optimizer.skipped_steps();
  return result;
}

}  // namespace fumnet
