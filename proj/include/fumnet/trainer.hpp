#pragma once

// Episodic meta-training: Adam, the plateau learning-rate schedule,
// per-episode training steps, evaluation and the training loop.

#include "fumnet/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>

namespace fumnet {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed parameter list. Moments are kept
/// in double. A step whose gradients contain a non-finite value is skipped
/// (parameters and moments untouched) and reported by returning false.
class Adam {
 public:
  Adam(NamedTensors<float> params, AdamConfig config = {});

  bool step();
  void zero_grad();

  double learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(double lr);
  const AdamConfig& config() const { return config_; }
  long step_count() const { return step_count_; }
  long skipped_steps() const { return skipped_; }
  const Eigen::VectorXd& first_moment(std::size_t i) const { return m_.at(i); }
  const Eigen::VectorXd& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  NamedTensors<float> params_;
  AdamConfig config_;
  std::vector<Eigen::VectorXd> m_;
  std::vector<Eigen::VectorXd> v_;
  long step_count_ = 0;
  long skipped_ = 0;
};

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// evaluations without strict improvement, then restarts the count.
struct PlateauSchedule {
  int patience = 7;
  double factor = 0.9;
  std::optional<double> best;
  int counter = 0;

  /// Returns the new learning rate when a reduction fires.
  std::optional<double> update(double metric, double current_lr);
};

/// Support images (class-major), query images and query labels for one
/// episode, as model inputs.
struct EpisodeTensors {
  Tensor<float> support;
  Tensor<float> query;
  std::vector<Index> query_labels;
  Index k_shot = 0;
};

EpisodeTensors episode_tensors(const Dataset& dataset, const Episode& episode);

/// Mean softmax cross-entropy over the queries of one episode.
Tensor<float> episode_loss(FumModel<float>& model, const EpisodeTensors& batch);

/// Fraction of queries whose argmax score equals the label.
double query_accuracy(const Tensor<float>& logits, std::span<const Index> labels);

/// One optimizer step on one episode in train mode. Returns the loss.
float train_step(FumModel<float>& model, const Dataset& dataset, const Episode& episode, Adam& optimizer);

struct EvalReport {
  Index episode_count = 0;
  double mean_accuracy = 0.0;
  double ci95_halfwidth = 0.0;  // 1.96 * std / sqrt(episodes)
  std::vector<double> per_episode;
};

/// Summary statistics over per-episode accuracies (population std).
EvalReport summarize_accuracies(std::vector<double> accuracies);

/// Evaluates in eval mode without gradient tracking on `episodes` episodes
/// drawn from `seed`. The model's previous mode is restored afterwards.
EvalReport evaluate(FumModel<float>& model, const Dataset& dataset, Index n_way, Index k_shot, Index episodes,
                    std::uint64_t seed, Index query_size = 16);

struct MetricsRecord {
  Index episode_index = 0;
  double train_loss = 0.0;  // mean loss over the episodes since the previous record
  double eval_accuracy = 0.0;
  double ci95 = 0.0;
  double learning_rate = 0.0;
  double wall_time_ms = 0.0;
};

std::string to_json_line(const MetricsRecord& record);
MetricsRecord metrics_record_from_json(const std::string& line);

struct TrainOptions {
  Index episodes = 5000;
  Index eval_interval = 500;
  Index val_episodes = 100;
  Index n_way = 5;
  Index k_shot = 1;
  Index query_size = 16;
  std::uint64_t seed = 0;
  AdamConfig adam;
  std::filesystem::path output_dir;  // empty: keep everything in memory
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  double best_val_accuracy = -1.0;
  Index best_episode = 0;
  std::filesystem::path best_checkpoint;  // empty when output_dir is empty
  double final_learning_rate = 0.0;
  long skipped_steps = 0;
};

using ProgressCallback = std::function<void(const MetricsRecord&)>;

/// Runs train_step over the episode budget, evaluating on `validation`
/// every eval_interval episodes (and after the last episode). Each
/// evaluation feeds the plateau schedule and, on strict improvement, saves
/// `best.ckpt`. Metrics go to `metrics.jsonl` in the output directory.
/// Training episodes come from the "sampler" stream of the seed and
/// validation episodes from the "eval" stream, identical at every
/// evaluation.
TrainResult meta_train(FumModel<float>& model, const Dataset& train, const Dataset& validation,
                       const TrainOptions& options, const ProgressCallback& progress = {});

/// Seed used for the validation episodes of a run with the given root seed.
std::uint64_t validation_seed(std::uint64_t root_seed);

}  // namespace fumnet
