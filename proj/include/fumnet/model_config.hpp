#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

namespace fumnet {

using Index = Eigen::Index;

/// Sequence-model variants: the forget-update network and its baselines.
enum class Variant { proposed, tcn, update_only, gru_head, lstm_head };

std::string to_string(Variant variant);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  Index k = 2;   // causal kernel size
  Index c = 64;  // feature channels = sequence length
  Index d = 64;  // per-channel embedding dim
  std::vector<Index> filter_sizes{16, 32};
  Index n_way = 5;
  Variant variant = Variant::proposed;
  Index squeeze_hidden = 128;
  Index head_hidden1 = 256;
  Index head_hidden2 = 128;
  Index rnn_hidden = 512;
  Index rnn_layers = 2;
  Index image_channels = 3;
  Index image_size = 84;

  /// Throws std::invalid_argument describing the first problem found.
  void validate() const;

  Index pooled_size() const { return image_size / 4; }
  Index squeeze_input() const { return pooled_size() * pooled_size(); }
  Index sequence_width() const { return (n_way + 1) * d; }
  Index blocks_per_module() const;
  /// Feature width after module m (0-based); m = -1 gives the input width.
  Index module_output_width(Index m) const;
  Index head_input() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace fumnet
