#include "fumnet/model_config.hpp"

#include "fumnet/layers.hpp"

#include <json.hpp>

#include <stdexcept>

namespace fumnet {

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::proposed: return "proposed";
    case Variant::tcn: return "tcn";
    case Variant::update_only: return "update_only";
    case Variant::gru_head: return "gru_head";
    case Variant::lstm_head: return "lstm_head";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::proposed, Variant::tcn, Variant::update_only, Variant::gru_head, Variant::lstm_head}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + name + "' (expected proposed, tcn, update_only, gru_head, lstm_head)");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("model config: " + msg);
  };
  require(k >= 2, "k must be >= 2");
  require(c >= 2, "c must be >= 2");
  require(d >= 1, "d must be >= 1");
  require(n_way >= 2, "n_way must be >= 2");
  require(filter_sizes.size() == 2, "exactly two filter sizes (one per forget-update module) are required");
  for (Index f : filter_sizes) require(f >= 1, "filter sizes must be positive");
  require(image_size >= 12 && image_size % 4 == 0, "image_size must be a multiple of 4 and >= 12");
  require(image_channels >= 1, "image_channels must be positive");
  require(squeeze_hidden >= 1 && head_hidden1 >= 1 && head_hidden2 >= 1, "hidden sizes must be positive");
  require(rnn_hidden >= 1 && rnn_layers >= 1, "recurrent sizes must be positive");
}

Index ModelConfig::blocks_per_module() const { return fumnet::blocks_per_module(k, c); }

Index ModelConfig::module_output_width(Index m) const {
  Index width = sequence_width();
  for (Index i = 0; i <= m; ++i) width += blocks_per_module() * filter_sizes.at(static_cast<std::size_t>(i));
  return width;
}

Index ModelConfig::head_input() const {
  if (variant == Variant::gru_head || variant == Variant::lstm_head) return rnn_hidden;
  return module_output_width(static_cast<Index>(filter_sizes.size()) - 1);
}

std::string to_json(const ModelConfig& config) {
  nlohmann::json j;
  j["k"] = config.k;
  j["c"] = config.c;
  j["d"] = config.d;
  j["filter_sizes"] = config.filter_sizes;
  j["n_way"] = config.n_way;
  j["variant"] = to_string(config.variant);
  j["squeeze_hidden"] = config.squeeze_hidden;
  j["head_hidden1"] = config.head_hidden1;
  j["head_hidden2"] = config.head_hidden2;
  j["rnn_hidden"] = config.rnn_hidden;
  j["rnn_layers"] = config.rnn_layers;
  j["image_channels"] = config.image_channels;
  j["image_size"] = config.image_size;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig config;
  config.k = j.at("k").get<Index>();
  config.c = j.at("c").get<Index>();
  config.d = j.at("d").get<Index>();
  config.filter_sizes = j.at("filter_sizes").get<std::vector<Index>>();
  config.n_way = j.at("n_way").get<Index>();
  config.variant = parse_variant(j.at("variant").get<std::string>());
  config.squeeze_hidden = j.at("squeeze_hidden").get<Index>();
  config.head_hidden1 = j.at("head_hidden1").get<Index>();
  config.head_hidden2 = j.at("head_hidden2").get<Index>();
  config.rnn_hidden = j.at("rnn_hidden").get<Index>();
  config.rnn_layers = j.at("rnn_layers").get<Index>();
  config.image_channels = j.at("image_channels").get<Index>();
  config.image_size = j.at("image_size").get<Index>();
  return config;
}

}  // namespace fumnet
