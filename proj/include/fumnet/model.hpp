#pragma once

// The few-shot classifier: a conv feature extractor with a per-channel
// squeeze network, channel vector sequences, two stacked forget-update
// modules of gated causal dilated convolutions, and a weight-normalized
// prediction head. Baseline variants swap the sequence model.

#include "fumnet/channel_sequence.hpp"
#include "fumnet/layers.hpp"
#include "fumnet/model_config.hpp"

#include <array>

namespace fumnet {

template <typename Scalar>
struct FeatureExtractor {
  std::array<Conv2d<Scalar>, 4> convs;
  std::array<BatchNorm2d<Scalar>, 4> norms;
  Linear<Scalar> squeeze_in;   // pooled plane -> squeeze_hidden, shared by all channels
  Linear<Scalar> squeeze_out;  // squeeze_hidden -> d

  FeatureExtractor() = default;
  FeatureExtractor(const ModelConfig& config, Rng& rng) {
    Index in = config.image_channels;
    for (std::size_t i = 0; i < 4; ++i) {
      convs[i] = Conv2d<Scalar>(in, config.c, rng);
      norms[i] = BatchNorm2d<Scalar>(config.c);
      in = config.c;
    }
    squeeze_in = Linear<Scalar>(config.squeeze_input(), config.squeeze_hidden, false, rng);
    squeeze_out = Linear<Scalar>(config.squeeze_hidden, config.d, false, rng);
  }

  /// Four conv-bn-relu layers, 2x2 max pooling after the first two:
  /// [B x c_col x H x W] -> [B x c x H/4 x W/4].
  Tensor<Scalar> conv_features(const Tensor<Scalar>& images, Mode mode) {
    Tensor<Scalar> x = images;
    for (std::size_t i = 0; i < 4; ++i) {
      x = relu(norms[i].forward(convs[i].forward(x), mode));
      if (i < 2) x = maxpool2x2(x);
    }
    return x;
  }

  /// [B x c_col x H x W] -> [B x c x d].
  Tensor<Scalar> forward(const Tensor<Scalar>& images, Mode mode) {
    const Tensor<Scalar> maps = conv_features(images, mode);
    const Index b = maps.dim(0), c = maps.dim(1);
    const Tensor<Scalar> planes = reshape(maps, {b, c, maps.dim(2) * maps.dim(3)});
    return squeeze_out.forward(relu(squeeze_in.forward(planes)));
  }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    for (std::size_t i = 0; i < 4; ++i) {
      convs[i].parameters(prefix + ".conv" + std::to_string(i), out);
      norms[i].parameters(prefix + ".bn" + std::to_string(i), out);
    }
    squeeze_in.parameters(prefix + ".squeeze0", out);
    squeeze_out.parameters(prefix + ".squeeze1", out);
  }
  void buffers(const std::string& prefix, NamedTensors<Scalar>& out) const {
    for (std::size_t i = 0; i < 4; ++i) norms[i].buffers(prefix + ".bn" + std::to_string(i), out);
  }
};

/// Forget part: sigmoid(Causal(x)) * x. Update part:
/// tanh(Causal(x)) * sigmoid(Causal(x)), each Causal with its own weights.
/// The block output concatenates the two along the feature dimension. With
/// use_forget off (update-only ablation) the input passes through unchanged.
template <typename Scalar>
struct ForgetUpdateBlock {
  CausalConv1d<Scalar> forget_conv;
  CausalConv1d<Scalar> update_tanh;
  CausalConv1d<Scalar> update_gate;
  bool use_forget = true;

  ForgetUpdateBlock() = default;
  ForgetUpdateBlock(Index in_width, Index filter_size, Index k, Index dilation, bool with_forget, Rng& rng)
      : update_tanh(in_width, filter_size, k, dilation, rng),
        update_gate(in_width, filter_size, k, dilation, rng),
        use_forget(with_forget) {
    if (use_forget) forget_conv = CausalConv1d<Scalar>(in_width, in_width, k, dilation, rng);
  }

  Index in_width() const { return update_tanh.in_features(); }
  Index filter_size() const { return update_tanh.out_features(); }
  Index dilation() const { return update_tanh.dilation; }

  Tensor<Scalar> forget_gate(const Tensor<Scalar>& x) const { return sigmoid(forget_conv.forward(x)); }
  Tensor<Scalar> forget(const Tensor<Scalar>& x) const { return forget_gate(x) * x; }
  Tensor<Scalar> update(const Tensor<Scalar>& x) const {
    return fumnet::tanh(update_tanh.forward(x)) * sigmoid(update_gate.forward(x));
  }
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return concat_feature(use_forget ? forget(x) : x, update(x));
  }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    if (use_forget) forget_conv.parameters(prefix + ".forget", out);
    update_tanh.parameters(prefix + ".update_tanh", out);
    update_gate.parameters(prefix + ".update_gate", out);
  }
};

/// Residual TCN block: x + relu(conv2(relu(conv1(x)))), width preserving.
template <typename Scalar>
struct TcnBlock {
  CausalConv1d<Scalar> conv1;
  CausalConv1d<Scalar> conv2;

  TcnBlock() = default;
  TcnBlock(Index width, Index k, Index dilation, Rng& rng)
      : conv1(width, width, k, dilation, rng), conv2(width, width, k, dilation, rng) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return x + relu(conv2.forward(relu(conv1.forward(x))));
  }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    conv1.parameters(prefix + ".conv1", out);
    conv2.parameters(prefix + ".conv2", out);
  }
};

/// One sequence module. Forget-update and update-only modules stack
/// ceil(log_k c) blocks with dilations k^0, k^1, ...; the TCN baseline first
/// projects to the same output width with a 1-tap causal convolution and
/// then stacks residual blocks with the same dilation schedule.
template <typename Scalar>
struct SequenceModule {
  Variant variant = Variant::proposed;
  std::vector<ForgetUpdateBlock<Scalar>> blocks;
  CausalConv1d<Scalar> projection;
  std::vector<TcnBlock<Scalar>> tcn_blocks;

  SequenceModule() = default;
  SequenceModule(Variant v, Index in_width, Index filter_size, Index k, Index num_blocks, Rng& rng) : variant(v) {
    if (variant == Variant::tcn) {
      const Index out_width = in_width + num_blocks * filter_size;
      projection = CausalConv1d<Scalar>(in_width, out_width, 1, 1, rng);
      for (Index i = 0; i < num_blocks; ++i) tcn_blocks.emplace_back(out_width, k, dilation_for_layer(k, i + 1), rng);
      return;
    }
    Index width = in_width;
    for (Index i = 0; i < num_blocks; ++i) {
      blocks.emplace_back(width, filter_size, k, dilation_for_layer(k, i + 1), variant == Variant::proposed, rng);
      width += filter_size;
    }
  }

  /// Returns the output of the last block.
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    Tensor<Scalar> h = x;
    if (variant == Variant::tcn) {
      h = projection.forward(h);
      for (const auto& b : tcn_blocks) h = b.forward(h);
      return h;
    }
    for (const auto& b : blocks) h = b.forward(h);
    return h;
  }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    if (variant == Variant::tcn) {
      projection.parameters(prefix + ".projection", out);
      for (std::size_t i = 0; i < tcn_blocks.size(); ++i) tcn_blocks[i].parameters(prefix + ".block" + std::to_string(i), out);
      return;
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].parameters(prefix + ".block" + std::to_string(i), out);
  }
};

/// Multi-layer unidirectional GRU or LSTM (gate layouts r,z,n and i,f,g,o).
template <typename Scalar>
struct RecurrentLayer {
  Tensor<Scalar> w_ih, w_hh, b_ih, b_hh;

  RecurrentLayer() = default;
  RecurrentLayer(Index in, Index hidden, Index gates, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto uniform = [&](Shape shape) {
      Vec<Scalar> v(numel(shape));
      for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(bound * (2.0 * uniform_unit(rng) - 1.0));
      Tensor<Scalar> t(std::move(shape), std::move(v));
      t.set_requires_grad(true);
      return t;
    };
    w_ih = uniform({gates * hidden, in});
    w_hh = uniform({gates * hidden, hidden});
    b_ih = uniform({gates * hidden});
    b_hh = uniform({gates * hidden});
  }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    out.push_back({prefix + ".w_ih", w_ih});
    out.push_back({prefix + ".w_hh", w_hh});
    out.push_back({prefix + ".b_ih", b_ih});
    out.push_back({prefix + ".b_hh", b_hh});
  }
};

template <typename Scalar>
struct RecurrentHead {
  bool lstm = false;
  Index hidden = 0;
  std::vector<RecurrentLayer<Scalar>> layers;

  RecurrentHead() = default;
  RecurrentHead(bool use_lstm, Index in, Index hidden_size, Index num_layers, Rng& rng)
      : lstm(use_lstm), hidden(hidden_size) {
    for (Index l = 0; l < num_layers; ++l) layers.emplace_back(l == 0 ? in : hidden, hidden, lstm ? 4 : 3, rng);
  }

  /// [Q x steps x F] -> final hidden state of the top layer [Q x hidden].
  Tensor<Scalar> forward(const Tensor<Scalar>& seq) const {
    const Index q = seq.dim(0), steps = seq.dim(1);
    const Index h = hidden;
    Tensor<Scalar> input = seq;
    Tensor<Scalar> last;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const Tensor<Scalar> projected = linear(input, layer.w_ih, layer.b_ih);  // [Q x steps x G*h]
      Tensor<Scalar> state = Tensor<Scalar>::zeros({q, h});
      Tensor<Scalar> cell = Tensor<Scalar>::zeros({q, h});
      std::vector<Tensor<Scalar>> outputs;
      const bool keep_outputs = l + 1 < layers.size();
      for (Index t = 0; t < steps; ++t) {
        const Tensor<Scalar> gi = reshape(narrow(projected, 1, t, 1), {q, projected.dim(2)});
        const Tensor<Scalar> gh = linear(state, layer.w_hh, layer.b_hh);
        auto part = [h](const Tensor<Scalar>& g, Index i) { return narrow(g, 1, i * h, h); };
        if (lstm) {
          const Tensor<Scalar> in_gate = sigmoid(part(gi, 0) + part(gh, 0));
          const Tensor<Scalar> forget_gate = sigmoid(part(gi, 1) + part(gh, 1));
          const Tensor<Scalar> candidate = fumnet::tanh(part(gi, 2) + part(gh, 2));
          const Tensor<Scalar> out_gate = sigmoid(part(gi, 3) + part(gh, 3));
          cell = forget_gate * cell + in_gate * candidate;
          state = out_gate * fumnet::tanh(cell);
        } else {
          const Tensor<Scalar> reset = sigmoid(part(gi, 0) + part(gh, 0));
          const Tensor<Scalar> update = sigmoid(part(gi, 1) + part(gh, 1));
          const Tensor<Scalar> candidate = fumnet::tanh(part(gi, 2) + reset * part(gh, 2));
          // (1 - z) * n + z * h  ==  n + z * (h - n)
          state = candidate + update * (state - candidate);
        }
        if (keep_outputs) outputs.push_back(reshape(state, {q, 1, h}));
      }
      if (keep_outputs) input = concat(outputs, 1);
      last = state;
    }
    return last;
  }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].parameters(prefix + ".layer" + std::to_string(l), out);
  }
};

/// Three weight-normalized fully-connected layers with relu between them.
template <typename Scalar>
struct PredictionHead {
  std::array<Linear<Scalar>, 3> layers;

  PredictionHead() = default;
  PredictionHead(Index in, Index hidden1, Index hidden2, Index n_way, Rng& rng)
      : layers{Linear<Scalar>(in, hidden1, true, rng), Linear<Scalar>(hidden1, hidden2, true, rng),
               Linear<Scalar>(hidden2, n_way, true, rng)} {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return layers[2].forward(relu(layers[1].forward(relu(layers[0].forward(x)))));
  }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    for (std::size_t i = 0; i < 3; ++i) layers[i].parameters(prefix + ".fc" + std::to_string(i), out);
  }
};

template <typename Scalar>
class FumModel {
 public:
  FumModel(const ModelConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    extractor_ = FeatureExtractor<Scalar>(config_, rng);
    if (is_recurrent()) {
      recurrent_ = RecurrentHead<Scalar>(config_.variant == Variant::lstm_head, config_.sequence_width(),
                                         config_.rnn_hidden, config_.rnn_layers, rng);
    } else {
      Index width = config_.sequence_width();
      for (Index f : config_.filter_sizes) {
        modules_.emplace_back(config_.variant, width, f, config_.k, config_.blocks_per_module(), rng);
        width += config_.blocks_per_module() * f;
      }
    }
    head_ = PredictionHead<Scalar>(config_.head_input(), config_.head_hidden1, config_.head_hidden2, config_.n_way, rng);
  }

  const ModelConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }
  bool is_recurrent() const {
    return config_.variant == Variant::gru_head || config_.variant == Variant::lstm_head;
  }

  FeatureExtractor<Scalar>& extractor() { return extractor_; }
  const std::vector<SequenceModule<Scalar>>& modules() const { return modules_; }
  std::vector<SequenceModule<Scalar>>& modules() { return modules_; }
  const RecurrentHead<Scalar>& recurrent() const { return recurrent_; }
  PredictionHead<Scalar>& head() { return head_; }

  /// Images [B x c_col x H x W] -> embeddings [B x c x d].
  Tensor<Scalar> embed(const Tensor<Scalar>& images) { return extractor_.forward(images, mode_); }

  /// Channel vector sequences [Q x c x W] through both sequence modules
  /// (everything before the readout). Not defined for recurrent heads.
  Tensor<Scalar> sequence_features(const Tensor<Scalar>& sequences) const {
    if (is_recurrent()) throw std::logic_error("sequence_features: recurrent variants have no sequence modules");
    Tensor<Scalar> h = sequences;
    for (const auto& m : modules_) h = m.forward(h);
    return h;
  }

  /// Feature vector handed to the prediction head, [Q x head_input]. For the
  /// convolutional variants this is the last step of the final module.
  Tensor<Scalar> readout(const Tensor<Scalar>& sequences) const {
    check_sequences(sequences);
    if (is_recurrent()) return recurrent_.forward(sequences);
    const Tensor<Scalar> h = sequence_features(sequences);
    const Index q = h.dim(0), steps = h.dim(1);
    return reshape(narrow(h, 1, steps - 1, 1), {q, h.dim(2)});
  }

  /// Sequences [Q x c x (N+1)d] -> similarity scores [Q x N].
  Tensor<Scalar> predict(const Tensor<Scalar>& sequences) const { return head_.forward(readout(sequences)); }

  /// Class-level maps [N x c x d] and query maps [Q x c x d] -> [Q x N].
  Tensor<Scalar> forward(const Tensor<Scalar>& class_maps, const Tensor<Scalar>& query_maps) const {
    if (class_maps.rank() != 3 || class_maps.dim(0) != config_.n_way) {
      throw ShapeError("model expects " + std::to_string(config_.n_way) + " class maps, got " +
                       to_string(class_maps.shape()));
    }
    return predict(build_channel_vector_sequences(class_maps, query_maps));
  }

  /// Full episode: support images (class-major, K per class) and query
  /// images -> scores [Q x N].
  Tensor<Scalar> episode_logits(const Tensor<Scalar>& support_images, const Tensor<Scalar>& query_images, Index k_shot) {
    const Index n_support = support_images.dim(0);
    const Tensor<Scalar> all = concat<Scalar>({support_images, query_images}, 0);
    const Tensor<Scalar> emb = embed(all);
    const Tensor<Scalar> support = narrow(emb, 0, 0, n_support);
    const Tensor<Scalar> queries = narrow(emb, 0, n_support, emb.dim(0) - n_support);
    return forward(class_level_averages(support, config_.n_way, k_shot), queries);
  }

  NamedTensors<Scalar> parameters() const {
    NamedTensors<Scalar> out;
    extractor_.parameters("extractor", out);
    for (std::size_t i = 0; i < modules_.size(); ++i) modules_[i].parameters("module" + std::to_string(i), out);
    if (is_recurrent()) recurrent_.parameters("recurrent", out);
    head_.parameters("head", out);
    return out;
  }

  NamedTensors<Scalar> buffers() const {
    NamedTensors<Scalar> out;
    extractor_.buffers("extractor", out);
    return out;
  }

 private:
  void check_sequences(const Tensor<Scalar>& s) const {
    if (s.rank() != 3 || s.dim(1) != config_.c || s.dim(2) != config_.sequence_width()) {
      throw ShapeError("expected channel vector sequences [Q x " + std::to_string(config_.c) + " x " +
                       std::to_string(config_.sequence_width()) + "], got " + to_string(s.shape()));
    }
  }

  ModelConfig config_;
  Mode mode_ = Mode::train;
  FeatureExtractor<Scalar> extractor_;
  std::vector<SequenceModule<Scalar>> modules_;
  RecurrentHead<Scalar> recurrent_;
  PredictionHead<Scalar> head_;
};

}  // namespace fumnet
