#include "fumnet/diagnostics.hpp"

#include "fumnet/gradcheck.hpp"
#include "fumnet/model.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace fumnet {

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Vec<double> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = scale * standard_normal(rng);
  return T(std::move(shape), std::move(v));
}

DiagnosticResult grad_result(std::string name, const GradcheckReport& r) {
  std::ostringstream os;
  os << "max rel err " << r.max_relative_error << " over " << r.coordinates_checked << " coords";
  if (!r.non_finite.empty()) os << ", " << r.non_finite.size() << " non-finite";
  return {std::move(name), r.passed, os.str()};
}

bool bit_identical(const Vec<double>& a, const Vec<double>& b) {
  if (a.size() != b.size()) return false;
  return a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

// Outputs at steps < t must not move when input step t changes, for every t.
// `f` maps [L x F] to [L x G].
DiagnosticResult causality_check(std::string name, const std::function<T(const T&)>& f, const T& x) {
  NoGradGuard no_grad;
  const T base = f(x);
  const Index steps = x.dim(0), fin = x.dim(1), fout = base.dim(1);
  Index violations = 0;
  for (Index t = 0; t < steps; ++t) {
    T moved(x.shape(), x.data());
    for (Index j = 0; j < fin; ++j) moved.data()[t * fin + j] += 1.0 + 0.5 * static_cast<double>(j);
    const T out = f(moved);
    if (!bit_identical(base.data().head(t * fout), out.data().head(t * fout))) ++violations;
  }
  return {std::move(name), violations == 0,
          violations == 0 ? "earlier steps bit-identical for all " + std::to_string(steps) + " perturbed steps"
                          : std::to_string(violations) + " perturbed steps leaked into earlier outputs"};
}

// Which output steps change when input step `src` is perturbed.
std::vector<bool> influenced_steps(const std::function<T(const T&)>& f, const T& x, Index src) {
  NoGradGuard no_grad;
  const T base = f(x);
  T moved(x.shape(), x.data());
  const Index fin = x.dim(1);
  for (Index j = 0; j < fin; ++j) moved.data()[src * fin + j] += 1.0;
  const T out = f(moved);
  const Index steps = base.dim(0), fout = base.dim(1);
  std::vector<bool> hit(static_cast<std::size_t>(steps));
  for (Index t = 0; t < steps; ++t) {
    hit[static_cast<std::size_t>(t)] =
        !bit_identical(base.data().segment(t * fout, fout), out.data().segment(t * fout, fout));
  }
  return hit;
}

std::string shapes_text(const std::vector<Shape>& shapes) {
  std::string s;
  for (const auto& sh : shapes) s += (s.empty() ? "" : " -> ") + to_string(sh);
  return s;
}

}  // namespace

bool DiagnosticsReport::all_passed() const {
  return std::all_of(results.begin(), results.end(), [](const DiagnosticResult& r) { return r.passed; });
}

std::vector<std::string> DiagnosticsReport::failures() const {
  std::vector<std::string> out;
  for (const auto& r : results)
    if (!r.passed) out.push_back(r.name);
  return out;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.k = 2;
  c.c = 8;
  c.d = 4;
  c.filter_sizes = {2, 2};
  c.n_way = 2;
  c.squeeze_hidden = 6;
  c.head_hidden1 = 8;
  c.head_hidden2 = 6;
  c.rnn_hidden = 5;
  c.rnn_layers = 2;
  c.image_channels = 3;
  c.image_size = 12;
  return c;
}

DiagnosticsReport run_diagnostics(const DiagnosticsOptions& options,
                                  const std::function<void(const DiagnosticResult&)>& on_result) {
  DiagnosticsReport report;
  auto add = [&](DiagnosticResult r) {
    if (on_result) on_result(r);
    report.results.push_back(std::move(r));
  };
  auto guarded = [&](const std::string& name, const std::function<DiagnosticResult()>& check) {
    try {
      add(check());
    } catch (const std::exception& e) {
      add({name, false, std::string("threw: ") + e.what()});
    }
  };
  const double h = options.step, tol = options.tolerance;
  const ModelConfig tiny = tiny_model_config();

  guarded("grad.elementwise", [&] {
    Rng rng = make_stream(1, "diag/elementwise");
    T a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    Rng w = make_stream(1, "diag/probe");
    const T p = random_tensor({3, 4}, w);
    return grad_result("grad.elementwise", gradcheck<double>([&] { return sum(affine((a * b - a) + b, 1.5, 0.25) * p); },
                                                             {a, b}, h, tol));
  });

  guarded("grad.activations", [&] {
    Rng rng = make_stream(2, "diag/activations");
    T x = random_tensor({5, 4}, rng);
    Rng w = make_stream(2, "diag/probe");
    const T p = random_tensor({5, 4}, w);
    return grad_result("grad.activations",
                       gradcheck<double>([&] { return sum((sigmoid(x) + fumnet::tanh(x) + relu(x)) * p); }, {x}, h, tol));
  });

  guarded("grad.linear_weight_norm", [&] {
    Rng rng = make_stream(3, "diag/linear");
    Linear<double> fc(5, 4, true, rng);
    T x = random_tensor({3, 2, 5}, rng);
    Rng w = make_stream(3, "diag/probe");
    const T p = random_tensor({3, 2, 4}, w);
    return grad_result("grad.linear_weight_norm",
                       gradcheck<double>([&] { return sum(fc.forward(x) * p); }, {x, fc.direction, fc.scale, fc.bias}, h, tol));
  });

  guarded("grad.conv2d", [&] {
    Rng rng = make_stream(4, "diag/conv2d");
    Conv2d<double> conv(2, 3, rng);
    T x = random_tensor({2, 2, 5, 4}, rng);
    Rng w = make_stream(4, "diag/probe");
    const T p = random_tensor({2, 3, 5, 4}, w);
    return grad_result("grad.conv2d", gradcheck<double>([&] { return sum(conv.forward(x) * p); }, {x, conv.weight, conv.bias}, h, tol));
  });

  guarded("grad.batchnorm2d", [&] {
    Rng rng = make_stream(5, "diag/bn");
    BatchNorm2d<double> bn(3);
    bn.gamma.data() = random_tensor({3}, rng).data();
    T x = random_tensor({3, 3, 2, 2}, rng);
    Rng w = make_stream(5, "diag/probe");
    const T p = random_tensor({3, 3, 2, 2}, w);
    return grad_result("grad.batchnorm2d",
                       gradcheck<double>([&] { return sum(bn.forward(x, Mode::train) * p); }, {x, bn.gamma, bn.beta}, h, tol));
  });

  guarded("grad.maxpool2x2", [&] {
    Rng rng = make_stream(6, "diag/pool");
    T x = random_tensor({2, 2, 4, 6}, rng);
    Rng w = make_stream(6, "diag/probe");
    const T p = random_tensor({2, 2, 2, 3}, w);
    return grad_result("grad.maxpool2x2", gradcheck<double>([&] { return sum(maxpool2x2(x) * p); }, {x}, h, tol));
  });

  guarded("grad.causal_conv1d", [&] {
    Rng rng = make_stream(7, "diag/causal");
    CausalConv1d<double> conv(3, 2, 2, 4, rng);
    T x = random_tensor({2, 9, 3}, rng);
    Rng w = make_stream(7, "diag/probe");
    const T p = random_tensor({2, 9, 2}, w);
    return grad_result("grad.causal_conv1d",
                       gradcheck<double>([&] { return sum(conv.forward(x) * p); }, {x, conv.weight, conv.bias}, h, tol));
  });

  guarded("grad.forget_update_block", [&] {
    Rng rng = make_stream(8, "diag/block");
    ForgetUpdateBlock<double> block(4, 3, 2, 2, true, rng);
    T x = random_tensor({2, 6, 4}, rng);
    Rng w = make_stream(8, "diag/probe");
    const T p = random_tensor({2, 6, 7}, w);
    std::vector<T> inputs{x};
    NamedTensors<double> params;
    block.parameters("b", params);
    for (auto& q : params) inputs.push_back(q.tensor);
    return grad_result("grad.forget_update_block", gradcheck<double>([&] { return sum(block.forward(x) * p); }, inputs, h, tol));
  });

  guarded("grad.channel_sequence", [&] {
    Rng rng = make_stream(9, "diag/sequence");
    T support = random_tensor({4, 3, 2}, rng);  // N=2, K=2
    T query = random_tensor({3, 3, 2}, rng);
    Rng w = make_stream(9, "diag/probe");
    const T p = random_tensor({3, 3, 6}, w);
    return grad_result("grad.channel_sequence",
                       gradcheck<double>([&] { return sum(build_channel_vector_sequences(class_level_averages(support, 2, 2), query) * p); },
                                         {support, query}, h, tol));
  });

  guarded("grad.softmax_cross_entropy", [&] {
    Rng rng = make_stream(10, "diag/ce");
    T logits = random_tensor({4, 3}, rng, 2.0);
    const std::vector<Index> labels{0, 2, 1, 2};
    return grad_result("grad.softmax_cross_entropy",
                       gradcheck<double>([&] { return softmax_cross_entropy(logits, std::span<const Index>(labels)); }, {logits}, h, tol));
  });

  for (Variant v : {Variant::proposed, Variant::gru_head, Variant::lstm_head}) {
    const std::string name = "grad.end_to_end." + to_string(v);
    guarded(name, [&] {
      ModelConfig cfg = tiny;
      cfg.variant = v;
      Rng rng = make_stream(11, "diag/model");
      FumModel<double> model(cfg, rng);
      T support = random_tensor({cfg.n_way, 3, cfg.image_size, cfg.image_size}, rng);
      T query = random_tensor({3, 3, cfg.image_size, cfg.image_size}, rng);
      const std::vector<Index> labels{1, 0, 1};
      std::vector<T> inputs{support, query};
      for (auto& q : model.parameters()) inputs.push_back(q.tensor);
      return grad_result(name, gradcheck<double>(
                                   [&] {
                                     return softmax_cross_entropy(model.episode_logits(support, query, 1),
                                                                  std::span<const Index>(labels));
                                   },
                                   inputs, h, tol));
    });
  }

  guarded("causality.causal_conv1d", [&] {
    Rng rng = make_stream(12, "diag/causal");
    CausalConv1d<double> conv(3, 2, 3, 2, rng);
    return causality_check("causality.causal_conv1d", [&](const T& x) { return conv.forward(x); },
                           random_tensor({10, 3}, rng));
  });

  guarded("causality.forget_update_pipeline", [&] {
    Rng rng = make_stream(13, "diag/model");
    FumModel<double> model(tiny, rng);
    const Index width = tiny.sequence_width();
    return causality_check(
        "causality.forget_update_pipeline",
        [&](const T& x) {
          const T y = model.sequence_features(reshape(x, {1, tiny.c, width}));
          return reshape(y, {y.dim(1), y.dim(2)});
        },
        random_tensor({tiny.c, width}, rng));
  });

  guarded("causality.ablation_variants", [&] {
    std::string bad;
    for (Variant v : {Variant::tcn, Variant::update_only}) {
      ModelConfig cfg = tiny;
      cfg.variant = v;
      Rng rng = make_stream(14, "diag/model");
      FumModel<double> model(cfg, rng);
      const Index width = cfg.sequence_width();
      const auto r = causality_check(
          to_string(v),
          [&](const T& x) {
            const T y = model.sequence_features(reshape(x, {1, cfg.c, width}));
            return reshape(y, {y.dim(1), y.dim(2)});
          },
          random_tensor({cfg.c, width}, rng));
      if (!r.passed) bad += (bad.empty() ? "" : ", ") + to_string(v) + ": " + r.detail;
    }
    return DiagnosticResult{"causality.ablation_variants", bad.empty(), bad.empty() ? "tcn and update_only causal" : bad};
  });

  guarded("receptive_field.module_impulse", [&] {
    // One module over c steps: an impulse at step 0 reaches the final step,
    // and over a longer sequence it stops exactly at the field boundary.
    Rng rng = make_stream(15, "diag/field");
    const Index k = tiny.k, blocks = tiny.blocks_per_module();
    SequenceModule<double> module(Variant::proposed, 4, 2, k, blocks, rng);
    Index field = 1;
    for (Index i = 1; i <= blocks; ++i) field += (k - 1) * dilation_for_layer(k, i);
    const auto f = [&](const T& x) { return module.forward(x); };
    const auto own = influenced_steps(f, random_tensor({tiny.c, 4}, rng), 0);
    const auto longer = influenced_steps(f, random_tensor({2 * field, 4}, rng), 0);
    bool ok = own.back();
    for (Index t = 0; t < 2 * field; ++t) ok = ok && longer[static_cast<std::size_t>(t)] == (t < field);
    return DiagnosticResult{"receptive_field.module_impulse", ok,
                            "field " + std::to_string(field) + " for k=" + std::to_string(k) + ", " +
                                std::to_string(blocks) + " blocks, sequence length " + std::to_string(tiny.c)};
  });

  guarded("reduction.k1_class_average", [&] {
    Rng rng = make_stream(16, "diag/k1");
    const T support = random_tensor({3, 4, 2}, rng);
    const T averaged = class_level_averages(support, 3, 1);
    const bool ok = averaged.shape() == Shape{3, 4, 2} && bit_identical(averaged.data(), support.data());
    return DiagnosticResult{"reduction.k1_class_average", ok, ok ? "K=1 averaging is the identity" : "K=1 averaging changed values"};
  });

  guarded("shape_chain.tiny", [&] {
    Rng rng = make_stream(17, "diag/model");
    FumModel<double> model(tiny, rng);
    NoGradGuard no_grad;
    const T images = random_tensor({tiny.n_way + 1, 3, tiny.image_size, tiny.image_size}, rng);
    const T emb = model.embed(images);
    const T seq = build_channel_vector_sequences(narrow(emb, 0, 0, tiny.n_way), narrow(emb, 0, tiny.n_way, 1));
    std::vector<Shape> chain{{3, tiny.image_size, tiny.image_size}, {emb.dim(1), emb.dim(2)}, {seq.dim(1), seq.dim(2)}};
    T h = seq;
    for (const auto& m : model.modules()) {
      h = m.forward(h);
      chain.push_back({h.dim(1), h.dim(2)});
    }
    const T scores = model.predict(seq);
    chain.push_back({scores.dim(1)});
    const std::vector<Shape> expected{{3, 12, 12}, {8, 4}, {8, 12}, {8, 18}, {8, 24}, {2}};
    return DiagnosticResult{"shape_chain.tiny", chain == expected, shapes_text(chain)};
  });

  if (options.include_default_shape_chain) {
    guarded("shape_chain.default", [&] {
      const ModelConfig cfg;
      Rng rng = make_stream(18, "diag/model");
      FumModel<float> model(cfg, rng);
      model.set_mode(Mode::eval);
      NoGradGuard no_grad;
      Vec<float> pixels(2 * 3 * 84 * 84);
      for (Index i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<float>(standard_normal(rng));
      const Tensor<float> images({2, 3, 84, 84}, pixels);
      const Tensor<float> emb = model.embed(images);
      const Tensor<float> classes = concat<float>({narrow(emb, 0, 0, 1), narrow(emb, 0, 0, 1), narrow(emb, 0, 0, 1),
                                                   narrow(emb, 0, 0, 1), narrow(emb, 0, 0, 1)}, 0);
      const Tensor<float> seq = build_channel_vector_sequences(classes, narrow(emb, 0, 1, 1));
      std::vector<Shape> chain{{3, 84, 84}, {emb.dim(1), emb.dim(2)}, {seq.dim(1), seq.dim(2)}};
      Tensor<float> h = seq;
      std::string dilations;
      for (const auto& m : model.modules()) {
        h = m.forward(h);
        chain.push_back({h.dim(1), h.dim(2)});
      }
      for (const auto& b : model.modules().front().blocks) dilations += (dilations.empty() ? "" : ",") + std::to_string(b.dilation());
      chain.push_back({model.predict(seq).dim(1)});
      const std::vector<Shape> expected{{3, 84, 84}, {64, 64}, {64, 384}, {64, 480}, {64, 672}, {5}};
      const bool ok = chain == expected && dilations == "1,2,4,8,16,32";
      return DiagnosticResult{"shape_chain.default", ok, shapes_text(chain) + ", dilations " + dilations};
    });
  }

  return report;
}

}  // namespace fumnet
