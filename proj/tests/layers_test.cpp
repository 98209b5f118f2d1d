#include <doctest.h>

#include "fumnet/gradcheck.hpp"
#include "fumnet/layers.hpp"

using namespace fumnet;
using T = Tensor<double>;

namespace {

T random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Vec<double> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = lo + (hi - lo) * uniform_unit(rng);
  return T(std::move(shape), std::move(v));
}

// Direct cross-correlation, zero padding 1.
T conv2d_reference(const T& x, const T& w, const T& b) {
  const Index batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(0);
  T out = T::zeros({batch, cout, h, wd});
  for (Index n = 0; n < batch; ++n)
    for (Index o = 0; o < cout; ++o)
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < wd; ++xx) {
          double acc = b.data()[o];
          for (Index c = 0; c < cin; ++c)
            for (Index ky = 0; ky < 3; ++ky)
              for (Index kx = 0; kx < 3; ++kx) {
                const Index sy = y + ky - 1, sx = xx + kx - 1;
                if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                acc += w.at({o, c, ky, kx}) * x.at({n, c, sy, sx});
              }
          out.data()[out.offset({n, o, y, xx})] = acc;
        }
  return out;
}

// out[t] = bias + sum_j W[:,:,j] x[t - (k-1-j) d], zero before the start.
T causal_reference(const T& x, const CausalConv1d<double>& conv) {
  const Index steps = x.dim(0), fin = x.dim(1), fout = conv.out_features(), k = conv.kernel_size();
  T out = T::zeros({steps, fout});
  for (Index t = 0; t < steps; ++t)
    for (Index o = 0; o < fout; ++o) {
      double acc = conv.bias.data()[o];
      for (Index j = 0; j < k; ++j) {
        const Index src = t - (k - 1 - j) * conv.dilation;
        if (src < 0) continue;
        for (Index i = 0; i < fin; ++i) acc += conv.weight.at({o, i, j}) * x.at({src, i});
      }
      out.data()[out.offset({t, o})] = acc;
    }
  return out;
}

double max_abs_diff(const T& a, const T& b) { return (a.data() - b.data()).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("dilation schedule") {
  CHECK(dilation_for_layer(2, 1) == 1);
  CHECK(dilation_for_layer(2, 6) == 32);
  CHECK(dilation_for_layer(3, 1) == 1);
  CHECK(dilation_for_layer(3, 3) == 9);
  CHECK_THROWS(dilation_for_layer(1, 2));
  CHECK(blocks_per_module(2, 64) == 6);
  CHECK(blocks_per_module(2, 65) == 7);
  CHECK(blocks_per_module(3, 64) == 4);
  CHECK(blocks_per_module(2, 8) == 3);
}

TEST_CASE("conv2d") {
  Rng rng(1);
  SUBCASE("centered delta kernel is the identity") {
    Conv2d<double> conv(1, 1, rng);
    conv.weight.data().setZero();
    conv.weight.data()[conv.weight.offset({0, 0, 1, 1})] = 1.0;
    const T x = T::full({1, 1, 3, 3}, 1.0);
    CHECK(conv.forward(x).data() == x.data());
  }
  SUBCASE("zero weights give the bias everywhere") {
    Conv2d<double> conv(2, 3, rng);
    conv.weight.data().setZero();
    conv.bias.data() << 0.5, -1.0, 2.0;
    const T y = conv.forward(random_tensor({2, 2, 4, 5}, rng));
    CHECK(y.shape() == Shape{2, 3, 4, 5});
    for (Index c = 0; c < 3; ++c) CHECK(y.at({1, c, 3, 4}) == conv.bias.data()[c]);
  }
  SUBCASE("matches direct cross-correlation") {
    Conv2d<double> conv(3, 4, rng);
    conv.bias = random_tensor({4}, rng);
    const T x = random_tensor({2, 3, 5, 6}, rng);
    CHECK(max_abs_diff(conv.forward(x), conv2d_reference(x, conv.weight, conv.bias)) < 1e-12);
  }
  SUBCASE("gradcheck on a 2x3x8x8 input") {
    Conv2d<double> conv(3, 2, rng);
    conv.bias = random_tensor({2}, rng).set_requires_grad(true);
    const T x = random_tensor({2, 3, 8, 8}, rng);
    const T probe = random_tensor({2, 2, 8, 8}, rng);
    const auto report =
        gradcheck<double>([&] { return sum(conv.forward(x) * probe); }, {x, conv.weight, conv.bias}, 1e-3, 1e-4);
    CHECK(report.passed);
  }
  CHECK_THROWS_AS(Conv2d<double>(3, 2, rng).forward(T::zeros({1, 2, 4, 4})), ShapeError);
}

TEST_CASE("maxpool2x2") {
  const T x = T::from({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(maxpool2x2(x).data()[0] == 4);

  SUBCASE("84 -> 42 -> 21") {
    const T img = T::zeros({1, 2, 84, 84});
    const T once = maxpool2x2(img);
    CHECK(once.shape() == Shape{1, 2, 42, 42});
    CHECK(maxpool2x2(once).shape() == Shape{1, 2, 21, 21});
    CHECK_THROWS_AS(maxpool2x2(maxpool2x2(once)), ShapeError);
  }
  SUBCASE("ties route the gradient to the first maximum") {
    T c = T::full({1, 1, 2, 4}, 7.0);
    c.set_requires_grad(true);
    const T y = maxpool2x2(c);
    CHECK(y.data() == Vec<double>::Constant(2, 7.0));
    sum(y).backward();
    const std::vector<double> expected{1, 0, 1, 0, 0, 0, 0, 0};
    for (Index i = 0; i < 8; ++i) CHECK(c.grad()[i] == expected[static_cast<std::size_t>(i)]);
  }
  CHECK_THROWS_AS(maxpool2x2(T::zeros({1, 3, 3})), ShapeError);
}

TEST_CASE("batchnorm2d") {
  Rng rng(3);
  SUBCASE("train mode standardizes each channel") {
    BatchNorm2d<double> bn(4);
    const T x = random_tensor({3, 4, 5, 5}, rng, -3.0, 5.0);
    const T y = bn.forward(x, Mode::train);
    for (Index c = 0; c < 4; ++c) {
      double s = 0, ss = 0;
      for (Index b = 0; b < 3; ++b)
        for (Index i = 0; i < 25; ++i) s += y.data()[(b * 4 + c) * 25 + i];
      const double m = s / 75.0;
      for (Index b = 0; b < 3; ++b)
        for (Index i = 0; i < 25; ++i) ss += std::pow(y.data()[(b * 4 + c) * 25 + i] - m, 2);
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(ss / 75.0 - 1.0) < 1e-3);
    }
    // Running stats moved toward the batch statistics with momentum 0.1.
    CHECK(bn.running_var.data().minCoeff() >= 0.0);
    CHECK(bn.running_mean.data().cwiseAbs().maxCoeff() > 0.0);
  }
  SUBCASE("eval mode with unit running stats is the identity up to eps") {
    BatchNorm2d<double> bn(2);
    const T x = random_tensor({2, 2, 3, 3}, rng);
    const T y = bn.forward(x, Mode::eval);
    CHECK(max_abs_diff(y, x) < 1e-5);
  }
  SUBCASE("running averages follow the momentum rule") {
    BatchNorm2d<double> bn(1);
    const T x = T::from({2, 1, 1, 2}, {1, 3, 5, 7});  // mean 4, unbiased var 20/3
    bn.forward(x, Mode::train);
    CHECK(bn.running_mean.data()[0] == doctest::Approx(0.4));
    CHECK(bn.running_var.data()[0] == doctest::Approx(0.9 + 0.1 * 20.0 / 3.0));
  }
  SUBCASE("gradcheck on 2x4x5x5 in train mode") {
    BatchNorm2d<double> bn(4);
    bn.gamma = random_tensor({4}, rng, 0.5, 1.5).set_requires_grad(true);
    bn.beta = random_tensor({4}, rng).set_requires_grad(true);
    const T x = random_tensor({2, 4, 5, 5}, rng);
    const T probe = random_tensor({2, 4, 5, 5}, rng);
    const auto report = gradcheck<double>([&] { return sum(bn.forward(x, Mode::train) * probe); },
                                          {x, bn.gamma, bn.beta}, 1e-3, 1e-4);
    CHECK(report.passed);
  }
  SUBCASE("gradcheck in eval mode") {
    BatchNorm2d<double> bn(2);
    bn.running_mean = random_tensor({2}, rng);
    bn.running_var = random_tensor({2}, rng, 0.5, 2.0);
    const T x = random_tensor({2, 2, 3, 3}, rng);
    const T probe = random_tensor({2, 2, 3, 3}, rng);
    CHECK(gradcheck<double>([&] { return sum(bn.forward(x, Mode::eval) * probe); }, {x, bn.gamma, bn.beta}, 1e-3,
                            1e-4)
              .passed);
  }
  CHECK_THROWS_AS(BatchNorm2d<double>(2).forward(T::zeros({0, 2, 3, 3}), Mode::train), ShapeError);
}

TEST_CASE("linear layer") {
  Rng rng(4);
  SUBCASE("plain identity map") {
    Linear<double> fc(3, 3, false, rng);
    fc.direction.data() = Eigen::Matrix3d::Identity().reshaped<Eigen::RowMajor>();
    fc.bias.data().setZero();
    const T x = random_tensor({2, 3}, rng);
    CHECK(fc.forward(x).data() == x.data());
  }
  SUBCASE("weight-normalized row is unit-direction times scale") {
    Linear<double> fc(2, 1, true, rng);
    fc.direction.data() << 3, 4;
    fc.scale.data() << 1;
    const T w = fc.effective_weight();
    CHECK(w.data()[0] == doctest::Approx(0.6));
    CHECK(w.data()[1] == doctest::Approx(0.8));
  }
  SUBCASE("effective rows have norm |scale|") {
    Linear<double> fc(7, 5, true, rng);
    fc.scale = random_tensor({5}, rng);
    const T w = fc.effective_weight();
    const auto rows = ConstMatMap<double>(w.raw(), 5, 7).rowwise().norm();
    for (Index r = 0; r < 5; ++r) CHECK(std::abs(rows[r] - std::abs(fc.scale.data()[r])) < 1e-6);
  }
  SUBCASE("initial effective weight equals the initialized direction") {
    Linear<double> fc(6, 4, true, rng);
    CHECK(max_abs_diff(fc.effective_weight(), fc.direction) < 1e-12);
  }
  SUBCASE("gradcheck through the reparameterization") {
    Linear<double> fc(4, 3, true, rng);
    fc.bias = random_tensor({3}, rng).set_requires_grad(true);
    const T x = random_tensor({2, 5, 4}, rng);
    const T probe = random_tensor({2, 5, 3}, rng);
    const auto report = gradcheck<double>([&] { return sum(fc.forward(x) * probe); },
                                          {x, fc.direction, fc.scale, fc.bias}, 1e-3, 1e-4);
    CHECK(report.passed);
  }
  CHECK_THROWS_AS(Linear<double>(3, 2, false, rng).forward(T::zeros({2, 4})), ShapeError);
}

TEST_CASE("kaiming init") {
  Rng a(9), b(9);
  const T t1 = kaiming_init<double>({10000}, 50, a);
  const T t2 = kaiming_init<double>({10000}, 50, b);
  CHECK(t1.data() == t2.data());
  const double m = t1.data().mean();
  const double sd = std::sqrt((t1.data().array() - m).square().mean());
  CHECK(std::abs(sd - 0.2) < 0.01);
  Rng c(1);
  const T unit = kaiming_init<double>({20000}, 2, c);
  CHECK(std::sqrt(unit.data().squaredNorm() / 20000.0) == doctest::Approx(1.0).epsilon(0.05));
  CHECK_THROWS(kaiming_init<double>({2}, 0, c));
}

TEST_CASE("causal dilated conv1d") {
  Rng rng(6);
  SUBCASE("identity tap on the current step") {
    CausalConv1d<double> conv(3, 3, 2, 1, rng);
    conv.weight.data().setZero();
    for (Index i = 0; i < 3; ++i) conv.weight.data()[conv.weight.offset({i, i, 1})] = 1.0;
    const T x = random_tensor({5, 3}, rng);
    CHECK(conv.forward(x).data() == x.data());
  }
  SUBCASE("dilation 32 pads 32 steps and out[0] sees only x[0]") {
    CausalConv1d<double> conv(2, 2, 2, 32, rng);
    CHECK(conv.left_padding() == 32);
    T x = random_tensor({40, 2}, rng);
    const T base = conv.forward(x);
    for (Index t = 1; t < 40; ++t) x.data()[x.offset({t, 0})] += 1.0;
    CHECK(conv.forward(x).at({0, 0}) == base.at({0, 0}));
    CHECK(conv.forward(x).at({0, 1}) == base.at({0, 1}));
  }
  SUBCASE("matches the direct formula") {
    for (Index k : {1, 2, 3}) {
      for (Index d : {1, 2, 5}) {
        CausalConv1d<double> conv(3, 4, k, d, rng);
        conv.bias = random_tensor({4}, rng);
        const T x = random_tensor({9, 3}, rng);
        CHECK(max_abs_diff(conv.forward(x), causal_reference(x, conv)) < 1e-12);
      }
    }
  }
  SUBCASE("batched sequences are independent") {
    CausalConv1d<double> conv(3, 2, 2, 2, rng);
    const T x = random_tensor({2, 6, 3}, rng);
    const T y = conv.forward(x);
    CHECK(y.shape() == Shape{2, 6, 2});
    const T second = conv.forward(reshape(narrow(x, 0, 1, 1), {6, 3}));
    CHECK((narrow(y, 0, 1, 1).data() - second.data()).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("perturbing x[t] only changes outputs at t' >= t") {
    CausalConv1d<double> conv(3, 3, 2, 2, rng);
    const T x = random_tensor({12, 3}, rng);
    const T base = conv.forward(x);
    for (Index t = 0; t < 12; ++t) {
      T p = x.detach();
      p.data()[p.offset({t, 1})] += 0.75;
      const T y = conv.forward(p);
      for (Index s = 0; s < t; ++s)
        for (Index f = 0; f < 3; ++f) CHECK(y.at({s, f}) == base.at({s, f}));
    }
  }
  SUBCASE("receptive field of a k=2 stack with dilations 1..2^(L-1) is 2^L") {
    for (Index layers = 1; layers <= 5; ++layers) {
      const Index field = Index{1} << layers;
      std::vector<CausalConv1d<double>> stack;
      for (Index l = 1; l <= layers; ++l) {
        CausalConv1d<double> conv(1, 1, 2, dilation_for_layer(2, l), rng);
        conv.weight.data().setConstant(1.0);
        stack.push_back(conv);
      }
      const Index steps = field + 4;
      const Index t = steps - 1;
      auto respond = [&](Index impulse) {
        T x = T::zeros({steps, 1});
        x.data()[impulse] = 1.0;
        T y = x;
        for (const auto& c : stack) y = c.forward(y);
        return y.data()[t] != 0.0;
      };
      CHECK(respond(t - field + 1));
      CHECK_FALSE(respond(t - field));
    }
  }
  SUBCASE("output length equals input length") {
    for (Index k : {1, 2, 4})
      for (Index d : {1, 3, 64}) {
        CausalConv1d<double> conv(2, 5, k, d, rng);
        CHECK(conv.forward(T::zeros({7, 2})).shape() == Shape{7, 5});
      }
  }
  SUBCASE("gradcheck with batch and dilation") {
    CausalConv1d<double> conv(3, 4, 2, 2, rng);
    conv.bias = random_tensor({4}, rng).set_requires_grad(true);
    const T x = random_tensor({2, 7, 3}, rng);
    const T probe = random_tensor({2, 7, 4}, rng);
    CHECK(gradcheck<double>([&] { return sum(conv.forward(x) * probe); }, {x, conv.weight, conv.bias}, 1e-3, 1e-4)
              .passed);
  }
  SUBCASE("fault hook makes the convolution read the future") {
    CausalConv1d<double> conv(1, 1, 2, 1, rng);
    conv.weight.data().setConstant(1.0);
    testing_hooks::break_causal_padding = true;
    T x = T::zeros({4, 1});
    x.data()[2] = 1.0;
    const T y = conv.forward(x);
    testing_hooks::break_causal_padding = false;
    CHECK(y.data()[1] != 0.0);
  }
  CHECK_THROWS_AS(CausalConv1d<double>(3, 2, 2, 1, rng).forward(T::zeros({4, 2})), ShapeError);
}

TEST_CASE("softmax cross-entropy") {
  const T uniform = T::zeros({5});
  CHECK(softmax_cross_entropy(uniform, 2).item() == doctest::Approx(std::log(5.0)));
  const T saturated = T::from({5}, {20, -20, -20, -20, -20});
  CHECK(softmax_cross_entropy(saturated, 0).item() < 1e-8);
  CHECK_THROWS_AS(softmax_cross_entropy(uniform, 5), std::out_of_range);

  SUBCASE("gradient is softmax minus one-hot") {
    const T logits = T::from({4}, {0.3, -1.0, 2.0, 0.1});
    const auto report = gradcheck<double>([&] { return softmax_cross_entropy(logits, 2); }, {logits}, 1e-3, 1e-6);
    CHECK(report.passed);
    const Vec<double> e = logits.data().array().exp();
    const Vec<double> p = e / e.sum();
    for (Index i = 0; i < 4; ++i) CHECK(logits.grad()[i] == doctest::Approx(p[i] - (i == 2 ? 1.0 : 0.0)));
  }
  SUBCASE("batched rows average") {
    const T logits = T::zeros({3, 2});
    const std::vector<Index> labels{0, 1, 1};
    CHECK(softmax_cross_entropy(logits, std::span<const Index>(labels)).item() == doctest::Approx(std::log(2.0)));
  }
}
