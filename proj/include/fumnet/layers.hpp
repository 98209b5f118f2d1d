#pragma once

// Network layers: 3x3 convolution, batch normalization, 2x2 max pooling,
// weight-normalized fully-connected layers and causal dilated 1-D
// convolution over [steps x features] sequences.

#include "fumnet/ops.hpp"
#include "fumnet/rng.hpp"

#include <memory>
#include <string>
#include <vector>

namespace fumnet {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
using NamedTensors = std::vector<NamedTensor<Scalar>>;

enum class Mode { train, eval };

namespace testing_hooks {
// Fault injection for the diagnostics battery: when set, causal convolutions
// pad on the right instead of the left and therefore read future steps.
inline bool break_causal_padding = false;
}  // namespace testing_hooks

/// Samples N(0, sqrt(2 / fan_in)).
template <typename Scalar>
Tensor<Scalar> kaiming_init(Shape shape, Index fan_in, Rng& rng) {
  if (fan_in < 1) throw std::invalid_argument("kaiming_init: fan_in must be >= 1");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Vec<Scalar> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(stddev * standard_normal(rng));
  return Tensor<Scalar>(std::move(shape), std::move(v));
}

/// Dilation of the ell-th layer (1-based) of a stack with kernel size k: k^(ell-1).
inline Index dilation_for_layer(Index k, Index ell) {
  if (k < 2 || ell < 1) throw std::invalid_argument("dilation_for_layer: need k >= 2 and ell >= 1");
  Index d = 1;
  for (Index i = 1; i < ell; ++i) d *= k;
  return d;
}

/// ceil(log_k(length)) in exact integer arithmetic: the number of layers
/// whose receptive field k^ell first covers the sequence.
inline Index blocks_per_module(Index k, Index length) {
  if (k < 2 || length < 2) throw std::invalid_argument("blocks_per_module: need k >= 2 and length >= 2");
  Index ell = 0;
  Index span = 1;
  while (span < length) {
    span *= k;
    ++ell;
  }
  return ell;
}

// ---------------------------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding 1.
template <typename Scalar>
struct Conv2d {
  Tensor<Scalar> weight;  // [out x in x 3 x 3]
  Tensor<Scalar> bias;    // [out]

  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, Rng& rng)
      : weight(kaiming_init<Scalar>({out_channels, in_channels, 3, 3}, in_channels * 9, rng)),
        bias(Tensor<Scalar>::zeros({out_channels})) {
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const;

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

namespace detail {

template <typename Scalar>
void im2col3x3(const Scalar* image, Index channels, Index h, Index w, Scalar* col) {
  const Index plane = h * w;
  for (Index c = 0; c < channels; ++c) {
    const Scalar* src = image + c * plane;
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        Scalar* dst = col + ((c * 3 + ky) * 3 + kx) * plane;
        const Index dx = kx - 1;
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + ky - 1;
          Scalar* row = dst + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, Scalar(0));
            continue;
          }
          const Scalar* srow = src + sy * w;
          const Index x0 = std::max<Index>(0, -dx);
          const Index x1 = std::min<Index>(w, w - dx);
          std::fill(row, row + x0, Scalar(0));
          std::copy(srow + x0 + dx, srow + x1 + dx, row + x0);
          std::fill(row + x1, row + w, Scalar(0));
        }
      }
    }
  }
}

template <typename Scalar>
void col2im3x3(const Scalar* col, Index channels, Index h, Index w, Scalar* image) {
  const Index plane = h * w;
  for (Index c = 0; c < channels; ++c) {
    Scalar* dst = image + c * plane;
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Scalar* src = col + ((c * 3 + ky) * 3 + kx) * plane;
        const Index dx = kx - 1;
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const Index x0 = std::max<Index>(0, -dx);
          const Index x1 = std::min<Index>(w, w - dx);
          Scalar* drow = dst + sy * w + dx;
          const Scalar* srow = src + y * w;
          for (Index x = x0; x < x1; ++x) drow[x] += srow[x];
        }
      }
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x) const {
  if (x.rank() != 4 || x.dim(1) != in_channels()) {
    throw ShapeError("conv2d: expected [batch x " + std::to_string(in_channels()) + " x H x W], got " +
                     to_string(x.shape()));
  }
  const Index batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 3 || w < 3) throw ShapeError("conv2d: spatial dims must be >= 3, got " + to_string(x.shape()));
  const Index cout = out_channels();
  const Index plane = h * w;
  const Index krows = cin * 9;
  ConstMatMap<Scalar> wmat(weight.raw(), cout, krows);

  auto cols = std::make_shared<std::vector<RowMat<Scalar>>>(static_cast<std::size_t>(batch));
  Vec<Scalar> out(batch * cout * plane);
  for (Index b = 0; b < batch; ++b) {
    auto& col = (*cols)[static_cast<std::size_t>(b)];
    col.resize(krows, plane);
    detail::im2col3x3(x.raw() + b * cin * plane, cin, h, w, col.data());
    MatMap<Scalar> ob(out.data() + b * cout * plane, cout, plane);
    ob.noalias() = wmat * col;
    ob.colwise() += bias.data();
  }
  return record<Scalar>({batch, cout, h, w}, std::move(out), {x, weight, bias},
                        [cols, batch, cin, cout, h, w, plane, krows](auto& self) {
                          auto& px = *self.parents[0];
                          auto& pw = *self.parents[1];
                          auto& pb = *self.parents[2];
                          ConstMatMap<Scalar> wm(pw.data.data(), cout, krows);
                          RowMat<Scalar> dcol(krows, plane);
                          for (Index b = 0; b < batch; ++b) {
                            ConstMatMap<Scalar> g(self.grad.data() + b * cout * plane, cout, plane);
                            const auto& col = (*cols)[static_cast<std::size_t>(b)];
                            if (pw.requires_grad) {
                              MatMap<Scalar>(pw.grad_buffer().data(), cout, krows).noalias() +=
                                  g * col.transpose();
                            }
                            if (pb.requires_grad) pb.grad_buffer() += g.rowwise().sum();
                            if (px.requires_grad) {
                              dcol.noalias() = wm.transpose() * g;
                              detail::col2im3x3(dcol.data(), cin, h, w,
                                                px.grad_buffer().data() + b * cin * plane);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------

template <typename Scalar>
struct BatchNorm2d {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels)
      : gamma(Tensor<Scalar>::full({channels}, Scalar(1))),
        beta(Tensor<Scalar>::zeros({channels})),
        running_mean(Tensor<Scalar>::zeros({channels})),
        running_var(Tensor<Scalar>::full({channels}, Scalar(1))) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Index channels() const { return gamma.numel(); }

  /// Train mode normalizes with batch statistics over (batch, H, W) and
  /// updates the running averages; eval mode uses the running averages.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void buffers(const std::string& prefix, NamedTensors<Scalar>& out) const {
    out.push_back({prefix + ".running_mean", running_mean});
    out.push_back({prefix + ".running_var", running_var});
  }
};

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != channels()) {
    throw ShapeError("batchnorm2d: expected [batch x " + std::to_string(channels()) + " x H x W], got " +
                     to_string(x.shape()));
  }
  const Index batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (batch == 0) throw ShapeError("batchnorm2d: empty batch");
  const Index count = batch * plane;

  Vec<Scalar> mean_c(ch), inv_std(ch);
  if (mode == Mode::train) {
    for (Index c = 0; c < ch; ++c) {
      double s = 0.0;
      for (Index b = 0; b < batch; ++b) s += x.data().segment((b * ch + c) * plane, plane).template cast<double>().sum();
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (Index b = 0; b < batch; ++b) {
        ss += (x.data().segment((b * ch + c) * plane, plane).template cast<double>().array() - m).square().sum();
      }
      const double var = ss / static_cast<double>(count);
      mean_c[c] = static_cast<Scalar>(m);
      inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      running_mean.data()[c] = (Scalar(1) - momentum) * running_mean.data()[c] + momentum * mean_c[c];
      running_var.data()[c] =
          (Scalar(1) - momentum) * running_var.data()[c] + momentum * static_cast<Scalar>(unbiased);
    }
  } else {
    mean_c = running_mean.data();
    inv_std = (running_var.data().array() + eps).rsqrt();
  }

  Vec<Scalar> xhat(x.numel());
  Vec<Scalar> out(x.numel());
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < ch; ++c) {
      const Index off = (b * ch + c) * plane;
      xhat.segment(off, plane) = (x.data().segment(off, plane).array() - mean_c[c]) * inv_std[c];
      out.segment(off, plane) = xhat.segment(off, plane).array() * gamma.data()[c] + beta.data()[c];
    }
  }
  const bool train = mode == Mode::train;
  return record<Scalar>(x.shape(), std::move(out), {x, gamma, beta},
                        [xhat = std::move(xhat), inv_std, batch, ch, plane, count, train](auto& self) {
                          auto& px = *self.parents[0];
                          auto& pg = *self.parents[1];
                          auto& pb = *self.parents[2];
                          const auto& g = self.grad;
                          for (Index c = 0; c < ch; ++c) {
                            Scalar sum_g(0), sum_gx(0);
                            for (Index b = 0; b < batch; ++b) {
                              const Index off = (b * ch + c) * plane;
                              sum_g += g.segment(off, plane).sum();
                              sum_gx += g.segment(off, plane).dot(xhat.segment(off, plane));
                            }
                            if (pg.requires_grad) pg.grad_buffer()[c] += sum_gx;
                            if (pb.requires_grad) pb.grad_buffer()[c] += sum_g;
                            if (!px.requires_grad) continue;
                            const Scalar scale = pg.data[c] * inv_std[c];
                            auto& gx = px.grad_buffer();
                            for (Index b = 0; b < batch; ++b) {
                              const Index off = (b * ch + c) * plane;
                              if (train) {
                                const Scalar mg = sum_g / static_cast<Scalar>(count);
                                const Scalar mgx = sum_gx / static_cast<Scalar>(count);
                                gx.segment(off, plane).array() +=
                                    scale * (g.segment(off, plane).array() - mg - xhat.segment(off, plane).array() * mgx);
                              } else {
                                gx.segment(off, plane) += scale * g.segment(off, plane);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------

/// Non-overlapping 2x2 max over the trailing two dims. Ties route the
/// gradient to the first maximum in row-major scan order.
template <typename Scalar>
Tensor<Scalar> maxpool2x2(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw ShapeError("maxpool2x2: need at least 2 dims, got " + to_string(x.shape()));
  const Index h = x.dim(-2), w = x.dim(-1);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2x2: spatial dims must be even, got " + to_string(x.shape()));
  }
  const Index oh = h / 2, ow = w / 2;
  const Index planes = x.numel() / (h * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Vec<Scalar> out(planes * oh * ow);
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Scalar* src = x.raw();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < oh; ++y) {
      for (Index xx = 0; xx < ow; ++xx) {
        const Index base = p * h * w + 2 * y * w + 2 * xx;
        const Index cand[4] = {base, base + 1, base + w, base + w + 1};
        Index best = cand[0];
        for (int i = 1; i < 4; ++i) {
          if (src[cand[i]] > src[best]) best = cand[i];
        }
        const Index o = (p * oh + y) * ow + xx;
        out[o] = src[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return record<Scalar>(std::move(shape), std::move(out), {x}, [argmax = std::move(argmax)](auto& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[static_cast<Index>(o)];
  });
}

// ---------------------------------------------------------------------------

/// Row-wise weight normalization: w_i = scale_i * v_i / ||v_i||.
template <typename Scalar>
Tensor<Scalar> weight_norm(const Tensor<Scalar>& direction, const Tensor<Scalar>& scale) {
  if (direction.rank() != 2 || scale.numel() != direction.dim(0)) {
    throw ShapeError("weight_norm: direction " + to_string(direction.shape()) + " vs scale " +
                     to_string(scale.shape()));
  }
  const Index rows = direction.dim(0), cols = direction.dim(1);
  ConstMatMap<Scalar> v(direction.raw(), rows, cols);
  Vec<Scalar> norms = v.rowwise().norm();
  if ((norms.array() <= Scalar(0)).any()) throw std::domain_error("weight_norm: zero direction row");
  Vec<Scalar> out(rows * cols);
  MatMap<Scalar>(out.data(), rows, cols) =
      (scale.data().cwiseQuotient(norms)).asDiagonal() * v;
  return record<Scalar>(direction.shape(), std::move(out), {direction, scale},
                        [norms, rows, cols](auto& self) {
                          auto& pv = *self.parents[0];
                          auto& ps = *self.parents[1];
                          ConstMatMap<Scalar> vv(pv.data.data(), rows, cols);
                          ConstMatMap<Scalar> g(self.grad.data(), rows, cols);
                          const Vec<Scalar> gv = g.cwiseProduct(vv).rowwise().sum();
                          if (ps.requires_grad) ps.grad_buffer() += gv.cwiseQuotient(norms);
                          if (pv.requires_grad) {
                            MatMap<Scalar> dv(pv.grad_buffer().data(), rows, cols);
                            for (Index r = 0; r < rows; ++r) {
                              const Scalar n = norms[r];
                              dv.row(r) += (ps.data[r] / n) * (g.row(r) - (gv[r] / (n * n)) * vv.row(r));
                            }
                          }
                        });
}

/// x [.. x in] -> x * weight^T + bias, weight [out x in].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  const Index out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.rank() == 0 || x.dim(-1) != in_f || bias.numel() != out_f) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  }
  const Index rows = x.numel() / in_f;
  Shape shape = x.shape();
  shape.back() = out_f;
  Vec<Scalar> out(rows * out_f);
  MatMap<Scalar> o(out.data(), rows, out_f);
  o.noalias() = ConstMatMap<Scalar>(x.raw(), rows, in_f) * ConstMatMap<Scalar>(weight.raw(), out_f, in_f).transpose();
  o.rowwise() += bias.data().transpose();
  return record<Scalar>(std::move(shape), std::move(out), {x, weight, bias}, [rows, in_f, out_f](auto& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    ConstMatMap<Scalar> g(self.grad.data(), rows, out_f);
    if (px.requires_grad) {
      MatMap<Scalar>(px.grad_buffer().data(), rows, in_f).noalias() +=
          g * ConstMatMap<Scalar>(pw.data.data(), out_f, in_f);
    }
    if (pw.requires_grad) {
      MatMap<Scalar>(pw.grad_buffer().data(), out_f, in_f).noalias() +=
          g.transpose() * ConstMatMap<Scalar>(px.data.data(), rows, in_f);
    }
    if (pb.requires_grad) pb.grad_buffer() += g.colwise().sum().transpose();
  });
}

/// Fully-connected layer with optional weight-normalized reparameterization.
template <typename Scalar>
struct Linear {
  Tensor<Scalar> direction;  // [out x in]
  Tensor<Scalar> scale;      // [out], used only with weight normalization
  Tensor<Scalar> bias;       // [out]
  bool weight_norm_enabled = false;

  Linear() = default;
  Linear(Index in_features, Index out_features, bool use_weight_norm, Rng& rng)
      : direction(kaiming_init<Scalar>({out_features, in_features}, in_features, rng)),
        bias(Tensor<Scalar>::zeros({out_features})),
        weight_norm_enabled(use_weight_norm) {
    direction.set_requires_grad(true);
    bias.set_requires_grad(true);
    if (weight_norm_enabled) {
      // Start with the effective weight equal to the initialized direction.
      scale = Tensor<Scalar>(Shape{out_features}, ConstMatMap<Scalar>(direction.raw(), out_features, in_features)
                                                      .rowwise()
                                                      .norm());
      scale.set_requires_grad(true);
    }
  }

  Index in_features() const { return direction.dim(1); }
  Index out_features() const { return direction.dim(0); }

  Tensor<Scalar> effective_weight() const {
    return weight_norm_enabled ? weight_norm(direction, scale) : direction;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return linear(x, effective_weight(), bias); }

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    out.push_back({prefix + ".direction", direction});
    if (weight_norm_enabled) out.push_back({prefix + ".scale", scale});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------------------

/// Causal dilated convolution over sequences [steps x in] or
/// [batch x steps x in]. Output step t reads input steps t - (k-1-j)*dilation
/// for taps j = 0..k-1, with zeros before the start of the sequence.
template <typename Scalar>
struct CausalConv1d {
  Tensor<Scalar> weight;  // [out x in x k]
  Tensor<Scalar> bias;    // [out]
  Index dilation = 1;

  CausalConv1d() = default;
  CausalConv1d(Index in_features, Index out_features, Index kernel_size, Index dilation_rate, Rng& rng)
      : weight(kaiming_init<Scalar>({out_features, in_features, kernel_size}, in_features * kernel_size, rng)),
        bias(Tensor<Scalar>::zeros({out_features})),
        dilation(dilation_rate) {
    if (kernel_size < 1 || dilation_rate < 1) throw std::invalid_argument("causal conv: k and dilation must be >= 1");
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Index in_features() const { return weight.dim(1); }
  Index out_features() const { return weight.dim(0); }
  Index kernel_size() const { return weight.dim(2); }
  Index left_padding() const { return (kernel_size() - 1) * dilation; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const;

  void parameters(const std::string& prefix, NamedTensors<Scalar>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
Tensor<Scalar> CausalConv1d<Scalar>::forward(const Tensor<Scalar>& x) const {
  if ((x.rank() != 2 && x.rank() != 3) || x.dim(-1) != in_features()) {
    throw ShapeError("causal conv: expected [.. x steps x " + std::to_string(in_features()) + "], got " +
                     to_string(x.shape()));
  }
  const Index steps = x.dim(-2);
  if (steps < 1) throw ShapeError("causal conv: empty sequence");
  const Index batch = x.rank() == 3 ? x.dim(0) : 1;
  const Index fin = in_features(), fout = out_features(), k = kernel_size();

  // Signed offset of tap j relative to the output step (negative = past).
  std::vector<Index> offsets(static_cast<std::size_t>(k));
  for (Index j = 0; j < k; ++j) {
    offsets[static_cast<std::size_t>(j)] = -(k - 1 - j) * dilation;
    if (testing_hooks::break_causal_padding) offsets[static_cast<std::size_t>(j)] += (k - 1) * dilation;
  }
  // Per-tap dense [out x in] slices of the [out x in x k] weight.
  using Strided = Eigen::Map<const RowMat<Scalar>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
  std::vector<RowMat<Scalar>> taps(static_cast<std::size_t>(k));
  for (Index j = 0; j < k; ++j) {
    taps[static_cast<std::size_t>(j)] =
        Strided(weight.raw() + j, fout, fin, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(fin * k, k));
  }

  Shape shape = x.shape();
  shape.back() = fout;
  Vec<Scalar> out(batch * steps * fout);
  MatMap<Scalar> o(out.data(), batch * steps, fout);
  o.rowwise() = bias.data().transpose();
  ConstMatMap<Scalar> xin(x.raw(), batch * steps, fin);
  for (Index j = 0; j < k; ++j) {
    const Index off = offsets[static_cast<std::size_t>(j)];
    const Index len = steps - std::abs(off);
    if (len <= 0) continue;
    const Index dst0 = off < 0 ? -off : 0;  // first output step that sees this tap
    const Index src0 = off < 0 ? 0 : off;
    for (Index b = 0; b < batch; ++b) {
      o.middleRows(b * steps + dst0, len).noalias() +=
          xin.middleRows(b * steps + src0, len) * taps[static_cast<std::size_t>(j)].transpose();
    }
  }
  return record<Scalar>(
      std::move(shape), std::move(out), {x, weight, bias},
      [taps = std::move(taps), offsets = std::move(offsets), batch, steps, fin, fout, k](auto& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        ConstMatMap<Scalar> g(self.grad.data(), batch * steps, fout);
        if (pb.requires_grad) pb.grad_buffer() += g.colwise().sum().transpose();
        ConstMatMap<Scalar> xin(px.data.data(), batch * steps, fin);
        RowMat<Scalar> dtap(fout, fin);
        for (Index j = 0; j < k; ++j) {
          const Index off = offsets[static_cast<std::size_t>(j)];
          const Index len = steps - std::abs(off);
          if (len <= 0) continue;
          const Index dst0 = off < 0 ? -off : 0;
          const Index src0 = off < 0 ? 0 : off;
          if (pw.requires_grad) dtap.setZero();
          for (Index b = 0; b < batch; ++b) {
            const auto gb = g.middleRows(b * steps + dst0, len);
            if (px.requires_grad) {
              MatMap<Scalar>(px.grad_buffer().data(), batch * steps, fin).middleRows(b * steps + src0, len).noalias() +=
                  gb * taps[static_cast<std::size_t>(j)];
            }
            if (pw.requires_grad) dtap.noalias() += gb.transpose() * xin.middleRows(b * steps + src0, len);
          }
          if (pw.requires_grad) {
            using StridedMut = Eigen::Map<RowMat<Scalar>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
            StridedMut(pw.grad_buffer().data() + j, fout, fin,
                       Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(fin * k, k)) += dtap;
          }
        }
      });
}

// ---------------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[label], logits [rows x classes]
/// (a rank-1 tensor is one row). Max-subtracted for stability.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const Index> labels) {
  const Index classes = logits.dim(-1);
  const Index rows = logits.numel() / classes;
  if (static_cast<Index>(labels.size()) != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (Index label : labels) {
    if (label < 0 || label >= classes) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
  ConstMatMap<Scalar> z(logits.raw(), rows, classes);
  RowMat<Scalar> probs(rows, classes);
  Scalar total(0);
  for (Index r = 0; r < rows; ++r) {
    const Scalar m = z.row(r).maxCoeff();
    const auto shifted = (z.row(r).array() - m).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    probs.row(r) = (shifted - lse).exp();
    total += lse - shifted[labels[static_cast<std::size_t>(r)]];
  }
  std::vector<Index> owned(labels.begin(), labels.end());
  Vec<Scalar> out = Vec<Scalar>::Constant(1, total / static_cast<Scalar>(rows));
  return record<Scalar>({1}, std::move(out), {logits},
                        [probs = std::move(probs), owned = std::move(owned), rows, classes](auto& self) {
                          const Scalar scale = self.grad[0] / static_cast<Scalar>(rows);
                          MatMap<Scalar> g(self.parents[0]->grad_buffer().data(), rows, classes);
                          RowMat<Scalar> d = probs;
                          for (Index r = 0; r < rows; ++r) d(r, owned[static_cast<std::size_t>(r)]) -= Scalar(1);
                          g += scale * d;
                        });
}

template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, Index label) {
  const Index labels[1] = {label};
  return softmax_cross_entropy(logits, std::span<const Index>(labels));
}

}  // namespace fumnet
