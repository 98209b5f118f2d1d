#pragma once

// Differentiable free functions over Tensor<Scalar>.

#include "fumnet/tensor.hpp"

#include <span>

namespace fumnet {

enum class ElementwiseOp { add, sub, mul };
enum class Activation { sigmoid, tanh, relu };

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

inline Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range for rank " + std::to_string(rank));
  return axis;
}

inline std::pair<Index, Index> outer_inner(const Shape& shape, Index axis) {
  Index outer = 1;
  Index inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) inner *= shape[static_cast<std::size_t>(i)];
  return {outer, inner};
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "elementwise");
  Vec<Scalar> out;
  switch (op) {
    case ElementwiseOp::add: out = a.data() + b.data(); break;
    case ElementwiseOp::sub: out = a.data() - b.data(); break;
    case ElementwiseOp::mul: out = a.data().cwiseProduct(b.data()); break;
  }
  return record<Scalar>(a.shape(), std::move(out), {a, b}, [op](auto& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    switch (op) {
      case ElementwiseOp::add:
        if (pa.requires_grad) pa.grad_buffer() += g;
        if (pb.requires_grad) pb.grad_buffer() += g;
        break;
      case ElementwiseOp::sub:
        if (pa.requires_grad) pa.grad_buffer() += g;
        if (pb.requires_grad) pb.grad_buffer() -= g;
        break;
      case ElementwiseOp::mul:
        if (pa.requires_grad) pa.grad_buffer() += g.cwiseProduct(pb.data);
        if (pb.requires_grad) pb.grad_buffer() += g.cwiseProduct(pa.data);
        break;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(ElementwiseOp::add, a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(ElementwiseOp::sub, a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(ElementwiseOp::mul, a, b);
}

/// alpha * x + beta, elementwise.
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, Scalar alpha, Scalar beta = Scalar(0)) {
  Vec<Scalar> out = (x.data() * alpha).array() + beta;
  return record<Scalar>(x.shape(), std::move(out), {x}, [alpha](auto& self) {
    self.parents[0]->grad_buffer() += alpha * self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& x) {
  return affine(x, s);
}

template <typename Scalar>
Tensor<Scalar> activation(Activation kind, const Tensor<Scalar>& x) {
  Vec<Scalar> out(x.numel());
  const auto in = x.data().array();
  switch (kind) {
    case Activation::sigmoid: out = in.unaryExpr([](Scalar v) { return detail::stable_sigmoid(v); }); break;
    case Activation::tanh: out = in.tanh(); break;
    case Activation::relu: out = in.max(Scalar(0)); break;
  }
  return record<Scalar>(x.shape(), std::move(out), {x}, [kind](auto& self) {
    auto& p = *self.parents[0];
    const auto y = self.data.array();
    const auto g = self.grad.array();
    switch (kind) {
      case Activation::sigmoid: p.grad_buffer().array() += g * y * (Scalar(1) - y); break;
      case Activation::tanh: p.grad_buffer().array() += g * (Scalar(1) - y.square()); break;
      // Subgradient 0 at exactly 0.
      case Activation::relu:
        p.grad_buffer().array() += (p.data.array() > Scalar(0)).select(g, Scalar(0));
        break;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return activation(Activation::sigmoid, x);
}
template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  return activation(Activation::tanh, x);
}
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return activation(Activation::relu, x);
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vec<Scalar> out(m * n);
  MatMap<Scalar>(out.data(), m, n).noalias() =
      ConstMatMap<Scalar>(a.raw(), m, k) * ConstMatMap<Scalar>(b.raw(), k, n);
  return record<Scalar>({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMatMap<Scalar> g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MatMap<Scalar>(pa.grad_buffer().data(), m, k).noalias() +=
          g * ConstMatMap<Scalar>(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MatMap<Scalar>(pb.grad_buffer().data(), k, n).noalias() +=
          ConstMatMap<Scalar>(pa.data.data(), m, k).transpose() * g;
    }
  });
}

/// Adds bias[f] to every row of x viewed as [rows x F].
template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  const Index f = bias.numel();
  if (x.rank() == 0 || x.dim(-1) != f) {
    throw ShapeError("add_bias: trailing dim of " + to_string(x.shape()) + " != " + std::to_string(f));
  }
  const Index rows = x.numel() / f;
  Vec<Scalar> out = x.data();
  MatMap<Scalar>(out.data(), rows, f).rowwise() += bias.data().transpose();
  return record<Scalar>(x.shape(), std::move(out), {x, bias}, [rows, f](auto& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) px.grad_buffer() += self.grad;
    if (pb.requires_grad) {
      pb.grad_buffer() += ConstMatMap<Scalar>(self.grad.data(), rows, f).colwise().sum().transpose();
    }
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " cannot become " + to_string(shape));
  }
  return record<Scalar>(std::move(shape), x.data(), {x},
                        [](auto& self) { self.parents[0]->grad_buffer() += self.grad; });
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Index rank = parts.front().rank();
  axis = detail::normalize_axis(axis, rank);
  Shape shape = parts.front().shape();
  Index total = 0;
  std::vector<Index> extents;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (static_cast<Index>(probe.size()) != rank) throw ShapeError("concat: rank mismatch");
    probe[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
    if (probe != shape) {
      throw ShapeError("concat: shapes " + to_string(parts.front().shape()) + " and " + to_string(p.shape()) +
                       " differ outside axis " + std::to_string(axis));
    }
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total;
  const auto [outer, inner] = detail::outer_inner(shape, axis);
  const Index row = total * inner;
  Vec<Scalar> out(numel(shape));
  Index offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Index width = extents[i] * inner;
    if (width > 0) {
      MatMap<Scalar>(out.data(), outer, row).middleCols(offset, width) =
          ConstMatMap<Scalar>(parts[i].raw(), outer, width);
    }
    offset += width;
  }
  return record<Scalar>(std::move(shape), std::move(out), parts,
                        [extents, outer = outer, inner = inner, row](auto& self) {
                          ConstMatMap<Scalar> g(self.grad.data(), outer, row);
                          Index off = 0;
                          for (std::size_t i = 0; i < extents.size(); ++i) {
                            const Index width = extents[i] * inner;
                            auto& p = *self.parents[i];
                            if (p.requires_grad && width > 0) {
                              MatMap<Scalar>(p.grad_buffer().data(), outer, width) += g.middleCols(off, width);
                            }
                            off += width;
                          }
                        });
}

/// Concatenation along the feature (last) dimension; the leading sequence
/// dimensions must match.
template <typename Scalar>
Tensor<Scalar> concat_feature(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return concat<Scalar>({a, b}, -1);
}

/// Slice [start, start+length) along `axis`.
template <typename Scalar>
Tensor<Scalar> narrow(const Tensor<Scalar>& x, Index axis, Index start, Index length) {
  axis = detail::normalize_axis(axis, x.rank());
  if (start < 0 || length < 0 || start + length > x.dim(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of extent " + std::to_string(x.dim(axis)));
  }
  Shape shape = x.shape();
  const auto [outer, inner] = detail::outer_inner(shape, axis);
  const Index row = x.dim(axis) * inner;
  shape[static_cast<std::size_t>(axis)] = length;
  const Index width = length * inner;
  Vec<Scalar> out(outer * width);
  MatMap<Scalar>(out.data(), outer, width) =
      ConstMatMap<Scalar>(x.raw(), outer, row).middleCols(start * inner, width);
  return record<Scalar>(std::move(shape), std::move(out), {x},
                        [outer = outer, row, width, begin = start * inner](auto& self) {
                          MatMap<Scalar>(self.parents[0]->grad_buffer().data(), outer, row)
                              .middleCols(begin, width) += ConstMatMap<Scalar>(self.grad.data(), outer, width);
                        });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Vec<Scalar> out = Vec<Scalar>::Constant(1, x.data().sum());
  return record<Scalar>({1}, std::move(out), {x},
                        [](auto& self) { self.parents[0]->grad_buffer().array() += self.grad[0]; });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.numel());
  Vec<Scalar> out = Vec<Scalar>::Constant(1, x.data().sum() * inv);
  return record<Scalar>({1}, std::move(out), {x},
                        [inv](auto& self) { self.parents[0]->grad_buffer().array() += self.grad[0] * inv; });
}

}  // namespace fumnet
