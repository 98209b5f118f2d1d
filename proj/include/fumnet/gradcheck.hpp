#pragma once

#include "fumnet/tensor.hpp"

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace fumnet {

struct NonFiniteCoordinate {
  std::size_t tensor = 0;
  Index coordinate = 0;
};

struct GradcheckReport {
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  Index coordinates_checked = 0;
  std::vector<NonFiniteCoordinate> non_finite;
  bool passed = false;
};

/// Error measure shared by all checks: |a - n| / max(|a|, |n|, floor). The
/// floor keeps near-zero gradients from turning rounding noise into a large
/// relative error.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients of the scalar `loss_fn` with respect to every
/// tensor in `inputs` against central differences. `loss_fn` must rebuild its
/// graph from the current input values on every call.
template <typename Scalar>
GradcheckReport gradcheck(const std::function<Tensor<Scalar>()>& loss_fn, std::vector<Tensor<Scalar>> inputs,
                          double step, double tol, Index max_coords_per_tensor = -1) {
  if (!(step > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
  GradcheckReport report;
  report.tolerance = tol;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor<Scalar> loss = loss_fn();
    if (loss.numel() != 1) throw ShapeError("gradcheck: function must be scalar-valued");
    loss.backward();
  }
  auto evaluate = [&]() {
    NoGradGuard guard;
    return static_cast<double>(loss_fn().item());
  };

  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    const Vec<Scalar> analytic = in.has_grad() ? in.grad() : Vec<Scalar>::Zero(in.numel());
    const Index n = in.numel();
    Index stride = 1;
    if (max_coords_per_tensor > 0 && n > max_coords_per_tensor) {
      stride = (n + max_coords_per_tensor - 1) / max_coords_per_tensor;
    }
    for (Index i = 0; i < n; i += stride) {
      const Scalar saved = in.data()[i];
      in.data()[i] = saved + static_cast<Scalar>(step);
      const double plus = evaluate();
      in.data()[i] = saved - static_cast<Scalar>(step);
      const double minus = evaluate();
      in.data()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = static_cast<double>(analytic[i]);
      ++report.coordinates_checked;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        report.non_finite.push_back({t, i});
        continue;
      }
      report.max_relative_error = std::max(report.max_relative_error, relative_error(a, numeric));
    }
  }
  report.passed = report.non_finite.empty() && report.max_relative_error < tol;
  return report;
}

/// Single-input convenience form: f maps x to a scalar.
template <typename Scalar>
GradcheckReport gradcheck(const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& f, Tensor<Scalar> x,
                          double step, double tol) {
  return gradcheck<Scalar>([&f, &x]() { return f(x); }, {x}, step, tol);
}

}  // namespace fumnet
