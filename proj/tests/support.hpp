#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mmshare/autodiff.hpp"
#include "mmshare/rng.hpp"

namespace mmshare::testing {

template <typename Scalar = double>
Tensor<Scalar> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<Scalar> t(std::move(shape));
  Rng rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(scale * rng.normal());
  return t;
}

using ScalarFn = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

inline constexpr double kGradientFloor = 1e-6;

struct GradCheck {
  double max_relative_error = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// Analytic gradient of fn (via backward) against central differences with
/// step eps, per parameter: |g - g_fd|_2 / max(|g|_2, |g_fd|_2, 1e-6).
/// Gradients that are identically zero (attention key biases) only carry
/// round-off, so the floor keeps their ratio from comparing noise to noise.
inline GradCheck check_gradients(const std::vector<Parameter<double>*>& params, const ScalarFn& fn,
                                 double eps = 1e-3) {
  auto evaluate = [&]() {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto* p : params) vars.push_back(tape.param(*p));
    return fn(tape, vars).value().item();
  };
  for (auto* p : params) p->grad.set_zero();
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto* p : params) vars.push_back(tape.param(*p));
    tape.backward(fn(tape, vars));
  }
  GradCheck out;
  for (auto* pp : params) {
    auto& p = *pp;
    Tensor<double> numeric(p.value.shape());
    for (Index i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = evaluate();
      p.value[i] = saved - eps;
      const double down = evaluate();
      p.value[i] = saved;
      numeric[i] = (up - down) / (2 * eps);
    }
    const double diff = (p.grad.vector() - numeric.vector()).norm();
    const double denom = std::max({p.grad.vector().norm(), numeric.vector().norm(), kGradientFloor});
    if (diff / denom > out.max_relative_error) {
      out.max_relative_error = diff / denom;
      out.worst_analytic = p.grad.vector().norm();
      out.worst_numeric = numeric.vector().norm();
    }
  }
  return out;
}

inline GradCheck check_gradients(std::vector<Parameter<double>>& params, const ScalarFn& fn, double eps = 1e-3) {
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  return check_gradients(ptrs, fn, eps);
}

/// Reduces any output to a scalar through fixed random weights so every
/// output element contributes a distinct gradient.
inline Var<double> weighted_sum(Tape<double>& tape, const Var<double>& y, std::uint64_t seed = 99) {
  return sum(mul(y, tape.constant(random_tensor(y.shape(), seed))));
}

}  // namespace mmshare::testing
