#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mmshare/autodiff.hpp"
#include "mmshare/errors.hpp"
#include "mmshare/model.hpp"

namespace mmshare {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates, one pair per parameter, plus the step
/// counter used for bias correction.
template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m;
  std::vector<Tensor<Scalar>> v;
  std::int64_t step = 0;

  static AdamState for_params(std::span<Parameter<Scalar>* const> params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.push_back(Tensor<Scalar>::zeros(p->value.shape()));
      s.v.push_back(Tensor<Scalar>::zeros(p->value.shape()));
    }
    return s;
  }
};

/// One Adam update with bias correction, using each Parameter's accumulated
/// grad. No weight decay.
template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: state holds " + std::to_string(state.m.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape() ||
        state.v[i].shape() != p.value.shape()) {
      throw DimensionError("adam_step: shape mismatch for parameter " + p.name + " " + shape_string(p.value.shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const auto b1 = static_cast<Scalar>(config.beta1), b2 = static_cast<Scalar>(config.beta2);
  const auto correction1 = static_cast<Scalar>(1.0 - std::pow(config.beta1, t));
  const auto correction2 = static_cast<Scalar>(1.0 - std::pow(config.beta2, t));
  const auto lr = static_cast<Scalar>(config.lr), eps = static_cast<Scalar>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto m = state.m[i].vector();
    auto v = state.v[i].vector();
    const auto g = p.grad.vector();
    m.array() = b1 * m.array() + (Scalar(1) - b1) * g.array();
    v.array() = b2 * v.array() + (Scalar(1) - b2) * g.array().square();
    p.value.vector().array() -= lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
  }
}

/// Adam over every parameter of a store, in store order.
template <typename Scalar>
class Adam {
 public:
  Adam(ParameterStore<Scalar>& store, AdamConfig config) : config_(config) {
    for (const auto& e : store.entries()) params_.push_back(e.param.get());
    state_ = AdamState<Scalar>::for_params(params_);
  }

  void step() { adam_step<Scalar>(params_, state_, config_); }
  const AdamState<Scalar>& state() const { return state_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<Parameter<Scalar>*> params_;
  AdamState<Scalar> state_;
};

}  // namespace mmshare
