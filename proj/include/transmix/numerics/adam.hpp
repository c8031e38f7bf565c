#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "transmix/numerics/tensor.hpp"

namespace transmix {

template <typename Scalar>
struct AdamConfig {
  Scalar lr = Scalar(1e-3);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
};

/// First/second moment estimates for a fixed, ordered list of parameters.
template <typename Scalar>
struct AdamState {
  using Array = typename Tensor<Scalar>::Array;

  AdamConfig<Scalar> config;
  std::vector<Array> m;
  std::vector<Array> v;
  std::int64_t t = 0;

  AdamState() = default;
  AdamState(AdamConfig<Scalar> cfg, const std::vector<Tensor<Scalar>*>& params) : config(cfg) {
    for (const auto* p : params) {
      m.push_back(Array::Zero(p->numel()));
      v.push_back(Array::Zero(p->numel()));
    }
  }
};

template <typename Scalar>
Scalar global_grad_norm(const std::vector<Tensor<Scalar>*>& params) {
  Scalar sq = 0;
  for (const auto* p : params) sq += p->grad().square().sum();
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint L2 norm is at most max_norm.
template <typename Scalar>
void clip_grad_norm(const std::vector<Tensor<Scalar>*>& params, Scalar max_norm) {
  const Scalar norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    for (auto* p : params) p->grad() *= max_norm / norm;
  }
}

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Throws NumericalError without touching anything if a gradient is not finite.
template <typename Scalar>
void adam_step(const std::vector<Tensor<Scalar>*>& params, AdamState<Scalar>& state) {
  if (params.size() != state.m.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but state tracks " +
                     std::to_string(state.m.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (p.grad().size() != p.numel() || state.m[i].size() != p.numel()) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " of shape " + shape_str(p.shape()) +
                       " has mismatched grad or moment buffers");
    }
    if (!p.grad().allFinite()) {
      throw NumericalError("adam_step: non-finite gradient in parameter " + std::to_string(i) +
                           " (training diverged)");
    }
  }
  const auto& c = state.config;
  state.t += 1;
  const Scalar bc1 = Scalar(1) - std::pow(c.beta1, static_cast<Scalar>(state.t));
  const Scalar bc2 = Scalar(1) - std::pow(c.beta2, static_cast<Scalar>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = p.grad();
    state.m[i] = c.beta1 * state.m[i] + (Scalar(1) - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (Scalar(1) - c.beta2) * g.square();
    p.data() -= c.lr * (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + c.eps);
  }
}

}  // namespace transmix
