#pragma once

#include <cmath>
#include <random>
#include <string>

#include "transmix/numerics/ops.hpp"

namespace transmix {

/// Fills t with U(-bound, bound).
template <typename Scalar, typename Rng>
void fill_uniform(Tensor<Scalar>& t, Scalar bound, Rng& rng) {
  std::uniform_real_distribution<Scalar> dist(-bound, bound);
  for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
}

/// Weight [in, out] and bias [1, out] of an affine map x W + b.
template <typename Scalar>
struct LinearParams {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  LinearParams() = default;
  LinearParams(Index in, Index out) : weight({in, out}), bias({1, out}) {}

  Index in() const { return weight.dim(0); }
  Index out() const { return weight.dim(1); }

  /// Fan-in scaled uniform initialisation.
  template <typename Rng>
  void init(Rng& rng) {
    const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(in()));
    fill_uniform(weight, bound, rng);
    fill_uniform(bias, bound, rng);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <typename Scalar>
struct BoundLinear {
  Var<Scalar> weight;
  Var<Scalar> bias;

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight, bias); }
};

template <typename Scalar>
BoundLinear<Scalar> bind(Tape<Scalar>& tape, LinearParams<Scalar>& p) {
  return {tape.param(p.weight), tape.param(p.bias)};
}

}  // namespace transmix
