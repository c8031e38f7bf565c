#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "transmix/numerics.hpp"

namespace transmix {

struct AgentDims {
  Index obs_dim = 1;
  Index n_actions = 1;
  Index n_agents = 1;
  Index hidden_dim = 64;

  /// observation ++ last-action one-hot ++ agent-id one-hot
  Index input_dim() const { return obs_dim + n_actions + n_agents; }
};

/// DRQN weights shared by every agent: ReLU input embedding, GRU cell, linear Q head.
template <typename Scalar>
struct AgentParams {
  AgentDims dims;
  LinearParams<Scalar> embed;
  Tensor<Scalar> w_z, u_z, b_z;
  Tensor<Scalar> w_r, u_r, b_r;
  Tensor<Scalar> w_c, u_c, b_c;
  LinearParams<Scalar> head;

  AgentParams() = default;
  explicit AgentParams(const AgentDims& d)
      : dims(d),
        embed(d.input_dim(), d.hidden_dim),
        w_z({d.hidden_dim, d.hidden_dim}),
        u_z({d.hidden_dim, d.hidden_dim}),
        b_z({1, d.hidden_dim}),
        w_r({d.hidden_dim, d.hidden_dim}),
        u_r({d.hidden_dim, d.hidden_dim}),
        b_r({1, d.hidden_dim}),
        w_c({d.hidden_dim, d.hidden_dim}),
        u_c({d.hidden_dim, d.hidden_dim}),
        b_c({1, d.hidden_dim}),
        head(d.hidden_dim, d.n_actions) {
    if (d.hidden_dim < 1 || d.obs_dim < 1 || d.n_actions < 1 || d.n_agents < 1) {
      throw ShapeError("AgentParams: all dimensions must be positive");
    }
  }

  template <typename Rng>
  void init(Rng& rng) {
    embed.init(rng);
    const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(dims.hidden_dim));
    for (Tensor<Scalar>* t : {&w_z, &u_z, &b_z, &w_r, &u_r, &b_r, &w_c, &u_c, &b_c}) fill_uniform(*t, bound, rng);
    head.init(rng);
  }

  template <typename F>
  void visit(F&& f) {
    embed.visit("agent.embed", f);
    f("agent.gru.w_z", w_z);
    f("agent.gru.u_z", u_z);
    f("agent.gru.b_z", b_z);
    f("agent.gru.w_r", w_r);
    f("agent.gru.u_r", u_r);
    f("agent.gru.b_r", b_r);
    f("agent.gru.w_c", w_c);
    f("agent.gru.u_c", u_c);
    f("agent.gru.b_c", b_c);
    head.visit("agent.head", f);
  }
};

template <typename Scalar>
struct AgentStep {
  Var<Scalar> q;       // [rows, n_actions]
  Var<Scalar> hidden;  // [rows, hidden_dim]
};

/// Agent weights placed on a tape once, reusable across unrolled timesteps.
template <typename Scalar>
struct BoundAgent {
  AgentDims dims;
  BoundLinear<Scalar> embed;
  Var<Scalar> w_z, u_z, b_z, w_r, u_r, b_r, w_c, u_c, b_c;
  BoundLinear<Scalar> head;
};

template <typename Scalar>
BoundAgent<Scalar> bind(Tape<Scalar>& tape, AgentParams<Scalar>& p) {
  BoundAgent<Scalar> b;
  b.dims = p.dims;
  b.embed = bind(tape, p.embed);
  b.w_z = tape.param(p.w_z);
  b.u_z = tape.param(p.u_z);
  b.b_z = tape.param(p.b_z);
  b.w_r = tape.param(p.w_r);
  b.u_r = tape.param(p.u_r);
  b.b_r = tape.param(p.b_r);
  b.w_c = tape.param(p.w_c);
  b.u_c = tape.param(p.u_c);
  b.b_c = tape.param(p.b_c);
  b.head = bind(tape, p.head);
  return b;
}

/// One recurrent step for a batch of agent rows.
///   x = relu(embed(input))
///   z = sigmoid(x W_z + h U_z + b_z),  r = sigmoid(x W_r + h U_r + b_r)
///   c = tanh(x W_c + (r * h) U_c + b_c),  h' = (1 - z) * h + z * c
///   q = head(h')
template <typename Scalar>
AgentStep<Scalar> agent_forward(const BoundAgent<Scalar>& a, const Var<Scalar>& input, const Var<Scalar>& h) {
  const auto& d = a.dims;
  if (input.shape().size() != 2 || input.dim(1) != d.input_dim() || h.shape().size() != 2 ||
      h.dim(1) != d.hidden_dim || h.dim(0) != input.dim(0)) {
    throw ShapeError("agent_forward: input " + shape_str(input.shape()) + " / hidden " + shape_str(h.shape()) +
                     " do not match input_dim " + std::to_string(d.input_dim()) + ", hidden_dim " +
                     std::to_string(d.hidden_dim));
  }
  Tape<Scalar>& t = *input.tape();
  auto x = relu(a.embed(input));
  auto z = sigmoid(matmul(x, a.w_z) + matmul(h, a.u_z) + a.b_z);
  auto r = sigmoid(matmul(x, a.w_r) + matmul(h, a.u_r) + a.b_r);
  auto c = tanh(matmul(x, a.w_c) + matmul(r * h, a.u_c) + a.b_c);
  auto one = t.constant(Tensor<Scalar>::filled({1, 1}, Scalar(1)));
  auto h_next = (one - z) * h + z * c;
  return {a.head(h_next), h_next};
}

template <typename Scalar>
Tensor<Scalar> init_hidden(Index n_agents, Index hidden_dim) {
  if (n_agents < 1) throw ShapeError("init_hidden: n_agents must be >= 1");
  return Tensor<Scalar>({n_agents, hidden_dim});
}

using AvailMask = std::vector<std::uint8_t>;

/// Rows of [obs ; one-hot(last action) ; one-hot(agent id)] for every agent.
/// last_actions[i] < 0 means "no previous action" (all-zero one-hot).
TensorD build_agent_inputs(const AgentDims& dims, std::span<const double> obs, std::span<const int> last_actions);

/// Index of the largest q among available actions; ties go to the lowest index.
int masked_argmax(std::span<const double> q, std::span<const std::uint8_t> avail);

/// Epsilon-greedy joint action. q is [n_agents, n_actions]; each agent draws
/// one uniform to decide exploration, then (if exploring) one uniform index
/// among its available actions.
std::vector<int> select_actions(const TensorD& q, const std::vector<AvailMask>& avail, double epsilon,
                                std::mt19937_64& rng);

}  // namespace transmix
