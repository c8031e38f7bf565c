#include "transmix/agent.hpp"

#include <stdexcept>

namespace transmix {

TensorD build_agent_inputs(const AgentDims& dims, std::span<const double> obs, std::span<const int> last_actions) {
  const Index n = dims.n_agents;
  if (static_cast<Index>(obs.size()) != n * dims.obs_dim || static_cast<Index>(last_actions.size()) != n) {
    throw ShapeError("build_agent_inputs: expected " + std::to_string(n) + " agents of obs_dim " +
                     std::to_string(dims.obs_dim));
  }
  TensorD x({n, dims.input_dim()});
  auto m = x.matrix();
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < dims.obs_dim; ++k) m(i, k) = obs[static_cast<std::size_t>(i * dims.obs_dim + k)];
    const int a = last_actions[static_cast<std::size_t>(i)];
    if (a >= 0) m(i, dims.obs_dim + a) = 1.0;
    m(i, dims.obs_dim + dims.n_actions + i) = 1.0;
  }
  return x;
}

int masked_argmax(std::span<const double> q, std::span<const std::uint8_t> avail) {
  if (q.size() != avail.size()) throw ShapeError("masked_argmax: q and mask lengths differ");
  int best = -1;
  for (std::size_t a = 0; a < q.size(); ++a) {
    if (!avail[a]) continue;
    if (best < 0 || q[a] > q[static_cast<std::size_t>(best)]) best = static_cast<int>(a);
  }
  if (best < 0) throw std::invalid_argument("masked_argmax: no available action");
  return best;
}

std::vector<int> select_actions(const TensorD& q, const std::vector<AvailMask>& avail, double epsilon,
                                std::mt19937_64& rng) {
  if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("select_actions: epsilon outside [0,1]");
  const Index n = q.dim(0), n_actions = q.dim(1);
  if (static_cast<Index>(avail.size()) != n) throw ShapeError("select_actions: one mask per agent required");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<int> actions(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto& mask = avail[static_cast<std::size_t>(i)];
    if (static_cast<Index>(mask.size()) != n_actions) throw ShapeError("select_actions: mask length mismatch");
    std::vector<int> allowed;
    for (Index a = 0; a < n_actions; ++a) {
      if (mask[static_cast<std::size_t>(a)]) allowed.push_back(static_cast<int>(a));
    }
    if (allowed.empty()) {
      throw std::invalid_argument("select_actions: agent " + std::to_string(i) + " has no available action");
    }
    if (coin(rng) < epsilon) {
      std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
      actions[static_cast<std::size_t>(i)] = allowed[pick(rng)];
    } else {
      std::span<const double> row(q.data().data() + i * n_actions, static_cast<std::size_t>(n_actions));
      actions[static_cast<std::size_t>(i)] = masked_argmax(row, mask);
    }
  }
  return actions;
}

}  // namespace transmix
