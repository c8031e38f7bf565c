#include "transmix/learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace transmix {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::size_t sz(Index v) { return static_cast<std::size_t>(v); }

}  // namespace

// ---------------------------------------------------------------------------
// Episodes and batches

double Episode::episode_return() const { return std::accumulate(reward.begin(), reward.end(), 0.0); }

void Episode::validate() const {
  require(n_agents >= 1 && obs_dim >= 1 && state_dim >= 1 && n_actions >= 1, "episode: dimensions must be positive");
  require(length >= 1, "episode: must contain at least one step");
  const std::size_t T = static_cast<std::size_t>(length), n = static_cast<std::size_t>(n_agents);
  require(obs.size() == (T + 1) * n * obs_dim, "episode: obs has the wrong size");
  require(state.size() == (T + 1) * state_dim, "episode: state has the wrong size");
  require(avail.size() == (T + 1) * n * n_actions, "episode: avail has the wrong size");
  require(actions.size() == T * n, "episode: actions has the wrong size");
  require(reward.size() == T && terminated.size() == T, "episode: reward/terminated have the wrong size");
  for (std::size_t t = 0; t + 1 < T; ++t) require(!terminated[t], "episode: terminated before its last step");
  for (std::size_t k = 0; k < actions.size(); ++k) {
    const int a = actions[k];
    require(a >= 0 && a < n_actions, "episode: action out of range");
    require(avail[k * n_actions + static_cast<std::size_t>(a)], "episode: recorded action was not available");
  }
  for (std::size_t k = 0; k < (T + 1) * n; ++k) {
    const auto first = avail.begin() + static_cast<std::ptrdiff_t>(k * n_actions);
    require(std::any_of(first, first + n_actions, [](std::uint8_t v) { return v != 0; }),
            "episode: an agent has no available action");
  }
  for (double r : reward) require(std::isfinite(r), "episode: non-finite reward");
}

double EpisodeBatch::filled_count() const {
  return static_cast<double>(std::count(filled.begin(), filled.end(), std::uint8_t{1}));
}

EpisodeBatch make_batch(const std::vector<const Episode*>& episodes) {
  require(!episodes.empty(), "make_batch: no episodes");
  const Episode& f = *episodes.front();
  EpisodeBatch bt;
  bt.batch = static_cast<int>(episodes.size());
  bt.n_agents = f.n_agents;
  bt.obs_dim = f.obs_dim;
  bt.state_dim = f.state_dim;
  bt.n_actions = f.n_actions;
  for (const auto* e : episodes) {
    require(e->n_agents == f.n_agents && e->obs_dim == f.obs_dim && e->state_dim == f.state_dim &&
                e->n_actions == f.n_actions,
            "make_batch: episodes from different environments");
    bt.max_t = std::max(bt.max_t, e->length);
  }
  const std::size_t B = episodes.size(), T = static_cast<std::size_t>(bt.max_t);
  const std::size_t n = static_cast<std::size_t>(bt.n_agents), od = static_cast<std::size_t>(bt.obs_dim),
                    sd = static_cast<std::size_t>(bt.state_dim), na = static_cast<std::size_t>(bt.n_actions);
  bt.obs.assign(B * (T + 1) * n * od, 0.0);
  bt.state.assign(B * (T + 1) * sd, 0.0);
  bt.avail.assign(B * (T + 1) * n * na, 0);
  bt.actions.assign(B * T * n, 0);
  bt.reward.assign(B * T, 0.0);
  bt.terminated.assign(B * T, 0);
  bt.filled.assign(B * T, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const Episode& e = *episodes[b];
    const std::size_t len = static_cast<std::size_t>(e.length);
    std::copy(e.obs.begin(), e.obs.end(), bt.obs.begin() + static_cast<std::ptrdiff_t>(b * (T + 1) * n * od));
    std::copy(e.state.begin(), e.state.end(), bt.state.begin() + static_cast<std::ptrdiff_t>(b * (T + 1) * sd));
    std::copy(e.avail.begin(), e.avail.end(), bt.avail.begin() + static_cast<std::ptrdiff_t>(b * (T + 1) * n * na));
    // padded steps expose only noop so greedy selection stays well defined
    for (std::size_t t = len + 1; t <= T; ++t)
      for (std::size_t i = 0; i < n; ++i) bt.avail[((b * (T + 1) + t) * n + i) * na] = 1;
    std::copy(e.actions.begin(), e.actions.end(), bt.actions.begin() + static_cast<std::ptrdiff_t>(b * T * n));
    for (std::size_t t = 0; t < len; ++t) {
      bt.reward[b * T + t] = e.reward[t];
      bt.terminated[b * T + t] = e.terminated[t];
      bt.filled[b * T + t] = 1;
    }
  }
  return bt;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  require(capacity >= 1, "replay buffer capacity must be >= 1");
}

void ReplayBuffer::insert(Episode episode) {
  episode.validate();
  if (!episodes_.empty()) {
    const auto& f = episodes_.front();
    require(f.n_agents == episode.n_agents && f.obs_dim == episode.obs_dim && f.state_dim == episode.state_dim &&
                f.n_actions == episode.n_actions,
            "replay buffer: episode dimensions differ from stored episodes");
  }
  episodes_.push_back(std::move(episode));
  while (episodes_.size() > capacity_) episodes_.pop_front();
}

std::optional<EpisodeBatch> ReplayBuffer::sample(std::size_t b, std::mt19937_64& rng) const {
  if (b == 0 || b > episodes_.size()) return std::nullopt;
  std::vector<std::size_t> all(episodes_.size()), picked;
  std::iota(all.begin(), all.end(), std::size_t{0});
  picked.reserve(b);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), static_cast<std::ptrdiff_t>(b), rng);
  std::vector<const Episode*> eps;
  for (auto i : picked) eps.push_back(&episodes_[i]);
  return make_batch(eps);
}

// ---------------------------------------------------------------------------
// Configuration and schedule

void TrainConfig::validate() const {
  require(gamma >= 0.0 && gamma < 1.0, "train.gamma must be in [0, 1)");
  require(batch_episodes >= 1, "train.batch_episodes must be >= 1");
  require(buffer_capacity >= batch_episodes, "train.buffer_capacity must be >= train.batch_episodes");
  require(lr > 0.0, "train.lr must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "train.betas must be in [0, 1)");
  require(adam_eps > 0.0, "train.adam_eps must be > 0");
  require(0.0 <= eps_end && eps_end <= eps_start && eps_start <= 1.0,
          "train epsilon schedule needs 0 <= eps_end <= eps_start <= 1");
  require(anneal_steps >= 1, "train.anneal_steps must be >= 1");
  require(target_update_episodes >= 1, "train.target_update_episodes must be >= 1");
  require(total_env_steps >= 0, "train.total_env_steps must be >= 0");
  require(grad_clip_norm >= 0.0, "train.grad_clip_norm must be >= 0");
}

double epsilon_at(std::int64_t step, const TrainConfig& cfg) {
  require(step >= 0, "epsilon_at: step must be >= 0");
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.anneal_steps);
  return std::max(cfg.eps_end, cfg.eps_start - (cfg.eps_start - cfg.eps_end) * frac);
}

// ---------------------------------------------------------------------------
// Networks

MixerParams<double> make_mixer(const MixerSpec& spec, Index n_agents, Index state_dim, Index hidden_dim) {
  switch (spec.kind) {
    case MixerKind::kVdn:
      return VdnParams<double>{n_agents};
    case MixerKind::kQmix:
      return QmixParams<double>(QmixDims{n_agents, state_dim, spec.qmix_embed_dim});
    case MixerKind::kTransMix: {
      TransMixDims d;
      d.n_agents = n_agents;
      d.state_dim = state_dim;
      d.history_dim = hidden_dim;
      d.layers = spec.layers;
      d.heads = spec.heads;
      d.model_dim = spec.model_dim;
      d.state_tokens = spec.state_tokens;
      d.skip_dim = spec.skip_dim;
      return TransMixParams<double>(d);
    }
  }
  throw std::invalid_argument("make_mixer: unknown mixer kind");
}

std::vector<TensorD*> Nets::parameters() {
  std::vector<TensorD*> out;
  visit([&](const std::string&, TensorD& t) { out.push_back(&t); });
  return out;
}

Nets make_nets(const AgentDims& agent_dims, const MixerSpec& mixer, Index state_dim) {
  return Nets{AgentParams<double>(agent_dims), make_mixer(mixer, agent_dims.n_agents, state_dim, agent_dims.hidden_dim)};
}

void copy_parameters(Nets& src, Nets& dst) {
  auto from = src.parameters(), to = dst.parameters();
  if (from.size() != to.size()) throw ShapeError("copy_parameters: architectures differ");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]->shape() != to[i]->shape()) throw ShapeError("copy_parameters: architectures differ");
    to[i]->data() = from[i]->data();
  }
}

namespace {

AgentDims batch_agent_dims(const EpisodeBatch& bt, const Nets& nets) {
  const auto& d = nets.agent.dims;
  if (d.obs_dim != bt.obs_dim || d.n_actions != bt.n_actions || d.n_agents != bt.n_agents) {
    throw ShapeError("batch dimensions (obs " + std::to_string(bt.obs_dim) + ", actions " +
                     std::to_string(bt.n_actions) + ", agents " + std::to_string(bt.n_agents) +
                     ") do not match the agent network");
  }
  return d;
}

/// Agent input rows (b * n + i) for timestep t.
TensorD step_inputs(const EpisodeBatch& bt, const AgentDims& d, int t) {
  const Index n = d.n_agents, rows = static_cast<Index>(bt.batch) * n;
  TensorD x({rows, d.input_dim()});
  auto m = x.matrix();
  for (int b = 0; b < bt.batch; ++b) {
    const std::size_t obs_base = bt.next_index(b, t) * sz(n * d.obs_dim);
    for (Index i = 0; i < n; ++i) {
      const Index r = b * n + i;
      for (Index k = 0; k < d.obs_dim; ++k) m(r, k) = bt.obs[obs_base + sz(i * d.obs_dim + k)];
      if (t > 0) m(r, d.obs_dim + bt.actions[bt.step_index(b, t - 1) * sz(n) + sz(i)]) = 1.0;
      m(r, d.obs_dim + d.n_actions + i) = 1.0;
    }
  }
  return x;
}

/// States for every (t, b) with t in [t0, t0 + T), time-major.
TensorD stacked_states(const EpisodeBatch& bt, int t0) {
  const Index B = bt.batch, T = bt.max_t, s = bt.state_dim;
  TensorD st({T * B, s});
  for (Index t = 0; t < T; ++t)
    for (Index b = 0; b < B; ++b) {
      const std::size_t src = bt.next_index(static_cast<int>(b), static_cast<int>(t) + t0) * sz(s);
      for (Index k = 0; k < s; ++k) st[(t * B + b) * s + k] = bt.state[src + sz(k)];
    }
  return st;
}

}  // namespace

std::vector<double> compute_targets(const EpisodeBatch& bt, Nets& target, double gamma) {
  const AgentDims d = batch_agent_dims(bt, target);
  const Index B = bt.batch, T = bt.max_t, n = d.n_agents, A = d.n_actions, H = d.hidden_dim;
  Tape<double> tape(false);
  auto agent = bind(tape, target.agent);
  auto h = tape.constant(init_hidden<double>(B * n, H));

  TensorD q_next({T * B, n}), hist_next({T * B * n, H});
  for (int t = 0; t <= T; ++t) {
    auto step = agent_forward(agent, tape.constant(step_inputs(bt, d, t)), h);
    h = step.hidden;
    if (t == 0) continue;
    const auto& qv = step.q.value();
    const auto& hv = step.hidden.value();
    for (Index b = 0; b < B; ++b) {
      for (Index i = 0; i < n; ++i) {
        const Index row = b * n + i;
        const std::size_t mask_at = (bt.next_index(static_cast<int>(b), t) * sz(n) + sz(i)) * sz(A);
        const int best = masked_argmax(std::span<const double>(qv.data().data() + row * A, sz(A)),
                                       std::span<const std::uint8_t>(bt.avail.data() + mask_at, sz(A)));
        const Index sample = (t - 1) * B + b;
        q_next[sample * n + i] = qv[row * A + best];
        hist_next.matrix().row(sample * n + i) = hv.data().segment(row * H, H).matrix().transpose();
      }
    }
  }
  MixerInput<double> in{tape.constant(std::move(q_next)), tape.constant(std::move(hist_next)),
                        tape.constant(stacked_states(bt, 1))};
  const auto& next_value = mixer_forward(tape, target.mixer, in).value();

  std::vector<double> y(sz(T * B), 0.0);
  for (Index t = 0; t < T; ++t)
    for (Index b = 0; b < B; ++b) {
      const std::size_t k = bt.step_index(static_cast<int>(b), static_cast<int>(t));
      if (!bt.filled[k]) continue;
      const double cont = bt.terminated[k] ? 0.0 : gamma;
      y[sz(t * B + b)] = bt.reward[k] + cont * next_value[t * B + b];
    }
  return y;
}

Var<double> chosen_qtot(Tape<double>& tape, const EpisodeBatch& bt, Nets& nets) {
  const AgentDims d = batch_agent_dims(bt, nets);
  const Index B = bt.batch, T = bt.max_t, n = d.n_agents, A = d.n_actions;
  auto agent = bind(tape, nets.agent);
  auto h = tape.constant(init_hidden<double>(B * n, d.hidden_dim));
  std::vector<Var<double>> chosen, hidden;
  chosen.reserve(sz(T));
  hidden.reserve(sz(T));
  for (int t = 0; t < T; ++t) {
    auto step = agent_forward(agent, tape.constant(step_inputs(bt, d, t)), h);
    h = step.hidden;
    TensorD pick({B * n, A});
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < n; ++i) {
        const int a = bt.actions[bt.step_index(static_cast<int>(b), t) * sz(n) + sz(i)];
        pick[(b * n + i) * A + a] = 1.0;
      }
    chosen.push_back(reshape(sum(step.q * tape.constant(std::move(pick)), 1), {B, n}));
    hidden.push_back(step.hidden);
  }
  MixerInput<double> in{concat(chosen, 0), concat(hidden, 0), tape.constant(stacked_states(bt, 0))};
  return mixer_forward(tape, nets.mixer, in);
}

Var<double> td_loss(Tape<double>& tape, const EpisodeBatch& bt, Nets& nets, const std::vector<double>& y,
                    LossReduction reduction) {
  const Index B = bt.batch, T = bt.max_t;
  if (static_cast<Index>(y.size()) != T * B) throw ShapeError("td_loss: targets do not match the batch");
  const double count = bt.filled_count();
  require(count > 0.0, "td_loss: batch has no filled steps");
  TensorD yt({T * B, 1}), mask({T * B, 1});
  for (Index t = 0; t < T; ++t)
    for (Index b = 0; b < B; ++b) {
      const std::size_t k = bt.step_index(static_cast<int>(b), static_cast<int>(t));
      if (!bt.filled[k]) continue;
      mask[t * B + b] = 1.0;
      yt[t * B + b] = y[sz(t * B + b)];
    }
  auto q = chosen_qtot(tape, bt, nets);
  auto err = q - tape.constant(std::move(yt));
  auto total = sum_all(tape.constant(std::move(mask)) * err * err);
  return reduction == LossReduction::kMean ? scale(total, 1.0 / count) : total;
}

// ---------------------------------------------------------------------------
// Learner

Learner::Learner(const AgentDims& agent_dims, const MixerSpec& mixer, Index state_dim, const TrainConfig& cfg,
                 std::mt19937_64& init_rng)
    : cfg_(cfg),
      live_(make_nets(agent_dims, mixer, state_dim)),
      target_(live_),
      buffer_(static_cast<std::size_t>(cfg.buffer_capacity)) {
  cfg_.validate();
  live_.agent.init(init_rng);
  init_params(live_.mixer, init_rng);
  for (auto* p : live_.parameters()) p->set_requires_grad(true);
  copy_parameters(live_, target_);
  opt_ = AdamState<double>(AdamConfig<double>{cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps}, live_.parameters());
}

std::optional<TrainMetrics> Learner::train_step(std::mt19937_64& rng) {
  auto batch = buffer_.sample(static_cast<std::size_t>(cfg_.batch_episodes), rng);
  if (!batch) return std::nullopt;
  return train_on(*batch);
}

TrainMetrics Learner::train_on(const EpisodeBatch& batch) {
  auto params = live_.parameters();
  for (auto* p : params) p->zero_grad();
  const auto y = compute_targets(batch, target_, cfg_.gamma);
  Tape<double> tape;
  auto loss = td_loss(tape, batch, live_, y, cfg_.loss_reduction);
  TrainMetrics m;
  m.loss = loss.value().item();
  if (!std::isfinite(m.loss)) throw NumericalError("train_step: non-finite loss (" + std::to_string(m.loss) + ")");
  tape.backward(loss);
  m.grad_norm = global_grad_norm(params);
  if (cfg_.grad_clip_norm > 0.0) clip_grad_norm(params, cfg_.grad_clip_norm);
  adam_step(params, opt_);
  return m;
}

bool Learner::maybe_sync_target(std::int64_t episode_counter) {
  const std::int64_t u = cfg_.target_update_episodes;
  if (episode_counter / u <= last_sync_ / u) return false;
  sync_target();
  last_sync_ = episode_counter;
  return true;
}

void Learner::sync_target() { copy_parameters(live_, target_); }

}  // namespace transmix
