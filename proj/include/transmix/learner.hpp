#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "transmix/agent.hpp"
#include "transmix/mixers.hpp"

namespace transmix {

/// One complete episode of T steps. Per-step fields have T entries; obs,
/// state and avail carry an extra entry for the observation reached after
/// the last action, which is needed to bootstrap truncated episodes.
struct Episode {
  int n_agents = 1;
  int obs_dim = 1;
  int state_dim = 1;
  int n_actions = 1;
  int length = 0;

  std::vector<double> obs;              // [(T+1), n, obs_dim]
  std::vector<double> state;            // [(T+1), state_dim]
  std::vector<std::uint8_t> avail;      // [(T+1), n, n_actions]
  std::vector<int> actions;             // [T, n]
  std::vector<double> reward;           // [T]
  std::vector<std::uint8_t> terminated; // [T], true terminal only (not time-limit)
  bool won = false;

  double episode_return() const;
  /// Throws std::invalid_argument when sizes or flags are inconsistent.
  void validate() const;
};

/// B episodes padded to the longest one. filled[b,t] = 0 marks padding.
struct EpisodeBatch {
  int batch = 0;
  int max_t = 0;
  int n_agents = 1;
  int obs_dim = 1;
  int state_dim = 1;
  int n_actions = 1;

  std::vector<double> obs;              // [B, T+1, n, obs_dim]
  std::vector<double> state;            // [B, T+1, state_dim]
  std::vector<std::uint8_t> avail;      // [B, T+1, n, n_actions]
  std::vector<int> actions;             // [B, T, n]
  std::vector<double> reward;           // [B, T]
  std::vector<std::uint8_t> terminated; // [B, T]
  std::vector<std::uint8_t> filled;     // [B, T]

  std::size_t step_index(int b, int t) const { return static_cast<std::size_t>(b) * max_t + t; }
  std::size_t next_index(int b, int t) const { return static_cast<std::size_t>(b) * (max_t + 1) + t; }
  double filled_count() const;
};

EpisodeBatch make_batch(const std::vector<const Episode*>& episodes);

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 5000);

  void insert(Episode episode);
  /// b episodes uniformly without replacement, or nullopt if fewer are stored.
  std::optional<EpisodeBatch> sample(std::size_t b, std::mt19937_64& rng) const;

  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Episode& at(std::size_t i) const { return episodes_.at(i); }
  void clear() { episodes_.clear(); }

 private:
  std::size_t capacity_;
  std::deque<Episode> episodes_;
};

enum class LossReduction { kMean, kSum };

struct TrainConfig {
  double gamma = 0.99;
  int batch_episodes = 32;
  int buffer_capacity = 5000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double eps_start = 1.0;
  double eps_end = 0.05;
  std::int64_t anneal_steps = 10000;
  std::int64_t target_update_episodes = 200;
  std::int64_t total_env_steps = 100000;
  LossReduction loss_reduction = LossReduction::kMean;
  double grad_clip_norm = 0.0;  // 0 disables clipping

  void validate() const;
};

double epsilon_at(std::int64_t step, const TrainConfig& cfg);

struct MixerSpec {
  MixerKind kind = MixerKind::kVdn;
  Index qmix_embed_dim = 32;
  Index layers = 2;
  Index heads = 4;
  Index model_dim = 32;
  Index state_tokens = 4;
  Index skip_dim = 16;
};

MixerParams<double> make_mixer(const MixerSpec& spec, Index n_agents, Index state_dim, Index hidden_dim);

/// Agent and mixer parameters trained jointly.
struct Nets {
  AgentParams<double> agent;
  MixerParams<double> mixer;

  template <typename F>
  void visit(F&& f) {
    agent.visit(f);
    visit_params(mixer, f);
  }
  std::vector<TensorD*> parameters();
};

Nets make_nets(const AgentDims& agent_dims, const MixerSpec& mixer, Index state_dim);

/// Copies every parameter value of src into dst (same architecture).
void copy_parameters(Nets& src, Nets& dst);

/// Greedy-at-t+1 TD targets y[t*B + b] from the target networks. Carries no gradient.
std::vector<double> compute_targets(const EpisodeBatch& batch, Nets& target, double gamma);

/// Q_tot(tau_t, a_t) for every (t, b), time-major, as a [T*B, 1] variable.
Var<double> chosen_qtot(Tape<double>& tape, const EpisodeBatch& batch, Nets& nets);

/// Masked squared TD error; mean over filled steps or plain sum.
Var<double> td_loss(Tape<double>& tape, const EpisodeBatch& batch, Nets& nets, const std::vector<double>& y,
                    LossReduction reduction = LossReduction::kMean);

struct TrainMetrics {
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// Live networks, target copies, optimizer and replay buffer owned by the
/// training thread.
class Learner {
 public:
  Learner(const AgentDims& agent_dims, const MixerSpec& mixer, Index state_dim, const TrainConfig& cfg,
          std::mt19937_64& init_rng);
  Learner(const Learner&) = delete;
  Learner& operator=(const Learner&) = delete;

  /// Samples a batch and applies one Adam update; nullopt while the buffer is
  /// still smaller than batch_episodes.
  std::optional<TrainMetrics> train_step(std::mt19937_64& rng);
  /// One update on a given batch.
  TrainMetrics train_on(const EpisodeBatch& batch);
  /// Copies live into target when episode_counter has crossed a multiple of
  /// target_update_episodes since the last sync. Returns true on sync.
  bool maybe_sync_target(std::int64_t episode_counter);
  void sync_target();

  Nets& live() { return live_; }
  Nets& target() { return target_; }
  ReplayBuffer& buffer() { return buffer_; }
  AdamState<double>& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t last_sync_episode() const { return last_sync_; }
  void set_last_sync_episode(std::int64_t e) { last_sync_ = e; }

 private:
  TrainConfig cfg_;
  Nets live_;
  Nets target_;
  AdamState<double> opt_;
  ReplayBuffer buffer_;
  std::int64_t last_sync_ = 0;
};

}  // namespace transmix
