#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace transmix {

using AvailMask = std::vector<std::uint8_t>;

struct Unit {
  int x = 0;
  int y = 0;
  int hp = 1;
  int damage = 1;
  int sight = 2;
};

struct MatrixGameSpec {
  /// Payoff for every joint action, agent 0 most significant.
  std::vector<double> payoff;
};

struct SkirmishSpec {
  int width = 5;
  int height = 5;
  std::vector<Unit> allies;
  std::vector<Unit> enemies;
  double w_damage = 1.0;
  double kill_bonus = 10.0;
  double win_bonus = 200.0;
  /// When set, rewards are scaled so the maximum episodic return is 20.
  bool normalize_reward = false;
};

enum class EnvKind { kMatrix, kSkirmish };

struct EnvSpec {
  std::string name;
  EnvKind kind = EnvKind::kMatrix;
  int n_agents = 1;
  int n_actions = 1;
  int horizon = 1;
  MatrixGameSpec matrix;
  SkirmishSpec skirmish;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

class InvalidAction : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StepResult {
  std::vector<double> obs;    // [n_agents * obs_dim]
  std::vector<double> state;  // [state_dim], noise applied if enabled
  double reward = 0.0;
  bool terminated = false;     // episode over for any reason
  bool episode_limit = false;  // ended by the horizon rather than by the game
  bool won = false;
};

/// Skirmish action ids: 0 noop, 1 north (y+1), 2 south (y-1), 3 east (x+1),
/// 4 west (x-1), 5+j attack enemy j.
inline constexpr int kNoop = 0;
inline constexpr int kFirstAttack = 5;

class Env {
 public:
  explicit Env(EnvSpec spec);

  const EnvSpec& spec() const { return spec_; }
  int n_agents() const { return spec_.n_agents; }
  int n_actions() const { return spec_.n_actions; }
  int horizon() const { return spec_.horizon; }
  int obs_dim() const;
  int state_dim() const;
  int t() const { return t_; }

  /// Gaussian corruption of the global state with standard deviation sigma.
  /// Observations and rewards are not affected.
  void set_state_noise(double sigma);
  double state_noise() const { return noise_sigma_; }

  /// Returns the initial observations and state.
  StepResult reset(std::uint64_t seed);
  StepResult step(std::span<const int> actions);

  AvailMask avail_actions(int agent) const;
  std::vector<AvailMask> avail_actions() const;
  std::vector<double> observe(int agent) const;
  std::vector<double> observe_all() const;
  /// Current state, noisy if noise is enabled. Stable between steps.
  const std::vector<double>& state() const { return state_; }
  std::vector<double> clean_state() const;

  const std::vector<Unit>& allies() const { return allies_; }
  const std::vector<Unit>& enemies() const { return enemies_; }

 private:
  void refresh_state();
  StepResult snapshot(double reward, bool terminated, bool limit, bool won) const;
  double step_matrix(std::span<const int> actions, bool& won);
  double step_skirmish(std::span<const int> actions, bool& won, bool& over);
  bool occupied(int x, int y) const;

  EnvSpec spec_;
  std::vector<Unit> allies_, enemies_;
  std::vector<int> ally_hp_max_, enemy_hp_max_;
  int t_ = 0;
  bool done_ = true;
  double reward_scale_ = 1.0;
  double noise_sigma_ = 0.0;
  std::mt19937_64 noise_rng_;
  std::vector<double> state_;
};

/// state + N(0, sigma^2) per dimension.
std::vector<double> noisy_state(std::span<const double> state, double sigma, std::mt19937_64& rng);

/// Brute-force optimum of a matrix game: best joint action and its payoff.
struct MatrixOptimum {
  std::vector<int> joint;
  double value = 0.0;
};
MatrixOptimum matrix_optimum(const EnvSpec& spec);
double matrix_payoff(const EnvSpec& spec, std::span<const int> joint);

EnvSpec make_matrix_game(std::string name, int n_agents, int n_actions, std::vector<double> payoff);

/// Bundled fixtures: additive2x3, nonmono3x3, skirmish-2v1, skirmish-3v3.
EnvSpec fixture(const std::string& name);
std::vector<std::string> fixture_names();

}  // namespace transmix
