#include "transmix/envs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

namespace transmix {

namespace {

int chebyshev(const Unit& a, const Unit& b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

constexpr int kDx[5] = {0, 0, 0, 1, -1};
constexpr int kDy[5] = {0, 1, -1, 0, 0};

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

void EnvSpec::validate() const {
  require(n_agents >= 1, name + ": n_agents must be >= 1");
  require(n_actions >= 1, name + ": n_actions must be >= 1");
  require(horizon >= 1, name + ": horizon must be >= 1");
  if (kind == EnvKind::kMatrix) {
    require(horizon == 1, name + ": matrix games last exactly one step");
    double expected = 1.0;
    for (int i = 0; i < n_agents; ++i) expected *= n_actions;
    require(static_cast<double>(matrix.payoff.size()) == expected,
            name + ": payoff table needs " + std::to_string(static_cast<long long>(expected)) + " entries");
    for (double v : matrix.payoff) require(std::isfinite(v), name + ": payoffs must be finite");
    return;
  }
  const auto& s = skirmish;
  require(s.width >= 1 && s.height >= 1, name + ": grid must be non-empty");
  require(static_cast<int>(s.allies.size()) == n_agents, name + ": one ally unit per agent");
  require(!s.enemies.empty(), name + ": at least one enemy required");
  require(n_actions == kFirstAttack + static_cast<int>(s.enemies.size()),
          name + ": n_actions must be 5 + number of enemies");
  std::vector<std::pair<int, int>> cells;
  for (const auto* group : {&s.allies, &s.enemies}) {
    for (const auto& u : *group) {
      require(u.hp > 0 && u.damage > 0 && u.sight >= 0, name + ": units need positive hp and damage");
      require(u.x >= 0 && u.x < s.width && u.y >= 0 && u.y < s.height, name + ": unit placed off the grid");
      cells.emplace_back(u.x, u.y);
    }
  }
  std::sort(cells.begin(), cells.end());
  require(std::adjacent_find(cells.begin(), cells.end()) == cells.end(), name + ": units must start on distinct cells");
  require(s.w_damage >= 0.0, name + ": w_damage must be non-negative");
}

Env::Env(EnvSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.kind == EnvKind::kSkirmish) {
    const auto& s = spec_.skirmish;
    for (const auto& u : s.allies) ally_hp_max_.push_back(u.hp);
    double total_hp = 0.0;
    for (const auto& u : s.enemies) {
      enemy_hp_max_.push_back(u.hp);
      total_hp += u.hp;
    }
    if (s.normalize_reward) {
      const double max_return = s.w_damage * total_hp + s.kill_bonus * s.enemies.size() + s.win_bonus;
      if (max_return > 0.0) reward_scale_ = 20.0 / max_return;
    }
  }
}

int Env::obs_dim() const {
  if (spec_.kind == EnvKind::kMatrix) return spec_.n_agents;
  return 3 + 4 * (spec_.n_agents - 1 + static_cast<int>(spec_.skirmish.enemies.size()));
}

int Env::state_dim() const {
  if (spec_.kind == EnvKind::kMatrix) return spec_.n_agents;
  return 3 * (spec_.n_agents + static_cast<int>(spec_.skirmish.enemies.size()));
}

void Env::set_state_noise(double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("state noise sigma must be >= 0");
  noise_sigma_ = sigma;
}

std::vector<double> Env::clean_state() const {
  if (spec_.kind == EnvKind::kMatrix) return std::vector<double>(static_cast<std::size_t>(spec_.n_agents), 1.0);
  std::vector<double> s;
  s.reserve(static_cast<std::size_t>(state_dim()));
  auto emit = [&](const std::vector<Unit>& units, const std::vector<int>& hp_max) {
    for (std::size_t i = 0; i < units.size(); ++i) {
      const auto& u = units[i];
      if (u.hp > 0) {
        s.insert(s.end(), {double(u.x), double(u.y), double(u.hp) / hp_max[i]});
      } else {
        s.insert(s.end(), {0.0, 0.0, 0.0});
      }
    }
  };
  emit(allies_, ally_hp_max_);
  emit(enemies_, enemy_hp_max_);
  return s;
}

void Env::refresh_state() {
  state_ = clean_state();
  if (noise_sigma_ > 0.0) state_ = noisy_state(state_, noise_sigma_, noise_rng_);
}

StepResult Env::reset(std::uint64_t seed) {
  t_ = 0;
  done_ = false;
  noise_rng_.seed(seed);
  if (spec_.kind == EnvKind::kSkirmish) {
    allies_ = spec_.skirmish.allies;
    enemies_ = spec_.skirmish.enemies;
  }
  refresh_state();
  return snapshot(0.0, false, false, false);
}

StepResult Env::snapshot(double reward, bool terminated, bool limit, bool won) const {
  StepResult r;
  r.obs = observe_all();
  r.state = state_;
  r.reward = reward;
  r.terminated = terminated;
  r.episode_limit = limit;
  r.won = won;
  return r;
}

AvailMask Env::avail_actions(int agent) const {
  if (agent < 0 || agent >= spec_.n_agents) throw std::out_of_range("avail_actions: agent index out of range");
  AvailMask mask(static_cast<std::size_t>(spec_.n_actions), 0);
  if (spec_.kind == EnvKind::kMatrix) {
    std::fill(mask.begin(), mask.end(), 1);
    return mask;
  }
  mask[kNoop] = 1;
  const Unit& u = allies_[static_cast<std::size_t>(agent)];
  if (u.hp <= 0) return mask;
  for (int m = 1; m < kFirstAttack; ++m) {
    const int x = u.x + kDx[m], y = u.y + kDy[m];
    mask[static_cast<std::size_t>(m)] = x >= 0 && x < spec_.skirmish.width && y >= 0 && y < spec_.skirmish.height;
  }
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    mask[kFirstAttack + j] = enemies_[j].hp > 0 && chebyshev(u, enemies_[j]) <= 1;
  }
  return mask;
}

std::vector<AvailMask> Env::avail_actions() const {
  std::vector<AvailMask> all;
  for (int i = 0; i < spec_.n_agents; ++i) all.push_back(avail_actions(i));
  return all;
}

std::vector<double> Env::observe(int agent) const {
  if (agent < 0 || agent >= spec_.n_agents) throw std::out_of_range("observe: agent index out of range");
  std::vector<double> o(static_cast<std::size_t>(obs_dim()), 0.0);
  if (spec_.kind == EnvKind::kMatrix) {
    o[static_cast<std::size_t>(agent)] = 1.0;
    return o;
  }
  const Unit& me = allies_[static_cast<std::size_t>(agent)];
  if (me.hp <= 0) return o;
  o[0] = me.x;
  o[1] = me.y;
  o[2] = double(me.hp) / ally_hp_max_[static_cast<std::size_t>(agent)];
  std::size_t k = 3;
  auto slot = [&](const Unit& other, int hp_max) {
    if (other.hp > 0 && chebyshev(me, other) <= me.sight) {
      o[k] = 1.0;
      o[k + 1] = other.x - me.x;
      o[k + 2] = other.y - me.y;
      o[k + 3] = double(other.hp) / hp_max;
    }
    k += 4;
  };
  for (std::size_t i = 0; i < allies_.size(); ++i) {
    if (static_cast<int>(i) != agent) slot(allies_[i], ally_hp_max_[i]);
  }
  for (std::size_t j = 0; j < enemies_.size(); ++j) slot(enemies_[j], enemy_hp_max_[j]);
  return o;
}

std::vector<double> Env::observe_all() const {
  std::vector<double> all;
  all.reserve(static_cast<std::size_t>(spec_.n_agents * obs_dim()));
  for (int i = 0; i < spec_.n_agents; ++i) {
    auto o = observe(i);
    all.insert(all.end(), o.begin(), o.end());
  }
  return all;
}

bool Env::occupied(int x, int y) const {
  for (const auto* group : {&allies_, &enemies_}) {
    for (const auto& u : *group) {
      if (u.hp > 0 && u.x == x && u.y == y) return true;
    }
  }
  return false;
}

StepResult Env::step(std::span<const int> actions) {
  if (done_) throw std::logic_error("env_step called on a finished episode; call reset first");
  if (static_cast<int>(actions.size()) != spec_.n_agents) {
    throw InvalidAction("env_step: expected " + std::to_string(spec_.n_agents) + " actions");
  }
  for (int i = 0; i < spec_.n_agents; ++i) {
    const int a = actions[static_cast<std::size_t>(i)];
    if (a < 0 || a >= spec_.n_actions || !avail_actions(i)[static_cast<std::size_t>(a)]) {
      throw InvalidAction("env_step: action " + std::to_string(a) + " unavailable for agent " + std::to_string(i));
    }
  }
  ++t_;
  bool won = false, over = false;
  double reward;
  if (spec_.kind == EnvKind::kMatrix) {
    reward = step_matrix(actions, won);
    over = true;
  } else {
    reward = step_skirmish(actions, won, over);
  }
  const bool limit = !over && t_ >= spec_.horizon;
  done_ = over || limit;
  refresh_state();
  return snapshot(reward, done_, limit, won);
}

double Env::step_matrix(std::span<const int> actions, bool& won) {
  const double r = matrix_payoff(spec_, actions);
  won = r >= matrix_optimum(spec_).value;
  return r;
}

double Env::step_skirmish(std::span<const int> actions, bool& won, bool& over) {
  const auto& s = spec_.skirmish;
  for (std::size_t i = 0; i < allies_.size(); ++i) {
    const int a = actions[i];
    if (a < 1 || a >= kFirstAttack) continue;
    Unit& u = allies_[i];
    const int x = u.x + kDx[a], y = u.y + kDy[a];
    if (!occupied(x, y)) {
      u.x = x;
      u.y = y;
    }
  }

  int hp_removed = 0, kills = 0;
  for (std::size_t i = 0; i < allies_.size(); ++i) {
    const int a = actions[i];
    if (a < kFirstAttack) continue;
    Unit& target = enemies_[static_cast<std::size_t>(a - kFirstAttack)];
    if (target.hp <= 0 || chebyshev(allies_[i], target) > 1) continue;
    const int dealt = std::min(allies_[i].damage, target.hp);
    target.hp -= dealt;
    hp_removed += dealt;
    if (target.hp == 0) ++kills;
  }

  for (auto& e : enemies_) {
    if (e.hp <= 0) continue;
    int nearest = -1, best = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i < allies_.size(); ++i) {
      if (allies_[i].hp <= 0) continue;
      const int d = chebyshev(e, allies_[i]);
      if (d < best) {
        best = d;
        nearest = static_cast<int>(i);
      }
    }
    if (nearest < 0) break;
    Unit& target = allies_[static_cast<std::size_t>(nearest)];
    if (best <= 1) {
      target.hp = std::max(0, target.hp - e.damage);
      continue;
    }
    const int dx = target.x - e.x, dy = target.y - e.y;
    const int sx = (dx > 0) - (dx < 0), sy = (dy > 0) - (dy < 0);
    const bool x_first = std::abs(dx) >= std::abs(dy);
    const std::pair<int, int> tries[2] = {x_first ? std::pair{sx, 0} : std::pair{0, sy},
                                          x_first ? std::pair{0, sy} : std::pair{sx, 0}};
    for (const auto& [mx, my] : tries) {
      if (mx == 0 && my == 0) continue;
      if (!occupied(e.x + mx, e.y + my)) {
        e.x += mx;
        e.y += my;
        break;
      }
    }
  }

  const bool enemies_dead = std::all_of(enemies_.begin(), enemies_.end(), [](const Unit& u) { return u.hp <= 0; });
  const bool allies_dead = std::all_of(allies_.begin(), allies_.end(), [](const Unit& u) { return u.hp <= 0; });
  won = enemies_dead;
  over = enemies_dead || allies_dead;
  const double r = s.w_damage * hp_removed + s.kill_bonus * kills + (won ? s.win_bonus : 0.0);
  return r * reward_scale_;
}

std::vector<double> noisy_state(std::span<const double> state, double sigma, std::mt19937_64& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("noisy_state: sigma must be >= 0");
  std::vector<double> out(state.begin(), state.end());
  if (sigma == 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& v : out) v += noise(rng);
  return out;
}

double matrix_payoff(const EnvSpec& spec, std::span<const int> joint) {
  if (spec.kind != EnvKind::kMatrix) throw std::invalid_argument("matrix_payoff: not a matrix game");
  std::size_t index = 0;
  for (int a : joint) index = index * static_cast<std::size_t>(spec.n_actions) + static_cast<std::size_t>(a);
  return spec.matrix.payoff.at(index);
}

MatrixOptimum matrix_optimum(const EnvSpec& spec) {
  if (spec.kind != EnvKind::kMatrix) throw std::invalid_argument("matrix_optimum: not a matrix game");
  MatrixOptimum best;
  best.value = -std::numeric_limits<double>::infinity();
  std::vector<int> joint(static_cast<std::size_t>(spec.n_agents), 0);
  for (std::size_t idx = 0; idx < spec.matrix.payoff.size(); ++idx) {
    std::size_t rest = idx;
    for (int i = spec.n_agents - 1; i >= 0; --i) {
      joint[static_cast<std::size_t>(i)] = static_cast<int>(rest % static_cast<std::size_t>(spec.n_actions));
      rest /= static_cast<std::size_t>(spec.n_actions);
    }
    if (spec.matrix.payoff[idx] > best.value) {
      best.value = spec.matrix.payoff[idx];
      best.joint = joint;
    }
  }
  return best;
}

EnvSpec make_matrix_game(std::string name, int n_agents, int n_actions, std::vector<double> payoff) {
  EnvSpec s;
  s.name = std::move(name);
  s.kind = EnvKind::kMatrix;
  s.n_agents = n_agents;
  s.n_actions = n_actions;
  s.horizon = 1;
  s.matrix.payoff = std::move(payoff);
  s.validate();
  return s;
}

namespace {

EnvSpec make_skirmish(std::string name, SkirmishSpec sk, int horizon) {
  EnvSpec s;
  s.name = std::move(name);
  s.kind = EnvKind::kSkirmish;
  s.n_agents = static_cast<int>(sk.allies.size());
  s.n_actions = kFirstAttack + static_cast<int>(sk.enemies.size());
  s.horizon = horizon;
  s.skirmish = std::move(sk);
  s.validate();
  return s;
}

}  // namespace

EnvSpec fixture(const std::string& name) {
  if (name == "additive2x3") {
    const double r1[3] = {0, 2, 1}, r2[3] = {1, 0, 3};
    std::vector<double> payoff;
    for (double a : r1)
      for (double b : r2) payoff.push_back(a + b);
    return make_matrix_game(name, 2, 3, payoff);
  }
  if (name == "nonmono3x3") {
    return make_matrix_game(name, 2, 3, {8, -12, -12, -12, 0, 0, -12, 0, 0});
  }
  if (name == "skirmish-2v1") {
    SkirmishSpec sk;
    sk.width = 6;
    sk.height = 5;
    sk.allies = {Unit{0, 1, 4, 2, 3}, Unit{0, 3, 4, 2, 3}};
    sk.enemies = {Unit{5, 2, 6, 1, 3}};
    return make_skirmish(name, sk, 20);
  }
  if (name == "skirmish-3v3") {
    SkirmishSpec sk;
    sk.width = 7;
    sk.height = 5;
    sk.allies = {Unit{0, 1, 3, 1, 3}, Unit{0, 2, 3, 1, 3}, Unit{0, 3, 3, 1, 3}};
    sk.enemies = {Unit{6, 1, 3, 1, 3}, Unit{6, 2, 3, 1, 3}, Unit{6, 3, 3, 1, 3}};
    return make_skirmish(name, sk, 30);
  }
  std::string known;
  for (const auto& n : fixture_names()) known += (known.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown environment fixture '" + name + "' (known: " + known + ")");
}

std::vector<std::string> fixture_names() { return {"additive2x3", "nonmono3x3", "skirmish-2v1", "skirmish-3v3"}; }

}  // namespace transmix
