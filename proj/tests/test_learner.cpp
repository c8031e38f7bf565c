#include <doctest.h>

#include <algorithm>
#include <limits>
#include <memory>
#include <random>

#include "transmix/envs.hpp"
#include "transmix/learner.hpp"

using namespace transmix;

namespace {

/// Rolls out uniformly random available actions.
Episode random_episode(Env& env, std::uint64_t seed, std::mt19937_64& rng) {
  Episode e;
  e.n_agents = env.n_agents();
  e.obs_dim = env.obs_dim();
  e.state_dim = env.state_dim();
  e.n_actions = env.n_actions();
  auto r = env.reset(seed);
  auto push_obs = [&](const StepResult& s) {
    e.obs.insert(e.obs.end(), s.obs.begin(), s.obs.end());
    e.state.insert(e.state.end(), s.state.begin(), s.state.end());
    for (const auto& m : env.avail_actions()) e.avail.insert(e.avail.end(), m.begin(), m.end());
  };
  push_obs(r);
  while (!r.terminated) {
    std::vector<int> joint;
    for (const auto& m : env.avail_actions()) {
      std::vector<int> ok;
      for (std::size_t a = 0; a < m.size(); ++a)
        if (m[a]) ok.push_back(static_cast<int>(a));
      joint.push_back(ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)]);
    }
    r = env.step(joint);
    e.actions.insert(e.actions.end(), joint.begin(), joint.end());
    e.reward.push_back(r.reward);
    e.terminated.push_back(r.terminated && !r.episode_limit);
    e.won = r.won;
    ++e.length;
    push_obs(r);
  }
  return e;
}

/// A two-step, one-agent episode with hand-set fields.
Episode tiny_episode(double r0, double r1, bool terminal) {
  Episode e;
  e.n_agents = 1;
  e.obs_dim = 1;
  e.state_dim = 1;
  e.n_actions = 3;
  e.length = 2;
  e.obs = {0.1, 0.2, 0.3};
  e.state = {1, 1, 1};
  e.avail = {1, 1, 1, 1, 0, 1, 1, 0, 1};
  e.actions = {0, 2};
  e.reward = {r0, r1};
  e.terminated = {0, static_cast<std::uint8_t>(terminal)};
  return e;
}

Nets vdn_nets(Index obs_dim, Index n_actions, Index n_agents, Index hidden) {
  AgentDims d{obs_dim, n_actions, n_agents, hidden};
  return make_nets(d, MixerSpec{}, 1);
}

}  // namespace

TEST_CASE("buffer evicts oldest first") {
  ReplayBuffer buf(2);
  for (double r : {1.0, 2.0, 3.0}) buf.insert(tiny_episode(r, 0, true));
  REQUIRE(buf.size() == 2);
  CHECK(buf.at(0).reward[0] == 2.0);
  CHECK(buf.at(1).reward[0] == 3.0);
}

TEST_CASE("buffer rejects malformed episodes") {
  ReplayBuffer buf(4);
  auto early = tiny_episode(0, 0, false);
  early.terminated = {1, 0};
  CHECK_THROWS_AS(buf.insert(early), std::invalid_argument);
  auto short_obs = tiny_episode(0, 0, true);
  short_obs.obs.pop_back();
  CHECK_THROWS_AS(buf.insert(short_obs), std::invalid_argument);
  auto masked = tiny_episode(0, 0, true);
  masked.actions = {0, 1};  // action 1 is masked at t = 1
  CHECK_THROWS_AS(buf.insert(masked), std::invalid_argument);
  CHECK(buf.size() == 0);
}

TEST_CASE("buffer holds its full capacity") {
  ReplayBuffer buf(5000);
  for (int i = 0; i < 5000; ++i) buf.insert(tiny_episode(i, 0, true));
  CHECK(buf.size() == 5000);
  buf.insert(tiny_episode(-1, 0, true));
  CHECK(buf.size() == 5000);
  CHECK(buf.at(0).reward[0] == 1.0);
}

TEST_CASE("buffer sampling") {
  std::mt19937_64 rng(3);
  ReplayBuffer buf(10);
  CHECK_FALSE(buf.sample(1, rng).has_value());
  buf.insert(tiny_episode(7, 0, true));
  auto one = buf.sample(1, rng);
  REQUIRE(one.has_value());
  CHECK(one->reward[0] == 7.0);
  CHECK_FALSE(buf.sample(2, rng).has_value());
  for (double r : {1.0, 2.0, 3.0}) buf.insert(tiny_episode(r, 0, true));
  int counts[8] = {};
  const int draws = 100000;
  for (int k = 0; k < draws; ++k) ++counts[static_cast<int>(buf.sample(1, rng)->reward[0])];
  for (int r : {1, 2, 3, 7}) CHECK(std::abs(counts[r] / double(draws) - 0.25) <= 0.01);
  auto all = buf.sample(4, rng);
  REQUIRE(all.has_value());
  std::vector<double> seen;
  for (int b = 0; b < 4; ++b) seen.push_back(all->reward[all->step_index(b, 0)]);
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<double>{1, 2, 3, 7});
}

TEST_CASE("batches pad shorter episodes") {
  Episode a = tiny_episode(1, 2, true), b = tiny_episode(5, 0, true);
  b.length = 1;
  b.obs.resize(2);
  b.state.resize(2);
  b.avail.resize(6);
  b.actions.resize(1);
  b.reward.resize(1);
  b.terminated = {1};
  auto bt = make_batch({&a, &b});
  CHECK(bt.max_t == 2);
  CHECK(bt.filled == std::vector<std::uint8_t>{1, 1, 1, 0});
  CHECK(bt.terminated == std::vector<std::uint8_t>{0, 1, 1, 0});
  CHECK(bt.filled_count() == 3.0);
  // padded next-step masks expose only noop
  CHECK(bt.avail[(bt.next_index(1, 2)) * 3 + 0] == 1);
  CHECK(bt.avail[(bt.next_index(1, 2)) * 3 + 1] == 0);
  for (std::size_t b = 0; b < 2; ++b) {
    bool zero_seen = false;
    for (int t = 0; t < 2; ++t) {
      const bool f = bt.filled[bt.step_index(static_cast<int>(b), t)];
      CHECK_FALSE((zero_seen && f));
      zero_seen = zero_seen || !f;
    }
  }
}

TEST_CASE("epsilon schedule") {
  TrainConfig cfg;
  cfg.anneal_steps = 50000;
  CHECK(epsilon_at(0, cfg) == 1.0);
  CHECK(epsilon_at(50000, cfg) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(epsilon_at(900000, cfg) == 0.05);
  CHECK(epsilon_at(25000, cfg) == doctest::Approx(0.525).epsilon(1e-15));
  double prev = 2.0;
  for (std::int64_t s = 0; s <= 60000; s += 137) {
    const double e = epsilon_at(s, cfg);
    CHECK(e <= prev);
    CHECK(e >= cfg.eps_end);
    CHECK(e <= cfg.eps_start);
    prev = e;
  }
  CHECK_THROWS_AS(epsilon_at(-1, cfg), std::invalid_argument);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.eps_end = 0.5;
  cfg.eps_start = 0.2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.gamma = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.anneal_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("targets by hand on a one-agent q-table") {
  // zero weights everywhere: each agent's q-values are exactly the head bias
  Nets target = vdn_nets(1, 3, 1, 2);
  target.agent.head.bias = TensorD({1, 3}, {1.0, 5.0, 3.0});
  auto e = tiny_episode(0.5, 2.0, false);
  auto bt = make_batch({&e});
  auto y = compute_targets(bt, target, 0.9);
  // action 1 is masked at t = 1 and t = 2, so the greedy next value is 3
  CHECK(y[0] == doctest::Approx(0.5 + 0.9 * 3.0).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(2.0 + 0.9 * 3.0).epsilon(1e-15));

  auto term = tiny_episode(0.5, 10.0, true);
  auto bt2 = make_batch({&term});
  auto y2 = compute_targets(bt2, target, 0.9);
  CHECK(y2[1] == 10.0);

  auto y0 = compute_targets(bt, target, 0.0);
  CHECK(y0[0] == 0.5);
  CHECK(y0[1] == 2.0);
}

TEST_CASE("td loss examples") {
  Nets nets = vdn_nets(1, 3, 1, 2);
  auto e = tiny_episode(0, 0, true);
  auto bt = make_batch({&e});
  SUBCASE("q equals y") {
    nets.agent.head.bias = TensorD({1, 3}, {0.25, 0.0, -1.0});
    Tape<double> t(false);
    CHECK(td_loss(t, bt, nets, {0.25, -1.0}).value().item() == 0.0);
  }
  SUBCASE("single filled step") {
    bt.filled[1] = 0;
    Tape<double> t(false);
    CHECK(td_loss(t, bt, nets, {2.0, 0.0}).value().item() == 4.0);
  }
  SUBCASE("padding is excluded") {
    bt.filled[1] = 0;
    Tape<double> t(false);
    CHECK(td_loss(t, bt, nets, {3.0, 999.0}).value().item() == 9.0);
    Tape<double> s(false);
    CHECK(td_loss(s, bt, nets, {3.0, 999.0}, LossReduction::kSum).value().item() == 9.0);
  }
  SUBCASE("empty mask is rejected") {
    bt.filled = {0, 0};
    Tape<double> t(false);
    CHECK_THROWS_AS(td_loss(t, bt, nets, {0.0, 0.0}), std::invalid_argument);
  }
}

TEST_CASE("padded entries never change loss or gradients") {
  Env env(fixture("skirmish-2v1"));
  std::mt19937_64 rng(21), init(8);
  std::vector<Episode> eps;
  for (int k = 0; k < 4; ++k) eps.push_back(random_episode(env, static_cast<std::uint64_t>(k), rng));
  std::vector<const Episode*> ptrs;
  for (auto& e : eps) ptrs.push_back(&e);
  auto bt = make_batch(ptrs);
  REQUIRE(bt.filled_count() < double(bt.batch * bt.max_t));

  for (MixerKind kind : {MixerKind::kVdn, MixerKind::kQmix, MixerKind::kTransMix}) {
    MixerSpec ms;
    ms.kind = kind;
    ms.model_dim = 8;
    ms.heads = 2;
    TrainConfig cfg;
    Learner learner(AgentDims{env.obs_dim(), env.n_actions(), env.n_agents(), 8}, ms, env.state_dim(), cfg, init);
    auto run = [&](const EpisodeBatch& b) {
      auto params = learner.live().parameters();
      for (auto* p : params) p->zero_grad();
      auto y = compute_targets(b, learner.target(), 0.99);
      Tape<double> tape;
      auto loss = td_loss(tape, b, learner.live(), y);
      tape.backward(loss);
      std::vector<double> out{loss.value().item()};
      for (auto* p : params) out.insert(out.end(), p->grad().data(), p->grad().data() + p->numel());
      return out;
    };
    const auto base = run(bt);
    auto noisy = bt;
    std::mt19937_64 junk(1);
    std::uniform_real_distribution<double> u(-50, 50);
    for (int b = 0; b < bt.batch; ++b) {
      for (int t = 0; t < bt.max_t; ++t) {
        if (bt.filled[bt.step_index(b, t)]) continue;
        noisy.reward[bt.step_index(b, t)] = u(junk);
        for (int i = 0; i < bt.n_agents; ++i)
          noisy.actions[bt.step_index(b, t) * bt.n_agents + i] = static_cast<int>(junk() % bt.n_actions);
        // padded observations and states beyond the episode's final entry
        const std::size_t nxt = bt.next_index(b, t + 1);
        for (int k = 0; k < bt.n_agents * bt.obs_dim; ++k) noisy.obs[nxt * bt.n_agents * bt.obs_dim + k] = u(junk);
        for (int k = 0; k < bt.state_dim; ++k) noisy.state[nxt * bt.state_dim + k] = u(junk);
      }
    }
    CHECK(run(noisy) == base);
  }
}

TEST_CASE("targets carry no gradient into live parameters") {
  Env env(fixture("skirmish-2v1"));
  std::mt19937_64 rng(2), init(4);
  std::vector<Episode> eps{random_episode(env, 1, rng), random_episode(env, 2, rng)};
  auto bt = make_batch({&eps[0], &eps[1]});
  MixerSpec ms;
  ms.kind = MixerKind::kQmix;
  ms.qmix_embed_dim = 4;
  Learner learner(AgentDims{env.obs_dim(), env.n_actions(), env.n_agents(), 4}, ms, env.state_dim(), TrainConfig{},
                  init);
  const auto y = compute_targets(bt, learner.target(), 0.99);
  for (auto* p : learner.target().parameters()) p->data() += 0.1;
  const auto y_perturbed = compute_targets(bt, learner.target(), 0.99);
  CHECK(y != y_perturbed);
  for (auto* p : learner.target().parameters()) CHECK_FALSE(p->requires_grad());

  auto params = learner.live().parameters();
  auto rep = grad_check<double>([&](Tape<double>& t) { return td_loss(t, bt, learner.live(), y); }, params, 1e-5,
                                1e-4);
  CHECK_MESSAGE(rep.pass, "max rel err " << rep.max_rel_err);
}

TEST_CASE("target sync cadence and exactness") {
  std::mt19937_64 init(5);
  TrainConfig cfg;
  cfg.target_update_episodes = 200;
  Learner learner(AgentDims{2, 3, 2, 4}, MixerSpec{MixerKind::kQmix, 4}, 2, cfg, init);
  for (auto* p : learner.live().parameters()) p->data() += 1.0;
  CHECK_FALSE(learner.maybe_sync_target(199));
  CHECK(learner.maybe_sync_target(200));
  auto live = learner.live().parameters(), target = learner.target().parameters();
  for (std::size_t i = 0; i < live.size(); ++i) CHECK((live[i]->data() - target[i]->data()).abs().maxCoeff() == 0.0);
  CHECK_FALSE(learner.maybe_sync_target(201));
  CHECK_FALSE(learner.maybe_sync_target(399));
  CHECK(learner.maybe_sync_target(400));
  CHECK(learner.maybe_sync_target(650));
  CHECK_FALSE(learner.maybe_sync_target(700));
}

TEST_CASE("train steps are deterministic under a fixed rng") {
  Env env(fixture("additive2x3"));
  auto make = [&](std::mt19937_64& init) {
    auto l = std::make_unique<Learner>(AgentDims{env.obs_dim(), env.n_actions(), env.n_agents(), 8},
                                       MixerSpec{MixerKind::kQmix, 8}, env.state_dim(),
                                       [] {
                                         TrainConfig c;
                                         c.batch_episodes = 4;
                                         return c;
                                       }(),
                                       init);
    std::mt19937_64 roll(3);
    for (int k = 0; k < 8; ++k) l->buffer().insert(random_episode(env, 0, roll));
    return l;
  };
  std::mt19937_64 i1(7), i2(7), s1(9), s2(9);
  auto a = make(i1), b = make(i2);
  for (int k = 0; k < 5; ++k) {
    auto ma = a->train_step(s1), mb = b->train_step(s2);
    REQUIRE(ma.has_value());
    CHECK(ma->loss == mb->loss);
    CHECK(ma->grad_norm == mb->grad_norm);
  }
}

TEST_CASE("loss decreases on a fixed matrix-game batch") {
  Env env(fixture("nonmono3x3"));
  std::mt19937_64 rng(13), init(17);
  std::vector<Episode> eps;
  for (int k = 0; k < 16; ++k) eps.push_back(random_episode(env, 0, rng));
  std::vector<const Episode*> ptrs;
  for (auto& e : eps) ptrs.push_back(&e);
  auto bt = make_batch(ptrs);
  for (MixerKind kind : {MixerKind::kVdn, MixerKind::kQmix, MixerKind::kTransMix}) {
    MixerSpec ms;
    ms.kind = kind;
    ms.model_dim = 8;
    ms.heads = 2;
    TrainConfig cfg;
    Learner learner(AgentDims{env.obs_dim(), env.n_actions(), env.n_agents(), 16}, ms, env.state_dim(), cfg, init);
    double prev = learner.train_on(bt).loss;
    int increases = 0;
    for (int step = 0; step < 50; ++step) {
      const double loss = learner.train_on(bt).loss;
      increases += loss >= prev;
      prev = loss;
    }
    CHECK_MESSAGE(increases == 0, mixer_name(kind));
  }
}

TEST_CASE("non-finite loss aborts") {
  std::mt19937_64 init(1);
  Learner learner(AgentDims{1, 3, 1, 2}, MixerSpec{}, 1, TrainConfig{}, init);
  auto e = tiny_episode(std::numeric_limits<double>::infinity(), 0, true);
  auto bt = make_batch({&e});
  CHECK_THROWS_AS(learner.train_on(bt), NumericalError);
}
