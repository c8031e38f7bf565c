#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "transmix/harness.hpp"

namespace transmix {

namespace fs = std::filesystem;
using nlohmann::json;

Episode rollout(Env& env, AgentParams<double>& agent, double epsilon, std::uint64_t env_seed, std::mt19937_64& rng) {
  const AgentDims& d = agent.dims;
  if (d.n_agents != env.n_agents() || d.n_actions != env.n_actions() || d.obs_dim != env.obs_dim()) {
    throw ShapeError("rollout: agent network does not match environment " + env.spec().name);
  }
  Episode e;
  e.n_agents = env.n_agents();
  e.obs_dim = env.obs_dim();
  e.state_dim = env.state_dim();
  e.n_actions = env.n_actions();

  auto r = env.reset(env_seed);
  auto record_obs = [&](const StepResult& s, const std::vector<AvailMask>& avail) {
    e.obs.insert(e.obs.end(), s.obs.begin(), s.obs.end());
    e.state.insert(e.state.end(), s.state.begin(), s.state.end());
    for (const auto& m : avail) e.avail.insert(e.avail.end(), m.begin(), m.end());
  };
  auto avail = env.avail_actions();
  record_obs(r, avail);

  Tape<double> tape(false);
  auto net = bind(tape, agent);
  auto h = tape.constant(init_hidden<double>(d.n_agents, d.hidden_dim));
  std::vector<int> last(static_cast<std::size_t>(d.n_agents), -1);
  while (!r.terminated) {
    auto step = agent_forward(net, tape.constant(build_agent_inputs(d, r.obs, last)), h);
    h = step.hidden;
    last = select_actions(step.q.value(), avail, epsilon, rng);
    r = env.step(last);
    avail = env.avail_actions();
    e.actions.insert(e.actions.end(), last.begin(), last.end());
    e.reward.push_back(r.reward);
    e.terminated.push_back(r.terminated && !r.episode_limit);
    e.won = r.won;
    ++e.length;
    record_obs(r, avail);
  }
  return e;
}

EvalResult run_eval(AgentParams<double>& agent, const EnvSpec& spec, int episodes, double noise_sigma,
                    std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("run_eval: episodes must be >= 1");
  Env env(spec);
  env.set_state_noise(noise_sigma);
  std::mt19937_64 rng(seed);
  EvalResult out;
  out.episodes = episodes;
  int wins = 0;
  double total = 0.0;
  for (int k = 0; k < episodes; ++k) {
    auto e = rollout(env, agent, 0.0, rng(), rng);
    wins += e.won;
    total += e.episode_return();
  }
  out.win_rate = static_cast<double>(wins) / episodes;
  out.return_mean = total / episodes;
  return out;
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

template <typename Rng>
std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

template <typename Rng>
void restore_rng(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw std::runtime_error("checkpoint: corrupt rng state");
}

/// Keeps the header and the data rows whose env_steps column is <= limit.
void truncate_csv(const fs::path& path, std::int64_t limit, int steps_column) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    for (int c = 0; c <= steps_column; ++c) std::getline(ss, cell, ',');
    if (!cell.empty() && std::stoll(cell) <= limit) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << kept;
}

struct Worker {
  Env env;
  std::mt19937_64 rng;
};

}  // namespace

std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.seed) + "," + std::to_string(r.env_steps) + "," + std::to_string(r.episodes) + "," +
                  fmt6(r.epsilon) + ",";
  if (r.train_loss) s += fmt6(*r.train_loss);
  s += "," + fmt6(r.test_return_mean) + "," + fmt6(r.test_win_rate) + "," + std::to_string(r.wall_ms);
  return s;
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw std::runtime_error(path + ": unexpected metrics header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 8) throw std::runtime_error(path + ": malformed metrics row: " + line);
    MetricsRow r;
    r.seed = std::stoull(cells[0]);
    r.env_steps = std::stoll(cells[1]);
    r.episodes = std::stoll(cells[2]);
    r.epsilon = std::stod(cells[3]);
    if (!cells[4].empty()) r.train_loss = std::stod(cells[4]);
    r.test_return_mean = std::stod(cells[5]);
    r.test_win_rate = std::stod(cells[6]);
    r.wall_ms = std::stoll(cells[7]);
    rows.push_back(r);
  }
  return rows;
}

void write_experiment_config(const ExperimentConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  json j = config_to_json(cfg);
  j["digest"] = config_digest(cfg);
  j["base_digest"] = base_digest(cfg);
  std::ofstream os(fs::path(out_dir) / "config.json", std::ios::binary | std::ios::trunc);
  os << j.dump(2) << "\n";
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

AgentParams<double> agent_from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = config_from_json(ckpt.config);
  AgentParams<double> agent(cfg.agent_dims());
  agent.visit([&](const std::string& name, TensorD& t) {
    auto it = ckpt.tensors.find("live." + name);
    if (it == ckpt.tensors.end()) throw std::runtime_error("checkpoint: missing tensor live." + name);
    if (it->second.shape() != t.shape()) throw ShapeError("checkpoint: tensor live." + name + " has the wrong shape");
    t.data() = it->second.data();
  });
  return agent;
}

RunResult run_train(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts) {
  const std::string digest = config_digest(cfg);
  RunResult result;
  result.run_dir = opts.run_dir.empty() ? (fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed))).string()
                                        : opts.run_dir;
  const fs::path dir(result.run_dir);
  fs::create_directories(dir);
  const fs::path metrics_path = dir / "metrics.csv", events_path = dir / "events.csv";
  result.checkpoint_path = (dir / "checkpoint.bin").string();

  Env probe(cfg.env);
  const AgentDims agent_dims = cfg.agent_dims();
  std::mt19937_64 init_rng(derive_seed(seed, 1));
  std::mt19937_64 train_rng(derive_seed(seed, 2));
  Learner learner(agent_dims, cfg.mixer, probe.state_dim(), cfg.train, init_rng);
  std::vector<Worker> workers;
  for (int k = 0; k < cfg.workers; ++k) {
    workers.push_back(Worker{Env(cfg.env), std::mt19937_64(derive_seed(seed, 100, static_cast<std::uint64_t>(k)))});
    workers.back().env.set_state_noise(cfg.state_noise_sigma());
  }

  std::int64_t env_steps = 0, episodes = 0, next_eval = 0, evals = 0;

  // Parameter names in a fixed order, shared by live, target and moments.
  std::vector<std::string> names;
  learner.live().visit([&](const std::string& n, TensorD&) { names.push_back(n); });

  auto make_checkpoint = [&] {
    Checkpoint ck;
    ck.config = config_to_json(cfg);
    ck.digest = digest;
    ck.counters = {{"env_steps", env_steps}, {"episodes", episodes}, {"next_eval", next_eval},
                   {"evals", evals},         {"adam_t", learner.optimizer().t},
                   {"last_sync", learner.last_sync_episode()}};
    ck.text["seed"] = std::to_string(seed);
    ck.text["rng.train"] = rng_state(train_rng);
    for (std::size_t k = 0; k < workers.size(); ++k) ck.text["rng.worker." + std::to_string(k)] = rng_state(workers[k].rng);
    auto live = learner.live().parameters(), target = learner.target().parameters();
    auto& opt = learner.optimizer();
    for (std::size_t i = 0; i < names.size(); ++i) {
      ck.tensors.emplace("live." + names[i], TensorD(live[i]->shape(), live[i]->data()));
      ck.tensors.emplace("target." + names[i], TensorD(target[i]->shape(), target[i]->data()));
      ck.tensors.emplace("adam.m." + names[i], TensorD(live[i]->shape(), opt.m[i]));
      ck.tensors.emplace("adam.v." + names[i], TensorD(live[i]->shape(), opt.v[i]));
    }
    return ck;
  };

  const bool resuming = opts.resume && fs::exists(result.checkpoint_path);
  if (resuming) {
    const Checkpoint ck = load_checkpoint(result.checkpoint_path, digest);
    if (ck.text.at("seed") != std::to_string(seed)) {
      throw std::runtime_error("resume: checkpoint belongs to seed " + ck.text.at("seed"));
    }
    env_steps = ck.counters.at("env_steps");
    episodes = ck.counters.at("episodes");
    next_eval = ck.counters.at("next_eval");
    evals = ck.counters.at("evals");
    learner.optimizer().t = ck.counters.at("adam_t");
    learner.set_last_sync_episode(ck.counters.at("last_sync"));
    restore_rng(train_rng, ck.text.at("rng.train"));
    for (std::size_t k = 0; k < workers.size(); ++k) {
      auto it = ck.text.find("rng.worker." + std::to_string(k));
      if (it == ck.text.end()) throw std::runtime_error("resume: checkpoint was written with fewer workers");
      restore_rng(workers[k].rng, it->second);
    }
    auto live = learner.live().parameters(), target = learner.target().parameters();
    auto& opt = learner.optimizer();
    for (std::size_t i = 0; i < names.size(); ++i) {
      live[i]->data() = ck.tensors.at("live." + names[i]).data();
      target[i]->data() = ck.tensors.at("target." + names[i]).data();
      opt.m[i] = ck.tensors.at("adam.m." + names[i]).data();
      opt.v[i] = ck.tensors.at("adam.v." + names[i]).data();
    }
    truncate_csv(metrics_path, env_steps, 1);
    truncate_csv(events_path, env_steps, 1);
  }

  std::ofstream metrics(metrics_path, std::ios::binary | (resuming ? std::ios::app : std::ios::trunc));
  std::ofstream events(events_path, std::ios::binary | (resuming ? std::ios::app : std::ios::trunc));
  if (!metrics || !events) throw std::runtime_error("cannot write run files in " + dir.string());
  if (!resuming) {
    metrics << kMetricsHeader << "\n" << std::flush;
    events << kEventsHeader << "\n" << std::flush;
  }
  {
    json run{{"seed", seed}, {"digest", digest}, {"base_digest", base_digest(cfg)}};
    std::ofstream os(dir / "run.json", std::ios::binary | std::ios::trunc);
    os << run.dump(2) << "\n";
  }

  const auto t0 = std::chrono::steady_clock::now();
  double loss_sum = 0.0;
  std::int64_t loss_count = 0, last_eval_steps = resuming ? env_steps : -1;

  auto evaluate = [&] {
    AgentParams<double> snapshot = learner.live().agent;
    const auto res = run_eval(snapshot, cfg.env, cfg.eval.episodes, cfg.state_noise_sigma(),
                              derive_seed(seed, 3, static_cast<std::uint64_t>(evals)));
    MetricsRow row;
    row.seed = seed;
    row.env_steps = env_steps;
    row.episodes = episodes;
    row.epsilon = epsilon_at(env_steps, cfg.train);
    if (loss_count > 0) row.train_loss = loss_sum / static_cast<double>(loss_count);
    row.test_return_mean = res.return_mean;
    row.test_win_rate = res.win_rate;
    if (cfg.record_wall_clock) {
      row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    }
    ++evals;
    loss_sum = 0.0;
    loss_count = 0;
    last_eval_steps = env_steps;
    next_eval = (env_steps / cfg.eval.interval_steps + 1) * cfg.eval.interval_steps;
    metrics << format_metrics_row(row) << "\n" << std::flush;
    events << "eval," << env_steps << "," << episodes << "," << cfg.eval.episodes << "\n" << std::flush;
    result.rows.push_back(row);
    save_checkpoint(result.checkpoint_path, make_checkpoint());
    if (opts.log) {
      *opts.log << "seed " << seed << "  steps " << env_steps << "  episodes " << episodes << "  eps "
                << fmt6(row.epsilon) << "  loss " << (row.train_loss ? fmt6(*row.train_loss) : "-") << "  return "
                << fmt6(row.test_return_mean) << "  win " << fmt6(row.test_win_rate) << std::endl;
    }
  };

  const std::int64_t total = cfg.train.total_env_steps;
  std::vector<Episode> round(workers.size());
  while (true) {
    if (env_steps >= next_eval) evaluate();
    if (env_steps >= total) break;
    if (opts.stop_at_env_steps && env_steps >= *opts.stop_at_env_steps && last_eval_steps == env_steps) return result;
    const double eps = epsilon_at(env_steps, cfg.train);
    const AgentParams<double>& live_agent = learner.live().agent;
    if (workers.size() == 1) {
      AgentParams<double> snapshot = live_agent;
      round[0] = rollout(workers[0].env, snapshot, eps, workers[0].rng(), workers[0].rng);
    } else {
      std::vector<std::thread> threads;
      std::vector<std::exception_ptr> errors(workers.size());
      for (std::size_t k = 0; k < workers.size(); ++k) {
        threads.emplace_back([&, k, snapshot = live_agent]() mutable {
          try {
            round[k] = rollout(workers[k].env, snapshot, eps, workers[k].rng(), workers[k].rng);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        });
      }
      for (auto& t : threads) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (auto& ep : round) {
      env_steps += ep.length;
      ++episodes;
      learner.buffer().insert(std::move(ep));
      if (auto m = learner.train_step(train_rng)) {
        loss_sum += m->loss;
        ++loss_count;
      }
      if (learner.maybe_sync_target(episodes)) {
        events << "target_sync," << env_steps << "," << episodes << "," << episodes << "\n" << std::flush;
      }
    }
  }
  if (last_eval_steps != env_steps) evaluate();
  return result;
}

}  // namespace transmix
