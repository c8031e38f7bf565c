#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "transmix/harness.hpp"

namespace {

using namespace transmix;

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kNumerical = 2;

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> workers;
  bool resume = false;
};

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (a.seed) cfg.seeds = {*a.seed};
  if (a.out) cfg.out_dir = *a.out;
  if (a.workers) {
    if (*a.workers < 1) throw ConfigError("--workers must be >= 1");
    cfg.workers = *a.workers;
  }
  write_experiment_config(cfg, cfg.out_dir);
  std::cout << "config " << config_digest(cfg) << "  env " << cfg.env.name << "  mixer "
            << mixer_name(cfg.mixer.kind) << "  out " << cfg.out_dir << std::endl;
  for (const auto seed : cfg.seeds) {
    RunOptions opts;
    opts.resume = a.resume;
    opts.log = &std::cout;
    const auto res = run_train(cfg, seed, opts);
    std::cout << "seed " << seed << " done: " << res.run_dir << std::endl;
  }
  return kOk;
}

int cmd_eval(const std::string& path, std::optional<int> episodes, std::optional<double> sigma) {
  const Checkpoint ck = load_checkpoint(path);
  const ExperimentConfig cfg = config_from_json(ck.config);
  const int n = episodes.value_or(cfg.eval.episodes);
  if (n < 1) throw ConfigError("--episodes must be >= 1");
  const double s = sigma.value_or(cfg.state_noise_sigma());
  if (s < 0) throw ConfigError("--noise-sigma must be >= 0");
  AgentParams<double> agent = agent_from_checkpoint(ck);
  const auto res = run_eval(agent, cfg.env, n, s, std::stoull(ck.text.at("seed")));
  std::printf("env %s  episodes %d  noise_sigma %g  win_rate %.6g  return_mean %.6g\n", cfg.env.name.c_str(),
              res.episodes, s, res.win_rate, res.return_mean);
  return kOk;
}

int cmd_gradcheck(int trials, double tol) {
  const auto lines = run_gradcheck_suite(trials, tol);
  bool ok = true;
  for (const auto& l : lines) {
    std::printf("%-20s trials %4d  max_rel_err %.3e  %s\n", l.name.c_str(), l.trials, l.max_rel_err,
                l.pass ? "PASS" : "FAIL");
    ok = ok && l.pass;
  }
  std::printf("%s\n", ok ? "all gradient checks passed" : "gradient check failures");
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TransMix multi-agent value factorization: train, evaluate, summarize"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run the collect/train/evaluate loop for every configured seed");
  t->add_option("--config", train.config, "JSON experiment config")->required()->check(CLI::ExistingFile);
  t->add_option("--seed", train.seed, "Run only this seed");
  t->add_option("--out", train.out, "Output directory (overrides out_dir)");
  t->add_option("--workers", train.workers, "Parallel collection workers");
  t->add_flag("--resume", train.resume, "Continue from checkpoint.bin in each seed directory");

  std::string ckpt;
  std::optional<int> episodes;
  std::optional<double> sigma;
  auto* e = app.add_subcommand("eval", "Greedy decentralized evaluation of a checkpoint");
  e->add_option("--checkpoint", ckpt, "checkpoint.bin file")->required()->check(CLI::ExistingFile);
  e->add_option("--episodes", episodes, "Test episodes (default: config eval.episodes)");
  e->add_option("--noise-sigma", sigma, "Global-state noise std-dev (default: config)");

  std::vector<std::string> dirs;
  auto* s = app.add_subcommand("summarize", "Median final win rate and return per experiment directory");
  s->add_option("dirs", dirs, "Experiment directories")->required()->check(CLI::ExistingDirectory);

  int trials = 100;
  double tol = 1e-4;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable kernel");
  g->add_option("--trials", trials, "Random trials per kernel")->check(CLI::PositiveNumber);
  g->add_option("--tol", tol, "Relative error tolerance")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kValidation;
  }

  tune_allocator();
  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ckpt, episodes, sigma);
    if (*s) {
      print_report(summarize(dirs), std::cout);
      return kOk;
    }
    return cmd_gradcheck(trials, tol);
  } catch (const NumericalError& err) {
    std::cerr << "numerical abort: " << err.what() << "\n";
    return kNumerical;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kValidation;
  }
}
