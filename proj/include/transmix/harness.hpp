#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "transmix/envs.hpp"
#include "transmix/learner.hpp"

namespace transmix {

// ---------------------------------------------------------------------------
// Configuration

struct EvalConfig {
  std::int64_t interval_steps = 10000;
  int episodes = 20;
};

struct NoiseConfig {
  bool enabled = false;
  double sigma = 0.05;
};

struct ExperimentConfig {
  EnvSpec env;
  MixerSpec mixer;
  Index hidden_dim = 64;
  TrainConfig train;
  EvalConfig eval;
  NoiseConfig noise;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int workers = 1;
  std::string out_dir = "runs";
  bool record_wall_clock = false;

  double state_noise_sigma() const { return noise.enabled ? noise.sigma : 0.0; }
  AgentDims agent_dims() const;
};

/// Raised for malformed or out-of-range configuration; the message names the
/// offending key and, when known, its line in the source text.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::string& path);
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Fully resolved configuration with every default spelled out.
nlohmann::json config_to_json(const ExperimentConfig& cfg);
nlohmann::json env_to_json(const EnvSpec& env);

/// FNV-1a over the canonical JSON of everything that influences results
/// (seeds, out_dir and record_wall_clock excluded).
std::string config_digest(const ExperimentConfig& cfg);
/// As config_digest, additionally ignoring the noise block; clean and noisy
/// runs of the same experiment share it.
std::string base_digest(const ExperimentConfig& cfg);

std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  nlohmann::json config;  // resolved configuration
  std::string digest;
  std::map<std::string, std::int64_t> counters;
  std::map<std::string, std::string> text;  // e.g. serialized rng states
  std::map<std::string, TensorD> tensors;
};

class DigestMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Verifies the stored digest against the stored config, and against
/// expected_digest when given.
Checkpoint load_checkpoint(const std::string& path, const std::optional<std::string>& expected_digest = std::nullopt);

// ---------------------------------------------------------------------------
// Rollouts and evaluation

/// Plays one episode with epsilon-greedy decentralized agents.
Episode rollout(Env& env, AgentParams<double>& agent, double epsilon, std::uint64_t env_seed, std::mt19937_64& rng);

struct EvalResult {
  double win_rate = 0.0;
  double return_mean = 0.0;
  int episodes = 0;
};

EvalResult run_eval(AgentParams<double>& agent, const EnvSpec& env, int episodes, double noise_sigma,
                    std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training runs

struct MetricsRow {
  std::uint64_t seed = 0;
  std::int64_t env_steps = 0;
  std::int64_t episodes = 0;
  double epsilon = 0.0;
  std::optional<double> train_loss;
  double test_return_mean = 0.0;
  double test_win_rate = 0.0;
  std::int64_t wall_ms = 0;
};

inline constexpr const char* kMetricsHeader =
    "seed,env_steps,episodes,epsilon,train_loss,test_return_mean,test_win_rate,wall_ms";
inline constexpr const char* kEventsHeader = "kind,env_steps,episodes,value";

std::string format_metrics_row(const MetricsRow& row);
std::vector<MetricsRow> read_metrics(const std::string& path);

struct RunOptions {
  /// Directory for this seed's files; defaults to <cfg.out_dir>/seed_<seed>.
  std::string run_dir;
  bool resume = false;
  std::ostream* log = nullptr;
  /// Ends this invocation right after the first evaluation at or beyond this
  /// step count, leaving a resumable checkpoint (simulated interruption).
  std::optional<std::int64_t> stop_at_env_steps;
};

struct RunResult {
  std::vector<MetricsRow> rows;
  std::string run_dir;
  std::string checkpoint_path;
};

/// Online collect/train/evaluate loop for one seed. Writes metrics.csv,
/// events.csv, run.json and checkpoint.bin into the run directory.
RunResult run_train(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts = {});

/// Writes <out_dir>/config.json with the resolved config and its digests.
void write_experiment_config(const ExperimentConfig& cfg, const std::string& out_dir);

/// Raises the C allocator's trim and mmap thresholds so heap memory freed
/// between training steps stays mapped. No-op outside glibc.
void tune_allocator();

/// Rebuilds the live agent network stored in a checkpoint.
AgentParams<double> agent_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Summaries

struct SeedFinal {
  std::uint64_t seed = 0;
  double win_rate = 0.0;
  double return_mean = 0.0;
};

struct ExperimentSummary {
  std::string dir;
  std::string env;
  std::string mixer;
  double noise_sigma = 0.0;
  std::string digest;
  std::string base_digest;
  std::vector<SeedFinal> seeds;
  double median_win_rate = 0.0;
  double median_return = 0.0;
};

struct PairedSummary {
  std::string env;
  std::string mixer;
  double noise_sigma = 0.0;
  double clean_win_rate = 0.0;
  double noisy_win_rate = 0.0;
  double drop = 0.0;
};

struct SummaryReport {
  std::vector<ExperimentSummary> experiments;
  std::vector<PairedSummary> paired;
};

double median(std::vector<double> values);
ExperimentSummary summarize_experiment(const std::string& dir);
SummaryReport summarize(const std::vector<std::string>& dirs);
/// Aligned text table followed by a CSV block.
void print_report(const SummaryReport& report, std::ostream& os);

// ---------------------------------------------------------------------------
// Gradient checks

struct GradCheckLine {
  std::string name;
  int trials = 0;
  double max_rel_err = 0.0;
  bool pass = true;
};

std::vector<GradCheckLine> run_gradcheck_suite(int trials, double tol, std::uint64_t seed = 2024);

}  // namespace transmix
