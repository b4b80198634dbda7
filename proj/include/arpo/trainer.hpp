#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "arpo/environment.hpp"
#include "arpo/grpo.hpp"
#include "arpo/policy_net.hpp"
#include "arpo/replay.hpp"
#include "arpo/rollout.hpp"

namespace arpo {

enum class Algorithm : int { kGrpo = 0, kArpo = 1, kRejectSft = 2 };
std::string_view to_string(Algorithm a);
Algorithm algorithm_from_string(std::string_view s);

/// How the starting ("untrained") policy is produced: a seeded random network
/// briefly fine-tuned on demonstrations of a separately generated task pool.
/// This stands in for a pretrained agent that is competent but imperfect.
struct BaselineConfig {
  std::uint64_t seed = 1234;
  int embed_dim = 32;
  int hidden_dim = 64;
  int relative_window = 2;
  int pool_tasks = 256;
  int pool_infeasible = 16;
  int pool_min_len = 2;
  int pool_max_len = 8;
  double demo_noise = 0.15;
  int pretrain_steps = 200;
  int pretrain_batch = 16;
  double pretrain_lr = 3e-3;
};

struct TrainConfig {
  Algorithm algorithm = Algorithm::kArpo;
  int epochs = 15;
  int rollout_batch_tasks = 32;
  int group_size = 8;
  int minibatch_size = 8;  // trajectories per minibatch
  int grad_accumulation = 4;
  AdamWConfig optimizer;   // toy lr 3e-3; 1e-6 is the 7B-scale setting
  ClipConfig clip;
  double rollout_temperature = 1.0;
  double eval_temperature = 0.6;
  int eval_episodes = 8;
  int eval_every = 0;      // epochs between evaluations; 0 = final epoch only
  int replay_capacity = 4;
  std::uint64_t seed = 0;
  int n_envs = 256;
  int max_steps = kDefaultMaxSteps;
  LatencyModel latency;
  BaselineConfig baseline;
  /// Passes over the positive corpus in reject-sampling SFT. One pass uses each
  /// kept trajectory once, as the RL update uses each rollout once.
  int sft_passes = 1;
  int selection_rollouts = 16;
  int selection_keep_threshold = 1;
  bool write_transcripts = false;

  void validate() const;
  RolloutConfig rollout_config() const;
};

nlohmann::json config_to_json(const TrainConfig& c);
/// Unknown keys are rejected. Missing keys keep their defaults.
TrainConfig config_from_json(const nlohmann::json& j);
/// Applies "dotted.key=value" (value parsed as JSON, falling back to a string).
void apply_override(nlohmann::json& j, const std::string& assignment);
TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// Runs the demonstration fine-tune described by BaselineConfig.
PolicyParams make_baseline_policy(const BaselineConfig& cfg);

/// One row per optimizer step.
struct MetricsRow {
  int step = 0;
  int epoch = 0;
  int batch = 0;
  std::uint64_t policy_version = 0;
  double mean_reward = 0.0;            // mean total reward of fresh rollouts
  double mean_success = 0.0;           // mean trajectory_reward of fresh rollouts
  double mean_group_std = 0.0;         // mean within-group std of fresh rewards
  double mean_group_std_trained = 0.0; // same after replay injection
  double frac_all_fail = 0.0;
  int injections = 0;                  // in this rollout batch
  std::uint64_t injections_total = 0;
  std::uint64_t replay_size = 0;
  double loss = 0.0;
  double rollout_vtime = 0.0;          // cumulative virtual rollout time

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

/// Success rates; NaN for a domain with no tasks.
struct EvalSummary {
  int epoch = 0;
  int step = 0;
  double in_domain_standard = 0.0;
  double in_domain_hard = 0.0;
  double ood_standard = 0.0;
  double ood_hard = 0.0;
  double all_standard = 0.0;
  double all_hard = 0.0;

  bool operator==(const EvalSummary& o) const;
};

enum class Protocol : int { kStandard = 0, kHard = 1 };

struct TaskEval {
  int task_id = 0;
  Domain domain = Domain::kInDomain;
  double standard = 0.0;
  double hard = 0.0;
};

struct EvalResult {
  std::vector<TaskEval> per_task;
  EvalSummary summary;

  double success(Protocol p) const { return p == Protocol::kStandard ? summary.all_standard : summary.all_hard; }
};

/// n_episodes per task at `temperature`. Each episode is scored twice: the
/// standard protocol rewrites the final action of a step-capped episode to FAIL,
/// the hard protocol scores it as-is.
EvalResult evaluate(const Policy& policy, const TaskSet& tasks, int n_episodes, double temperature,
                    std::uint64_t seed, int max_steps_cap = kMaxHorizon);

/// Everything needed to resume training bit-exactly.
struct TrainerState {
  PolicyParams params;
  AdamMoments moments;
  ReplayBuffer replay;
  Rng rng;
  int next_epoch = 0;
  int steps = 0;
  double rollout_vtime = 0.0;
  std::vector<MetricsRow> metrics;
  std::vector<EvalSummary> evals;
  /// Serialized TrainConfig the state was produced under; resume requires a match.
  std::string config_json;

  explicit TrainerState(int replay_capacity = 4) : replay(replay_capacity) {}
};

std::vector<std::uint8_t> serialize_checkpoint(const TrainerState& s);
TrainerState restore_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const TrainerState& s);
TrainerState load_checkpoint(const std::string& path);
/// Only the policy parameters of a checkpoint file.
PolicyParams load_policy(const std::string& path);

struct TrainOptions {
  std::string run_dir;  // empty: nothing is written to disk
  std::optional<TrainerState> resume;
  /// Stop after this many epochs of the current invocation (for resume tests).
  std::optional<int> stop_after_epochs;
  /// Audit hook: called once per replay-buffer operation with a short tag.
  std::function<void(const std::string&)> audit;
};

struct TrainResult {
  TrainerState state;
  std::vector<MetricsRow> metrics;
  std::vector<EvalSummary> evals;
};

/// GRPO / ARPO training loop. Per rollout batch: snapshot the policy, roll out
/// every task G times, (ARPO) insert fresh successes and inject into all-fail
/// groups, compute advantages, then minibatched surrogate updates with gradient
/// accumulation. Checkpoint and metrics per epoch when run_dir is set.
TrainResult train(const TrainConfig& config, const TaskSet& tasks, const PolicyParams& initial,
                  TrainOptions options = {});

/// Offline baseline: roll out the fixed initial policy with the same budget as RL
/// training, keep successful trajectories and maximize their likelihood with the
/// same optimizer for sft_passes passes over that corpus.
TrainResult reject_sampling_sft(const TrainConfig& config, const TaskSet& tasks, const PolicyParams& initial,
                                TrainOptions options = {});

/// Task batches for one epoch: a shuffled pass over the set, cut into batches of
/// rollout_batch_tasks, with the last (or only) batch padded by cycling the order.
std::vector<std::vector<Task>> epoch_batches(const TaskSet& tasks, int batch_tasks, Rng& rng);

// Metrics files. Column order is part of the file format.
extern const std::vector<std::string> kTrainMetricsColumns;
extern const std::vector<std::string> kEvalMetricsColumns;
extern const std::vector<std::string> kThroughputColumns;

std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::string eval_csv(const std::vector<EvalSummary>& rows);
std::string throughput_csv(const std::vector<ThroughputReport>& rows);
nlohmann::json metrics_to_json(const MetricsRow& r);
nlohmann::json eval_to_json(const EvalSummary& r);
nlohmann::json throughput_to_json(const ThroughputReport& r);

/// Converts the line-delimited records in run_dir into one CSV per figure
/// analog: train_metrics.csv, eval_metrics.csv, throughput.csv.
void export_metrics(const std::string& run_dir);

}  // namespace arpo
