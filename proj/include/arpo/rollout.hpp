#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "arpo/common.hpp"
#include "arpo/environment.hpp"
#include "arpo/grpo.hpp"
#include "arpo/policy_net.hpp"
#include "arpo/trajectory.hpp"

namespace arpo {

/// Affine inference cost (c0 + c1 * batch) plus a fixed OS delay per executed
/// environment step, all in virtual milliseconds.
struct LatencyModel {
  double os_delay_per_step = 1500.0;
  double infer_base_cost = 900.0;
  double infer_per_item_cost = 55.0;
};

struct RolloutConfig {
  int n_envs = 256;
  int group_size = 8;
  int max_steps = kDefaultMaxSteps;
  double rollout_temperature = 1.0;
  LatencyModel latency;

  void validate() const;
};

/// One pending next-action query from a worker.
struct InferenceRequest {
  const Task* task = nullptr;
  std::span<const StepRecord> past;
  const Observation* current = nullptr;
  double temperature = 1.0;
  Rng* rng = nullptr;

  HistoryView history() const { return {*task, past, *current}; }
};

/// Anything that can pick the next (verb, arg) tokens. Implementations are
/// immutable during a rollout and safe to query from several threads.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual TokenStep act(const HistoryView& history, double temperature, Rng& rng) const = 0;
  /// Default evaluates each request in order with act(); results are identical
  /// to per-request calls by contract.
  virtual void act_batch(std::span<const InferenceRequest> requests, std::span<TokenStep> out) const;
  virtual std::uint64_t version() const { return 0; }
};

class NeuralPolicy final : public Policy {
 public:
  explicit NeuralPolicy(std::shared_ptr<const PolicyParams> params) : params_(std::move(params)) {}
  explicit NeuralPolicy(const PolicyParams& params) : params_(std::make_shared<const PolicyParams>(params)) {}

  TokenStep act(const HistoryView& history, double temperature, Rng& rng) const override;
  std::uint64_t version() const override { return params_->version; }
  const PolicyParams& params() const { return *params_; }

 private:
  std::shared_ptr<const PolicyParams> params_;
};

/// Number of goal interactions completed, in order, by the primitive actions in `past`.
int goal_progress(const Task& task, std::span<const StepRecord> past);

/// Performs the next goal interaction, then FINISH; FAIL on infeasible tasks.
class ScriptedOptimalPolicy final : public Policy {
 public:
  TokenStep act(const HistoryView& history, double temperature, Rng& rng) const override;
};

/// Optimal with probability 1 - noise, otherwise a uniformly random primitive action.
class NoisyExpertPolicy final : public Policy {
 public:
  explicit NoisyExpertPolicy(double noise) : noise_(noise) {}
  TokenStep act(const HistoryView& history, double temperature, Rng& rng) const override;

 private:
  double noise_;
};

/// Always WAITs, so every episode runs into the step cap.
class NeverFinishPolicy final : public Policy {
 public:
  TokenStep act(const HistoryView& history, double temperature, Rng& rng) const override;
};

/// Uniform over the whole (verb, arg) token grid, malformed pairs included.
class UniformRandomPolicy final : public Policy {
 public:
  TokenStep act(const HistoryView& history, double temperature, Rng& rng) const override;
};

/// Drives one Environment instance and records its trajectory.
class EpisodeRunner {
 public:
  EpisodeRunner(const Task& task, std::uint64_t seed, int max_steps_cap, double temperature,
                std::uint64_t behavior_version);

  bool done() const { return env_.terminal(); }
  InferenceRequest request();
  /// Parses and executes the tokens. Returns true when the episode ended.
  bool apply(const TokenStep& tokens);
  Trajectory finish() &&;

 private:
  Task task_;
  Environment env_;
  Rng rng_;
  Trajectory traj_;
};

/// Plays a whole episode with per-request act() calls.
Trajectory run_episode(const Task& task, const Policy& policy, double temperature, std::uint64_t seed,
                       int max_steps_cap = kMaxHorizon);

/// Seed of episode `slot` of group `group_index` in a rollout drawn from `base_seed`.
inline std::uint64_t episode_seed(std::uint64_t base_seed, std::size_t group_index, std::size_t slot) {
  return derive_seed(base_seed, 0xe915, group_index, slot);
}

/// G independent episodes of one task.
RolloutGroup run_group(const Task& task, const Policy& policy, const RolloutConfig& config,
                       std::uint64_t base_seed, std::size_t group_index = 0);

/// Centralized batched policy evaluation. Batching never changes results; it
/// only changes the virtual cost c0 + c1 * batch_size.
class InferenceService {
 public:
  InferenceService(const Policy& policy, const LatencyModel& latency) : policy_(policy), latency_(latency) {}

  std::vector<TokenStep> batched_infer(std::span<const InferenceRequest> requests);
  double batch_cost(std::size_t batch_size) const {
    return latency_.infer_base_cost + latency_.infer_per_item_cost * static_cast<double>(batch_size);
  }

  std::uint64_t calls() const { return calls_; }
  std::uint64_t items() const { return items_; }
  std::size_t max_batch() const { return max_batch_; }

 private:
  const Policy& policy_;
  LatencyModel latency_;
  std::uint64_t calls_ = 0;
  std::uint64_t items_ = 0;
  std::size_t max_batch_ = 0;
};

struct ThroughputReport {
  int n_envs = 0;
  /// Virtual duration of each rollout batch (a wave of up to n_envs episodes).
  std::vector<double> batch_times;
  double per_batch_vtime = 0.0;  // mean over batches
  double per_epoch_vtime = 0.0;  // sum over batches
  std::uint64_t inference_calls = 0;
  double mean_occupancy = 0.0;
  int max_occupancy = 0;
  /// Total busy time of the service and total env-step time, for cost audits.
  double inference_vtime = 0.0;
  double env_step_vtime = 0.0;
  std::uint64_t env_steps = 0;
};

struct EpochRollout {
  std::vector<RolloutGroup> groups;  // one per task, in task order
  ThroughputReport report;
};

/// Executes every task x G episode on n_envs logical workers over a virtual
/// clock. Episodes are dealt out in waves of n_envs; within a wave workers run
/// concurrently (environment delays overlap) and the service greedily batches
/// every pending request whenever it is free.
EpochRollout run_epoch(std::span<const Task> tasks, const Policy& policy, const RolloutConfig& config,
                       std::uint64_t base_seed);

/// Same episodes on real OS threads, no time accounting. Produces groups
/// identical to run_epoch.
std::vector<RolloutGroup> run_epoch_threaded(std::span<const Task> tasks, const Policy& policy,
                                             const RolloutConfig& config, std::uint64_t base_seed, int n_threads);

}  // namespace arpo
