#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "arpo/environment.hpp"
#include "arpo/serialize.hpp"

namespace arpo {

/// One emitted action: a verb token followed by an argument token.
struct TokenStep {
  int verb_token = 0;
  int arg_token = kNoArg;
  /// Per-token log-probabilities under the distribution actually sampled from
  /// (logits divided by the rollout temperature).
  std::array<double, 2> logprob_behavior{0.0, 0.0};
  /// Per-token log-probabilities of the same tokens at temperature 1; these are
  /// the pi_old values in the importance ratios.
  std::array<double, 2> logprob_old{0.0, 0.0};

  friend bool operator==(const TokenStep&, const TokenStep&) = default;
};

struct StepRecord {
  Observation observation;  // what the agent saw before emitting `tokens`
  TokenStep tokens;
  ParsedAction action;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

enum class Origin : int { kFresh = 0, kReplayed = 1 };

struct Trajectory {
  Task task;
  std::vector<StepRecord> steps;
  Observation final_observation;
  EpisodeOutcome outcome;
  RewardBreakdown reward;
  Origin origin = Origin::kFresh;
  std::uint64_t behavior_version = 0;
  double behavior_temperature = 1.0;

  int task_id() const { return task.task_id; }
  int num_steps() const { return static_cast<int>(steps.size()); }
  /// |o_i|: verb and argument each count as a token.
  int token_count() const { return 2 * num_steps(); }
  bool success() const { return reward.trajectory_reward == 1.0; }

  /// Stored temperature-1 behavior log-probs, token order (v0, a0, v1, a1, ...).
  Eigen::VectorXd old_logprobs() const;
  /// Same for the tempered sampling distribution.
  Eigen::VectorXd behavior_logprobs() const;

  friend bool operator==(const Trajectory& a, const Trajectory& b);
};

bool operator==(const EpisodeOutcome& a, const EpisodeOutcome& b);

nlohmann::json trajectory_to_json(const Trajectory& t);

void write_trajectory(ByteWriter& w, const Trajectory& t);
Trajectory read_trajectory(ByteReader& r);

}  // namespace arpo
