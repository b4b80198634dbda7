#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "arpo/common.hpp"

namespace arpo {

// Symbolic desktop: a fixed row of widgets, each holding the code of the last
// primitive operation applied to it (0 = untouched).
inline constexpr int kNumWidgets = 6;
inline constexpr int kNumPrimitiveKinds = 5;
inline constexpr int kNumVerbs = 9;
inline constexpr int kNoArg = kNumWidgets;            // argument token for meta-actions
inline constexpr int kNumArgTokens = kNumWidgets + 1;
inline constexpr int kMaxHorizon = 15;               // upper bound on Task::max_steps
inline constexpr int kDefaultMaxSteps = 15;

enum class ActionKind : int {
  kClickLeft = 0,
  kClickRight,
  kScroll,
  kTypeText,
  kHotkey,
  kWait,
  kFinish,
  kFail,
  kCallUser,
};

inline constexpr bool is_primitive(ActionKind k) { return static_cast<int>(k) < kNumPrimitiveKinds; }
std::string_view to_string(ActionKind k);
ActionKind action_kind_from_string(std::string_view s);

/// One required interaction of a goal: operation kind applied to a widget (or text slot).
struct Interaction {
  ActionKind kind = ActionKind::kClickLeft;
  int widget = 0;

  /// Dense index in [0, kNumPrimitiveKinds * kNumWidgets).
  int item() const { return static_cast<int>(kind) * kNumWidgets + widget; }
  friend bool operator==(const Interaction&, const Interaction&) = default;
};
inline constexpr int kNumGoalItems = kNumPrimitiveKinds * kNumWidgets;

enum class Domain : int { kInDomain = 0, kOutOfDomain = 1 };

struct Task {
  int task_id = 0;
  std::vector<Interaction> goal;
  int max_steps = kDefaultMaxSteps;
  bool feasible = true;
  Domain domain = Domain::kInDomain;

  friend bool operator==(const Task&, const Task&) = default;
};
using TaskSet = std::vector<Task>;

/// Throws ConfigError when the task violates its structural invariants.
void validate(const Task& task);

struct Observation {
  int step_index = 0;
  std::array<int, kNumWidgets> widget_states{};
  /// verb * kNumArgTokens + arg of the previous step's raw tokens.
  std::optional<int> last_action_echo;

  friend bool operator==(const Observation&, const Observation&) = default;
};

struct Action {
  ActionKind kind = ActionKind::kWait;
  std::optional<int> argument;

  friend bool operator==(const Action&, const Action&) = default;
};

/// A (verb, arg) token pair that does not fit the action schema.
struct ParseFailure {
  int verb_token = 0;
  int arg_token = 0;

  friend bool operator==(const ParseFailure&, const ParseFailure&) = default;
};

using ParsedAction = std::variant<Action, ParseFailure>;

inline bool is_parse_failure(const ParsedAction& a) { return std::holds_alternative<ParseFailure>(a); }

/// Schema check for one emitted token pair. Meta-actions must pair with kNoArg,
/// primitives with a widget/slot index.
ParsedAction parse_action(int verb_token, int arg_token);

/// Inverse of parse_action for valid actions.
std::pair<int, int> action_tokens(const Action& action);

enum class EndReason : int { kNone = 0, kFinish, kFail, kCallUser, kStepCap };
std::string_view to_string(EndReason r);
EndReason end_reason_from_string(std::string_view s);

struct RewardBreakdown {
  double trajectory_reward = 0.0;
  double format_penalty_total = 0.0;
  double total = 0.0;

  friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

/// Everything scoring needs from a finished episode.
struct EpisodeOutcome {
  EndReason end = EndReason::kNone;
  bool goal_complete = false;
  int parse_failures = 0;
};

/// Scores a finished episode. With `step_cap_counts_as_fail` the final action of
/// an episode cut off by the step cap is treated as FAIL (the lenient protocol).
RewardBreakdown score_episode(const Task& task, const EpisodeOutcome& outcome,
                              bool step_cap_counts_as_fail = false);

struct StepResult {
  Observation observation;
  bool terminal = false;
};

/// Single-owner episode state machine. The state after reset() is a pure
/// function of (task, seed); transitions are deterministic.
class Environment {
 public:
  Observation reset(const Task& task, std::uint64_t seed);
  StepResult step(const ParsedAction& action);
  RewardBreakdown terminal_reward() const;

  const Task& task() const { return task_; }
  const Observation& observation() const { return obs_; }
  bool terminal() const { return end_ != EndReason::kNone; }
  EndReason end_reason() const { return end_; }
  int progress() const { return progress_; }
  int parse_failures() const { return parse_failures_; }
  EpisodeOutcome outcome() const;

 private:
  Task task_;
  Observation obs_;
  std::uint64_t seed_ = 0;
  int progress_ = 0;
  int parse_failures_ = 0;
  EndReason end_ = EndReason::kNone;
  bool started_ = false;
};

struct LengthRange {
  int min = 2;
  int max = 6;
};

/// Deterministic task suite. Feasible tasks draw their goal length uniformly from
/// `lengths`; the first round(in_domain_fraction * n) tasks (after a seeded
/// shuffle) are tagged in-domain.
TaskSet generate_task_suite(std::uint64_t seed, int n_feasible, int n_infeasible, LengthRange lengths,
                            double in_domain_fraction = 0.25, int max_steps = kDefaultMaxSteps);

// Line-delimited JSON records, one task per line.
nlohmann::json task_to_json(const Task& task);
Task task_from_json(const nlohmann::json& j);
void write_task_set(const std::string& path, const TaskSet& tasks);
TaskSet read_task_set(const std::string& path);

}  // namespace arpo
