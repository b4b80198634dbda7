#include "arpo/environment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

namespace arpo {

namespace {

constexpr std::array<std::string_view, kNumVerbs> kKindNames = {
    "CLICK_L", "CLICK_R", "SCROLL", "TYPE_TEXT", "HOTKEY", "WAIT", "FINISH", "FAIL", "CALL_USER"};

constexpr std::array<std::string_view, 5> kEndNames = {"none", "finish", "fail", "call_user",
                                                       "step_cap"};

}  // namespace

std::string_view to_string(ActionKind k) { return kKindNames.at(static_cast<std::size_t>(k)); }

ActionKind action_kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == s) return static_cast<ActionKind>(i);
  throw ConfigError("unknown action kind '" + std::string(s) + "'");
}

std::string_view to_string(EndReason r) { return kEndNames.at(static_cast<std::size_t>(r)); }

EndReason end_reason_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kEndNames.size(); ++i)
    if (kEndNames[i] == s) return static_cast<EndReason>(i);
  throw ConfigError("unknown end reason '" + std::string(s) + "'");
}

void validate(const Task& task) {
  const std::string where = "task " + std::to_string(task.task_id) + ": ";
  if (task.max_steps < 1 || task.max_steps > kMaxHorizon)
    throw ConfigError(where + "max_steps must be in [1, " + std::to_string(kMaxHorizon) + "]");
  if (task.feasible) {
    if (task.goal.empty()) throw ConfigError(where + "feasible task with empty goal");
    if (static_cast<int>(task.goal.size()) > task.max_steps)
      throw ConfigError(where + "goal longer than max_steps");
  } else if (!task.goal.empty()) {
    throw ConfigError(where + "infeasible task must have an empty goal");
  }
  for (const auto& g : task.goal) {
    if (!is_primitive(g.kind)) throw ConfigError(where + "goal contains a meta-action");
    if (g.widget < 0 || g.widget >= kNumWidgets) throw ConfigError(where + "goal widget out of range");
  }
}

ParsedAction parse_action(int verb_token, int arg_token) {
  if (verb_token < 0 || verb_token >= kNumVerbs || arg_token < 0 || arg_token >= kNumArgTokens)
    return ParseFailure{verb_token, arg_token};
  const auto kind = static_cast<ActionKind>(verb_token);
  if (is_primitive(kind)) {
    if (arg_token == kNoArg) return ParseFailure{verb_token, arg_token};
    return Action{kind, arg_token};
  }
  if (arg_token != kNoArg) return ParseFailure{verb_token, arg_token};
  return Action{kind, std::nullopt};
}

std::pair<int, int> action_tokens(const Action& action) {
  return {static_cast<int>(action.kind), action.argument.value_or(kNoArg)};
}

RewardBreakdown score_episode(const Task& task, const EpisodeOutcome& outcome,
                              bool step_cap_counts_as_fail) {
  if (outcome.end == EndReason::kNone) throw UsageError("score_episode: episode is not terminal");
  EndReason end = outcome.end;
  if (step_cap_counts_as_fail && end == EndReason::kStepCap) end = EndReason::kFail;

  RewardBreakdown r;
  if (task.feasible)
    r.trajectory_reward = (outcome.goal_complete && end == EndReason::kFinish) ? 1.0 : 0.0;
  else
    r.trajectory_reward = end == EndReason::kFail ? 1.0 : 0.0;
  r.format_penalty_total = -static_cast<double>(outcome.parse_failures);
  r.total = r.trajectory_reward + r.format_penalty_total;
  return r;
}

Observation Environment::reset(const Task& task, std::uint64_t seed) {
  validate(task);
  task_ = task;
  seed_ = seed;
  obs_ = Observation{};
  progress_ = 0;
  parse_failures_ = 0;
  end_ = EndReason::kNone;
  started_ = true;
  return obs_;
}

StepResult Environment::step(const ParsedAction& parsed) {
  if (!started_) throw UsageError("Environment::step before reset");
  if (terminal()) throw UsageError("Environment::step on a terminal episode");

  if (const auto* bad = std::get_if<ParseFailure>(&parsed)) {
    // Nothing executes on an unparseable response; the step is still consumed.
    ++parse_failures_;
    obs_.last_action_echo = bad->verb_token * kNumArgTokens + bad->arg_token;
  } else {
    const auto& action = std::get<Action>(parsed);
    const auto [verb, arg] = action_tokens(action);
    obs_.last_action_echo = verb * kNumArgTokens + arg;
    if (is_primitive(action.kind)) {
      const int w = *action.argument;
      obs_.widget_states[static_cast<std::size_t>(w)] = static_cast<int>(action.kind) + 1;
      const Interaction done{action.kind, w};
      if (progress_ < static_cast<int>(task_.goal.size()) && task_.goal[static_cast<std::size_t>(progress_)] == done)
        ++progress_;
    } else {
      switch (action.kind) {
        case ActionKind::kFinish: end_ = EndReason::kFinish; break;
        case ActionKind::kFail: end_ = EndReason::kFail; break;
        case ActionKind::kCallUser: end_ = EndReason::kCallUser; break;
        default: break;
      }
    }
  }
  ++obs_.step_index;
  if (end_ == EndReason::kNone && obs_.step_index >= task_.max_steps) end_ = EndReason::kStepCap;
  return {obs_, terminal()};
}

EpisodeOutcome Environment::outcome() const {
  return {end_, progress_ == static_cast<int>(task_.goal.size()), parse_failures_};
}

RewardBreakdown Environment::terminal_reward() const {
  if (!terminal()) throw UsageError("terminal_reward on a non-terminal episode");
  return score_episode(task_, outcome());
}

TaskSet generate_task_suite(std::uint64_t seed, int n_feasible, int n_infeasible, LengthRange lengths,
                            double in_domain_fraction, int max_steps) {
  if (n_feasible < 0 || n_infeasible < 0) throw ConfigError("task counts must be non-negative");
  if (n_feasible + n_infeasible == 0) throw ConfigError("task suite would be empty");
  if (lengths.min < 1 || lengths.max < lengths.min || lengths.max > max_steps)
    throw ConfigError("invalid goal length range");
  if (in_domain_fraction < 0.0 || in_domain_fraction > 1.0)
    throw ConfigError("in_domain_fraction must be in [0, 1]");

  Rng rng(derive_seed(seed, 0x7a5c));
  TaskSet tasks;
  tasks.reserve(static_cast<std::size_t>(n_feasible + n_infeasible));
  for (int i = 0; i < n_feasible; ++i) {
    Task t;
    t.max_steps = max_steps;
    const int len = lengths.min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(lengths.max - lengths.min + 1)));
    while (static_cast<int>(t.goal.size()) < len) {
      Interaction it{static_cast<ActionKind>(uniform_index(rng, kNumPrimitiveKinds)),
                     static_cast<int>(uniform_index(rng, kNumWidgets))};
      if (!t.goal.empty() && t.goal.back() == it) continue;
      t.goal.push_back(it);
    }
    tasks.push_back(std::move(t));
  }
  for (int i = 0; i < n_infeasible; ++i) {
    Task t;
    t.max_steps = max_steps;
    t.feasible = false;
    tasks.push_back(std::move(t));
  }
  shuffle(tasks.begin(), tasks.end(), rng);
  const auto n_in = static_cast<std::size_t>(std::lround(in_domain_fraction * static_cast<double>(tasks.size())));
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    tasks[i].task_id = static_cast<int>(i);
    tasks[i].domain = i < n_in ? Domain::kInDomain : Domain::kOutOfDomain;
  }
  return tasks;
}

nlohmann::json task_to_json(const Task& task) {
  nlohmann::json goal = nlohmann::json::array();
  for (const auto& g : task.goal) goal.push_back({std::string(to_string(g.kind)), g.widget});
  return {{"id", task.task_id},
          {"feasible", task.feasible},
          {"goal", goal},
          {"domain", task.domain == Domain::kInDomain ? "in_domain" : "out_of_domain"},
          {"max_steps", task.max_steps}};
}

Task task_from_json(const nlohmann::json& j) {
  Task t;
  try {
    t.task_id = j.at("id").get<int>();
    t.feasible = j.at("feasible").get<bool>();
    t.max_steps = j.at("max_steps").get<int>();
    const auto domain = j.at("domain").get<std::string>();
    if (domain == "in_domain") t.domain = Domain::kInDomain;
    else if (domain == "out_of_domain") t.domain = Domain::kOutOfDomain;
    else throw ConfigError("unknown domain tag '" + domain + "'");
    for (const auto& g : j.at("goal"))
      t.goal.push_back({action_kind_from_string(g.at(0).get<std::string>()), g.at(1).get<int>()});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed task record: ") + e.what());
  }
  validate(t);
  return t;
}

void write_task_set(const std::string& path, const TaskSet& tasks) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

TaskSet read_task_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open task file '" + path + "'");
  TaskSet tasks;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      tasks.push_back(task_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return tasks;
}

}  // namespace arpo
