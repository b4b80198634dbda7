#include "arpo/trajectory.hpp"

#include <fstream>

namespace arpo {

bool operator==(const EpisodeOutcome& a, const EpisodeOutcome& b) {
  return a.end == b.end && a.goal_complete == b.goal_complete && a.parse_failures == b.parse_failures;
}

bool operator==(const Trajectory& a, const Trajectory& b) {
  return a.task == b.task && a.steps == b.steps && a.final_observation == b.final_observation &&
         a.outcome == b.outcome && a.reward == b.reward && a.origin == b.origin &&
         a.behavior_version == b.behavior_version && a.behavior_temperature == b.behavior_temperature;
}

Eigen::VectorXd Trajectory::old_logprobs() const {
  Eigen::VectorXd out(token_count());
  for (int s = 0; s < num_steps(); ++s) {
    out(2 * s) = steps[static_cast<std::size_t>(s)].tokens.logprob_old[0];
    out(2 * s + 1) = steps[static_cast<std::size_t>(s)].tokens.logprob_old[1];
  }
  return out;
}

Eigen::VectorXd Trajectory::behavior_logprobs() const {
  Eigen::VectorXd out(token_count());
  for (int s = 0; s < num_steps(); ++s) {
    out(2 * s) = steps[static_cast<std::size_t>(s)].tokens.logprob_behavior[0];
    out(2 * s + 1) = steps[static_cast<std::size_t>(s)].tokens.logprob_behavior[1];
  }
  return out;
}

namespace {

nlohmann::json action_to_json(const ParsedAction& a) {
  if (const auto* bad = std::get_if<ParseFailure>(&a))
    return {{"parse_failure", true}, {"verb_token", bad->verb_token}, {"arg_token", bad->arg_token}};
  const auto& act = std::get<Action>(a);
  nlohmann::json j = {{"kind", std::string(to_string(act.kind))}};
  if (act.argument) j["arg"] = *act.argument;
  return j;
}

void write_observation(ByteWriter& w, const Observation& o) {
  w.i32(o.step_index);
  for (int s : o.widget_states) w.i32(s);
  w.i32(o.last_action_echo.value_or(-1));
}

Observation read_observation(ByteReader& r) {
  Observation o;
  o.step_index = r.i32();
  for (auto& s : o.widget_states) s = r.i32();
  const int echo = r.i32();
  if (echo >= 0) o.last_action_echo = echo;
  return o;
}

}  // namespace

nlohmann::json trajectory_to_json(const Trajectory& t) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps) {
    steps.push_back({{"step", s.observation.step_index},
                     {"widgets", s.observation.widget_states},
                     {"verb_token", s.tokens.verb_token},
                     {"arg_token", s.tokens.arg_token},
                     {"logprob_behavior", s.tokens.logprob_behavior},
                     {"logprob_old", s.tokens.logprob_old},
                     {"action", action_to_json(s.action)}});
  }
  return {{"task_id", t.task_id()},
          {"origin", t.origin == Origin::kFresh ? "fresh" : "replayed"},
          {"behavior_version", t.behavior_version},
          {"behavior_temperature", t.behavior_temperature},
          {"end", std::string(to_string(t.outcome.end))},
          {"trajectory_reward", t.reward.trajectory_reward},
          {"format_penalty_total", t.reward.format_penalty_total},
          {"total", t.reward.total},
          {"token_count", t.token_count()},
          {"steps", steps}};
}

void write_trajectory(ByteWriter& w, const Trajectory& t) {
  w.i32(t.task.task_id);
  w.u8(t.task.feasible ? 1 : 0);
  w.i32(t.task.max_steps);
  w.u8(static_cast<std::uint8_t>(t.task.domain));
  w.u64(t.task.goal.size());
  for (const auto& g : t.task.goal) {
    w.i32(static_cast<int>(g.kind));
    w.i32(g.widget);
  }
  w.u64(t.steps.size());
  for (const auto& s : t.steps) {
    write_observation(w, s.observation);
    w.i32(s.tokens.verb_token);
    w.i32(s.tokens.arg_token);
    for (double v : s.tokens.logprob_behavior) w.f64(v);
    for (double v : s.tokens.logprob_old) w.f64(v);
  }
  write_observation(w, t.final_observation);
  w.u8(static_cast<std::uint8_t>(t.outcome.end));
  w.u8(t.outcome.goal_complete ? 1 : 0);
  w.i32(t.outcome.parse_failures);
  w.f64(t.reward.trajectory_reward);
  w.f64(t.reward.format_penalty_total);
  w.f64(t.reward.total);
  w.u8(static_cast<std::uint8_t>(t.origin));
  w.u64(t.behavior_version);
  w.f64(t.behavior_temperature);
}

Trajectory read_trajectory(ByteReader& r) {
  Trajectory t;
  t.task.task_id = r.i32();
  t.task.feasible = r.u8() != 0;
  t.task.max_steps = r.i32();
  const auto domain = r.u8();
  if (domain > 1) r.fail("bad domain tag");
  t.task.domain = static_cast<Domain>(domain);
  const std::size_t n_goal = r.count(8);
  for (std::size_t i = 0; i < n_goal; ++i) {
    const int kind = r.i32();
    const int widget = r.i32();
    if (kind < 0 || kind >= kNumPrimitiveKinds) r.fail("bad goal kind");
    t.task.goal.push_back({static_cast<ActionKind>(kind), widget});
  }
  try {
    validate(t.task);
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  const std::size_t n_steps = r.count(8);
  if (static_cast<int>(n_steps) > t.task.max_steps) r.fail("more steps than max_steps");
  t.steps.reserve(n_steps);
  for (std::size_t i = 0; i < n_steps; ++i) {
    StepRecord s;
    s.observation = read_observation(r);
    s.tokens.verb_token = r.i32();
    s.tokens.arg_token = r.i32();
    for (double& v : s.tokens.logprob_behavior) v = r.f64();
    for (double& v : s.tokens.logprob_old) v = r.f64();
    s.action = parse_action(s.tokens.verb_token, s.tokens.arg_token);
    t.steps.push_back(std::move(s));
  }
  t.final_observation = read_observation(r);
  const auto end = r.u8();
  if (end > static_cast<std::uint8_t>(EndReason::kStepCap)) r.fail("bad end reason");
  t.outcome.end = static_cast<EndReason>(end);
  t.outcome.goal_complete = r.u8() != 0;
  t.outcome.parse_failures = r.i32();
  t.reward.trajectory_reward = r.f64();
  t.reward.format_penalty_total = r.f64();
  t.reward.total = r.f64();
  const auto origin = r.u8();
  if (origin > 1) r.fail("bad origin tag");
  t.origin = static_cast<Origin>(origin);
  t.behavior_version = r.u64();
  t.behavior_temperature = r.f64();
  return t;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
}

}  // namespace arpo
