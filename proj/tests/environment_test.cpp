#include <doctest.h>

#include <fstream>
#include <functional>
#include <set>

#include "arpo/environment.hpp"
#include "test_util.hpp"

using namespace arpo;
using arpo::testing::make_task;
using arpo::testing::infeasible_task;

namespace {

constexpr int kClickL = 0, kClickR = 1, kTypeText = 3, kWait = 5, kFinish = 6, kFail = 7, kCallUser = 8;

ParsedAction tok(int verb, int arg) { return parse_action(verb, arg); }

Task three_step_task() {
  return make_task(1, {{ActionKind::kClickLeft, 1}, {ActionKind::kTypeText, 2}, {ActionKind::kScroll, 0}});
}

// Schema restated independently of parse_action: primitives (verbs 0..4) take a
// widget 0..5, meta-actions (verbs 5..8) take NO_ARG.
bool oracle_valid(int verb, int arg) { return verb < 5 ? arg < kNumWidgets : arg == kNoArg; }

// Goal is a subsequence of the executed primitive interactions (LCS-style DP).
bool oracle_subsequence(const std::vector<Interaction>& goal, const std::vector<Interaction>& done) {
  std::vector<std::vector<bool>> ok(goal.size() + 1, std::vector<bool>(done.size() + 1, false));
  for (std::size_t j = 0; j <= done.size(); ++j) ok[0][j] = true;
  for (std::size_t i = 1; i <= goal.size(); ++i)
    for (std::size_t j = 1; j <= done.size(); ++j)
      ok[i][j] = ok[i][j - 1] || (ok[i - 1][j - 1] && goal[i - 1] == done[j - 1]);
  return ok[goal.size()][done.size()];
}

struct OracleScore {
  double reward = 0.0;
  double penalty = 0.0;
};

OracleScore oracle_score(const Task& task, const std::vector<std::pair<int, int>>& tokens) {
  std::vector<Interaction> done;
  OracleScore s;
  int last_meta = -1;
  for (auto [v, a] : tokens) {
    if (!oracle_valid(v, a)) {
      s.penalty -= 1.0;
      continue;
    }
    if (v < 5) done.push_back({static_cast<ActionKind>(v), a});
    else last_meta = v;
  }
  // The enumeration stops at the first terminating meta-action, so it is last.
  if (task.feasible) s.reward = (last_meta == kFinish && oracle_subsequence(task.goal, done)) ? 1.0 : 0.0;
  else s.reward = last_meta == kFail ? 1.0 : 0.0;
  return s;
}

struct EnumerationStats {
  long episodes = 0;
  long rewarded = 0;
};

// Depth-first over every token sequence drawn from `vocab`, copying the
// environment at each branch.
EnumerationStats enumerate_all(const Task& task, const std::vector<std::pair<int, int>>& vocab) {
  EnumerationStats stats;
  std::vector<std::pair<int, int>> prefix;
  std::function<void(const Environment&)> rec = [&](const Environment& env) {
    for (const auto& [v, a] : vocab) {
      Environment next = env;
      prefix.emplace_back(v, a);
      const auto res = next.step(parse_action(v, a));
      if (res.terminal) {
        ++stats.episodes;
        const auto got = next.terminal_reward();
        const auto want = oracle_score(task, prefix);
        REQUIRE(got.trajectory_reward == want.reward);
        REQUIRE(got.format_penalty_total == want.penalty);
        REQUIRE(got.total == got.trajectory_reward + got.format_penalty_total);
        if (got.trajectory_reward == 1.0) {
          ++stats.rewarded;
          if (!task.feasible) REQUIRE(prefix.back().first == kFail);
        }
      } else {
        rec(next);
      }
      prefix.pop_back();
    }
  };
  Environment env;
  env.reset(task, 0);
  rec(env);
  return stats;
}

std::vector<std::pair<int, int>> full_vocab() {
  std::vector<std::pair<int, int>> v;
  for (int verb = 0; verb < kNumVerbs; ++verb)
    for (int arg = 0; arg < kNumArgTokens; ++arg) v.emplace_back(verb, arg);
  return v;
}

}  // namespace

TEST_CASE("parse_action follows the verb/argument schema") {
  CHECK(std::get<Action>(tok(kClickL, 3)) == Action{ActionKind::kClickLeft, 3});
  CHECK(is_parse_failure(tok(kFinish, 3)));
  CHECK(is_parse_failure(tok(kTypeText, kNoArg)));
  CHECK(std::get<Action>(tok(kWait, kNoArg)) == Action{ActionKind::kWait, std::nullopt});
  CHECK(is_parse_failure(tok(-1, 0)));
  CHECK(is_parse_failure(tok(kNumVerbs, kNoArg)));
  CHECK(is_parse_failure(tok(kClickL, kNumArgTokens)));

  for (int v = 0; v < kNumVerbs; ++v)
    for (int a = 0; a < kNumArgTokens; ++a) {
      const auto parsed = parse_action(v, a);
      CHECK(is_parse_failure(parsed) == !oracle_valid(v, a));
      if (!is_parse_failure(parsed)) CHECK(action_tokens(std::get<Action>(parsed)) == std::pair{v, a});
    }
}

TEST_CASE("reset gives the zero state and is deterministic") {
  Environment env;
  const auto a = env.reset(three_step_task(), 0);
  CHECK(a.step_index == 0);
  CHECK(a.widget_states == std::array<int, kNumWidgets>{});
  CHECK_FALSE(a.last_action_echo.has_value());
  CHECK(env.reset(three_step_task(), 0) == a);
  CHECK(env.reset(infeasible_task(2), 0) == a);
}

TEST_CASE("reset rejects malformed tasks") {
  Environment env;
  Task t = three_step_task();
  t.max_steps = 2;  // goal longer than the step budget
  CHECK_THROWS_AS(env.reset(t, 0), ConfigError);
  Task inf = infeasible_task(3);
  inf.goal.push_back({ActionKind::kClickLeft, 0});
  inf.feasible = false;
  CHECK_THROWS_AS(env.reset(inf, 0), ConfigError);
  Task meta = make_task(4, {{ActionKind::kWait, 0}});
  CHECK_THROWS_AS(env.reset(meta, 0), ConfigError);
  Task wide = make_task(5, {{ActionKind::kClickLeft, kNumWidgets}});
  CHECK_THROWS_AS(env.reset(wide, 0), ConfigError);
}

TEST_CASE("step transitions and terminal conditions") {
  Environment env;
  env.reset(three_step_task(), 0);

  auto r = env.step(tok(kClickL, 1));
  CHECK_FALSE(r.terminal);
  CHECK(r.observation.step_index == 1);
  CHECK(r.observation.widget_states[1] == 1);
  CHECK(env.progress() == 1);

  // A malformed step changes nothing but the clock and the echo.
  const auto before = r.observation.widget_states;
  r = env.step(tok(kFinish, 2));
  CHECK_FALSE(r.terminal);
  CHECK(r.observation.widget_states == before);
  CHECK(r.observation.step_index == 2);
  CHECK(env.parse_failures() == 1);

  env.step(tok(kTypeText, 2));
  env.step(tok(2, 0));  // SCROLL widget 0
  CHECK(env.progress() == 3);
  r = env.step(tok(kFinish, kNoArg));
  CHECK(r.terminal);
  CHECK(env.end_reason() == EndReason::kFinish);
  CHECK_THROWS_AS(env.step(tok(kWait, kNoArg)), UsageError);
}

TEST_CASE("the 15th step ends the episode at the step cap") {
  Environment env;
  env.reset(three_step_task(), 0);
  for (int i = 0; i < 14; ++i) CHECK_FALSE(env.step(tok(kWait, kNoArg)).terminal);
  CHECK_THROWS_AS(env.terminal_reward(), UsageError);
  const auto r = env.step(tok(kWait, kNoArg));
  CHECK(r.terminal);
  CHECK(r.observation.step_index == 15);
  CHECK(env.end_reason() == EndReason::kStepCap);
  CHECK(env.terminal_reward().trajectory_reward == 0.0);
}

TEST_CASE("terminal rewards") {
  SUBCASE("goal met then FINISH") {
    Environment env;
    env.reset(three_step_task(), 0);
    env.step(tok(kClickL, 1));
    env.step(tok(kTypeText, 2));
    env.step(tok(2, 0));
    env.step(tok(kFinish, kNoArg));
    CHECK(env.terminal_reward() == RewardBreakdown{1, 0, 1});
  }
  SUBCASE("infeasible task, FAIL at step 2") {
    Environment env;
    env.reset(infeasible_task(9), 0);
    env.step(tok(kClickR, 4));
    env.step(tok(kFail, kNoArg));
    CHECK(env.terminal_reward() == RewardBreakdown{1, 0, 1});
  }
  SUBCASE("goal met with two malformed steps") {
    Environment env;
    env.reset(three_step_task(), 0);
    env.step(tok(kClickL, 1));
    env.step(tok(kFail, 0));
    env.step(tok(kTypeText, 2));
    env.step(tok(kClickR, kNoArg));
    env.step(tok(2, 0));
    env.step(tok(kFinish, kNoArg));
    CHECK(env.terminal_reward() == RewardBreakdown{1, -2, -1});
  }
  SUBCASE("FINISH before the goal is complete") {
    Environment env;
    env.reset(three_step_task(), 0);
    env.step(tok(kClickL, 1));
    env.step(tok(kFinish, kNoArg));
    CHECK(env.terminal_reward() == RewardBreakdown{0, 0, 0});
  }
  SUBCASE("CALL_USER ends with reward 0") {
    Environment env;
    env.reset(infeasible_task(9), 0);
    CHECK(env.step(tok(kCallUser, kNoArg)).terminal);
    CHECK(env.terminal_reward().trajectory_reward == 0.0);
  }
}

TEST_CASE("step-cap rewrite only under the lenient scoring") {
  const Task inf = infeasible_task(1);
  const EpisodeOutcome capped{EndReason::kStepCap, true, 0};
  CHECK(score_episode(inf, capped, false).trajectory_reward == 0.0);
  CHECK(score_episode(inf, capped, true).trajectory_reward == 1.0);
  // A rewrite to FAIL never helps a feasible task.
  CHECK(score_episode(three_step_task(), {EndReason::kStepCap, true, 0}, true).trajectory_reward == 0.0);
  CHECK_THROWS_AS(score_episode(inf, EpisodeOutcome{}), UsageError);
}

TEST_CASE("reward soundness by exhaustive enumeration") {
  SUBCASE("feasible, 2-item goal, 3 steps, full vocabulary") {
    const Task t = make_task(0, {{ActionKind::kClickLeft, 0}, {ActionKind::kClickRight, 1}}, 3);
    const auto stats = enumerate_all(t, full_vocab());
    CHECK(stats.rewarded == 1);  // only CLICK_L 0, CLICK_R 1, FINISH
  }
  SUBCASE("feasible, 2-item goal, 4 steps, small vocabulary") {
    const Task t = make_task(0, {{ActionKind::kClickLeft, 0}, {ActionKind::kClickRight, 1}}, 4);
    const std::vector<std::pair<int, int>> vocab = {
        {kClickL, 0}, {kClickL, 1}, {kClickR, 0}, {kClickR, 1}, {kClickL, kNoArg},
        {kWait, kNoArg}, {kFinish, kNoArg}, {kFail, kNoArg}, {kFinish, 0}, {kCallUser, kNoArg}};
    const auto stats = enumerate_all(t, vocab);
    CHECK(stats.rewarded > 1);
  }
  SUBCASE("infeasible, 4 steps, small vocabulary") {
    const Task t = infeasible_task(0, 4);
    const std::vector<std::pair<int, int>> vocab = {{kClickL, 0}, {kClickR, 1}, {kClickL, kNoArg}, {kWait, kNoArg},
                                                    {kFinish, kNoArg}, {kFail, kNoArg}, {kFail, 2},
                                                    {kCallUser, kNoArg}};
    const auto stats = enumerate_all(t, vocab);
    CHECK(stats.rewarded > 0);
  }
  SUBCASE("infeasible, 3 steps, full vocabulary") {
    const auto stats = enumerate_all(infeasible_task(0, 3), full_vocab());
    CHECK(stats.rewarded > 0);
  }
}

TEST_CASE("episode transcripts are deterministic") {
  const Task t = three_step_task();
  Rng rng(5);
  std::vector<std::pair<int, int>> seq;
  for (int i = 0; i < 15; ++i)
    seq.emplace_back(static_cast<int>(uniform_index(rng, kNumVerbs)), static_cast<int>(uniform_index(rng, kNumArgTokens)));
  auto play = [&] {
    Environment env;
    std::vector<Observation> obs{env.reset(t, 3)};
    for (auto [v, a] : seq) {
      if (env.terminal()) break;
      obs.push_back(env.step(parse_action(v, a)).observation);
    }
    return obs;
  };
  CHECK(play() == play());
}

TEST_CASE("generate_task_suite") {
  const auto a = generate_task_suite(7, 32, 4, {2, 6});
  CHECK(a.size() == 36);
  CHECK(a == generate_task_suite(7, 32, 4, {2, 6}));
  const auto b = generate_task_suite(8, 32, 4, {2, 6});
  CHECK(b.size() == 36);
  std::string sa, sb;
  for (const auto& t : a) sa += task_to_json(t).dump();
  for (const auto& t : b) sb += task_to_json(t).dump();
  CHECK(sa != sb);

  int feasible = 0, in_domain = 0;
  std::set<int> ids;
  for (const auto& t : a) {
    CHECK_NOTHROW(validate(t));
    ids.insert(t.task_id);
    if (t.feasible) {
      ++feasible;
      CHECK(t.goal.size() >= 2);
      CHECK(t.goal.size() <= 6);
    }
    if (t.domain == Domain::kInDomain) ++in_domain;
  }
  CHECK(feasible == 32);
  CHECK(ids.size() == 36);
  CHECK(in_domain == 9);  // round(0.25 * 36)

  CHECK_THROWS_AS(generate_task_suite(1, 0, 0, {2, 6}), ConfigError);
  CHECK_THROWS_AS(generate_task_suite(1, -1, 3, {2, 6}), ConfigError);
  CHECK_THROWS_AS(generate_task_suite(1, 3, 0, {4, 2}), ConfigError);
  CHECK_THROWS_AS(generate_task_suite(1, 3, 0, {2, 16}), ConfigError);
}

TEST_CASE("task files round trip and report bad lines") {
  const auto dir = arpo::testing::temp_dir("tasks");
  const auto path = (dir / "tasks.jsonl").string();
  const auto suite = generate_task_suite(3, 10, 2, {2, 5});
  write_task_set(path, suite);
  CHECK(read_task_set(path) == suite);

  {
    std::ofstream out(path, std::ios::app);
    out << "{\"id\": 99, \"feasible\": true, \"goal\": [[\"WAIT\", 0]], \"domain\": \"in_domain\", \"max_steps\": 15}\n";
  }
  try {
    read_task_set(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(":13:") != std::string::npos);
  }
  {
    std::ofstream out(path);
    out << "not json\n";
  }
  CHECK_THROWS_AS(read_task_set(path), ConfigError);
  CHECK_THROWS_AS(read_task_set((dir / "missing.jsonl").string()), IoError);
}
