#include <doctest.h>

#include <algorithm>
#include <vector>

#include "arpo/rollout.hpp"
#include "test_util.hpp"

using namespace arpo;
using arpo::testing::make_task;
using arpo::testing::small_policy;

namespace {

bool same_groups(const std::vector<RolloutGroup>& a, const std::vector<RolloutGroup>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].task_id != b[i].task_id || a[i].trajectories.size() != b[i].trajectories.size()) return false;
    for (std::size_t k = 0; k < a[i].trajectories.size(); ++k)
      if (!(a[i].trajectories[k] == b[i].trajectories[k])) return false;
    if (a[i].rewards != b[i].rewards) return false;
  }
  return true;
}

// Exact success probability of the uniform token policy, by dynamic programming
// over (goal progress, step) with transitions read off the 63-token grid.
double uniform_policy_success_probability(const Task& task) {
  const int len = static_cast<int>(task.goal.size());
  std::vector<double> alive(static_cast<std::size_t>(len + 1), 0.0);
  alive[0] = 1.0;
  double success = 0.0;
  const double each = 1.0 / (kNumVerbs * kNumArgTokens);
  for (int step = 0; step < task.max_steps; ++step) {
    std::vector<double> next(alive.size(), 0.0);
    for (int p = 0; p <= len; ++p) {
      const double mass = alive[static_cast<std::size_t>(p)];
      if (mass == 0.0) continue;
      for (int v = 0; v < kNumVerbs; ++v)
        for (int a = 0; a < kNumArgTokens; ++a) {
          const bool valid = v < 5 ? a < kNumWidgets : a == kNoArg;
          if (valid && v == 6) {  // FINISH
            if (p == len) success += mass * each;
          } else if (valid && (v == 7 || v == 8)) {
            // FAIL / CALL_USER end a feasible episode unrewarded
          } else if (valid && v < 5 && p < len && task.goal[static_cast<std::size_t>(p)] == Interaction{static_cast<ActionKind>(v), a}) {
            next[static_cast<std::size_t>(p + 1)] += mass * each;
          } else {
            next[static_cast<std::size_t>(p)] += mass * each;
          }
        }
    }
    alive = std::move(next);
  }
  return success;
}

RolloutConfig config_with(int n_envs, int group_size = 4) {
  RolloutConfig c;
  c.n_envs = n_envs;
  c.group_size = group_size;
  return c;
}

}  // namespace

TEST_CASE("run_group") {
  const Task task = make_task(2, {{ActionKind::kHotkey, 1}, {ActionKind::kClickLeft, 4}, {ActionKind::kScroll, 5}});

  SUBCASE("scripted optimal policy always succeeds") {
    const auto g = run_group(task, ScriptedOptimalPolicy{}, RolloutConfig{}, 3);
    CHECK(g.size() == 8);
    for (const auto& t : g.trajectories) {
      CHECK(t.success());
      CHECK(t.reward.format_penalty_total == 0.0);
      CHECK(t.num_steps() == 4);
    }
  }
  SUBCASE("fixed seeds are bit-identical; trajectories carry the snapshot version") {
    PolicyParams p = small_policy(1);
    p.version = 17;
    const NeuralPolicy policy(p);
    const auto a = run_group(task, policy, RolloutConfig{}, 5);
    const auto b = run_group(task, policy, RolloutConfig{}, 5);
    CHECK(same_groups({a}, {b}));
    for (const auto& t : a.trajectories) {
      CHECK(t.behavior_version == 17);
      CHECK(t.origin == Origin::kFresh);
      CHECK(t.outcome.end != EndReason::kNone);
    }
    CHECK_FALSE(same_groups({a}, {run_group(task, policy, RolloutConfig{}, 6)}));
  }
  SUBCASE("group size below 2 is rejected") {
    RolloutConfig c;
    c.group_size = 1;
    CHECK_THROWS_AS(run_group(task, ScriptedOptimalPolicy{}, c, 0), ConfigError);
  }
}

TEST_CASE("uniform policy success rate matches the exact probability") {
  const Task task = make_task(0, {{ActionKind::kTypeText, 3}}, kDefaultMaxSteps);
  const double p = uniform_policy_success_probability(task);
  const int n = 20000;
  int wins = 0;
  for (int i = 0; i < n; ++i) wins += run_episode(task, UniformRandomPolicy{}, 1.0, static_cast<std::uint64_t>(i)).success();
  const double sd = std::sqrt(n * p * (1 - p));
  CHECK(p > 0.01);
  CHECK(std::abs(wins - n * p) <= 3.0 * sd);
}

TEST_CASE("batched inference equals per-request evaluation") {
  const NeuralPolicy policy(small_policy(2));
  const Task task = make_task(1, {{ActionKind::kClickRight, 0}, {ActionKind::kClickLeft, 3}});
  for (std::size_t n : {std::size_t{1}, std::size_t{64}}) {
    std::vector<EpisodeRunner> batched, single;
    for (std::size_t i = 0; i < n; ++i) {
      batched.emplace_back(task, 100 + i, kMaxHorizon, 1.0, 0);
      single.emplace_back(task, 100 + i, kMaxHorizon, 1.0, 0);
    }
    // Advance a few steps so histories are non-trivial.
    for (int step = 0; step < 3; ++step) {
      std::vector<InferenceRequest> reqs;
      std::vector<std::size_t> live;
      for (std::size_t i = 0; i < n; ++i)
        if (!batched[i].done()) {
          reqs.push_back(batched[i].request());
          live.push_back(i);
        }
      if (reqs.empty()) break;
      InferenceService service(policy, LatencyModel{});
      const auto out = service.batched_infer(reqs);
      CHECK(service.calls() == 1);
      CHECK(service.items() == reqs.size());
      for (std::size_t k = 0; k < live.size(); ++k) {
        auto req = single[live[k]].request();
        const auto direct = policy.act(req.history(), req.temperature, *req.rng);
        CHECK(direct == out[k]);
        batched[live[k]].apply(out[k]);
        single[live[k]].apply(direct);
      }
    }
  }
  InferenceService service(policy, LatencyModel{});
  CHECK(service.batch_cost(64) == 900.0 + 64 * 55.0);
  CHECK(service.batch_cost(64) < 64 * service.batch_cost(1));
}

TEST_CASE("run_epoch is transparent to batching and parallelism") {
  const auto tasks = generate_task_suite(4, 6, 1, {2, 4});
  const NeuralPolicy policy(small_policy(3));
  std::vector<RolloutGroup> serial;
  for (std::size_t i = 0; i < tasks.size(); ++i) serial.push_back(run_group(tasks[i], policy, config_with(1), 77, i));

  for (int n_envs : {1, 3, 8, 13, 256}) {
    const auto epoch = run_epoch(tasks, policy, config_with(n_envs), 77);
    CHECK(same_groups(epoch.groups, serial));
    CHECK(epoch.report.max_occupancy <= n_envs);
    CHECK(epoch.report.mean_occupancy <= epoch.report.max_occupancy);
    CHECK(epoch.report.per_epoch_vtime >= epoch.report.per_batch_vtime);
  }
  for (int threads : {1, 4}) CHECK(same_groups(run_epoch_threaded(tasks, policy, config_with(8), 77, threads), serial));
}

TEST_CASE("virtual clock accounting") {
  const auto tasks = generate_task_suite(5, 16, 2, {3, 6});
  const NeuralPolicy policy(small_policy(4));
  const LatencyModel lat;

  SUBCASE("one worker: epoch time is the serial sum") {
    const auto r = run_epoch(tasks, policy, config_with(1), 1).report;
    CHECK(r.inference_calls == r.env_steps);
    const double serial = static_cast<double>(r.env_steps) * (lat.os_delay_per_step + lat.infer_base_cost + lat.infer_per_item_cost);
    CHECK(r.per_epoch_vtime == doctest::Approx(serial).epsilon(1e-12));
    CHECK(r.max_occupancy == 1);
  }
  SUBCASE("more workers: longer batches, shorter epoch") {
    const auto small = run_epoch(tasks, policy, config_with(8, 8), 1).report;
    const auto large = run_epoch(tasks, policy, config_with(256, 8), 1).report;
    CHECK(large.per_batch_vtime > small.per_batch_vtime);
    CHECK(large.per_epoch_vtime < small.per_epoch_vtime);
  }
  SUBCASE("per-epoch time is non-increasing along the doubling chain") {
    double prev = INFINITY;
    for (int n = 1; n <= 256; n *= 2) {
      const auto r = run_epoch(tasks, policy, config_with(n, 8), 2).report;
      CHECK(r.per_epoch_vtime <= prev);
      prev = r.per_epoch_vtime;
    }
  }
  SUBCASE("doubling the OS delay costs less than 2x when inference dominates") {
    RolloutConfig c = config_with(256, 8);
    c.latency = {200.0, 900.0, 55.0};
    const double base = run_epoch(tasks, policy, c, 3).report.per_epoch_vtime;
    c.latency.os_delay_per_step = 400.0;
    const double doubled = run_epoch(tasks, policy, c, 3).report.per_epoch_vtime;
    CHECK(doubled > base);
    CHECK(doubled < 2.0 * base);
  }
  SUBCASE("reports are deterministic") {
    const auto a = run_epoch(tasks, policy, config_with(32, 8), 9).report;
    const auto b = run_epoch(tasks, policy, config_with(32, 8), 9).report;
    CHECK(a.batch_times == b.batch_times);
    CHECK(a.per_epoch_vtime == b.per_epoch_vtime);
  }
}

TEST_CASE("scripted policies") {
  const Task inf = arpo::testing::infeasible_task(1);
  CHECK(run_episode(inf, ScriptedOptimalPolicy{}, 1.0, 0).success());
  const auto never = run_episode(inf, NeverFinishPolicy{}, 1.0, 0);
  CHECK(never.num_steps() == kDefaultMaxSteps);
  CHECK(never.outcome.end == EndReason::kStepCap);
  CHECK_FALSE(never.success());

  const Task task = make_task(2, {{ActionKind::kClickLeft, 0}, {ActionKind::kScroll, 2}});
  int wins = 0;
  for (std::uint64_t s = 0; s < 200; ++s) wins += run_episode(task, NoisyExpertPolicy(0.15), 1.0, s).success();
  CHECK(wins > 150);
}

TEST_CASE("run_epoch rejects an empty task list") {
  CHECK_THROWS_AS(run_epoch(std::span<const Task>{}, ScriptedOptimalPolicy{}, RolloutConfig{}, 0), UsageError);
  CHECK_THROWS_AS(run_epoch(generate_task_suite(1, 2, 0, {2, 3}), ScriptedOptimalPolicy{}, config_with(0), 0), ConfigError);
}
