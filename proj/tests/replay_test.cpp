#include <doctest.h>

#include "arpo/replay.hpp"
#include "replay_sim.hpp"

using namespace arpo;
using arpo::testing::fake_group;
using arpo::testing::fake_trajectory;

namespace {

std::vector<Trajectory> failures(int task, int n, std::uint64_t tag0 = 100) {
  std::vector<Trajectory> out;
  for (int i = 0; i < n; ++i) out.push_back(fake_trajectory(task, false, tag0 + static_cast<std::uint64_t>(i), i % 2));
  return out;
}

}  // namespace

TEST_CASE("insert keeps successes only, oldest evicted first") {
  ReplayBuffer b(4);
  CHECK(b.insert(fake_trajectory(1, true, 1)));
  CHECK(b.size(1) == 1);
  CHECK_FALSE(b.insert(fake_trajectory(1, false, 2)));
  CHECK(b.size(1) == 1);

  for (std::uint64_t tag = 3; tag <= 6; ++tag) b.insert(fake_trajectory(1, true, tag));
  REQUIRE(b.size(1) == 4);
  const auto& q = *b.entries(1);
  CHECK(q.front().trajectory.behavior_version == 3);
  CHECK(q.back().trajectory.behavior_version == 6);
  CHECK(b.insertion_count() == 5);
  CHECK(b.eviction_count() == 1);
  CHECK(b.size(2) == 0);
  CHECK(b.entries(2) == nullptr);

  // Replayed copies never go back in.
  auto replayed = fake_trajectory(1, true, 7);
  replayed.origin = Origin::kReplayed;
  CHECK_FALSE(b.insert(replayed));

  Trajectory unfinished = fake_trajectory(1, true, 8);
  unfinished.outcome.end = EndReason::kNone;
  CHECK_THROWS_AS(b.insert(unfinished), UsageError);
  CHECK_THROWS_AS(ReplayBuffer(-1), ConfigError);
}

TEST_CASE("capacity 0 stores nothing") {
  ReplayBuffer b(0);
  CHECK_FALSE(b.insert(fake_trajectory(1, true, 1)));
  auto g = fake_group(1, failures(1, 8));
  Rng rng(1);
  CHECK_FALSE(b.maybe_inject(g, rng));
}

TEST_CASE("maybe_inject") {
  ReplayBuffer b(4);
  auto stored = fake_trajectory(3, true, 42);
  stored.steps.resize(2);
  stored.steps[0].tokens.logprob_old = {-0.25, -0.5};
  b.insert(stored);
  Rng rng(9);

  SUBCASE("all-fail group gets exactly one success, penalties ignored in the trigger") {
    auto g = fake_group(3, failures(3, 8));
    CHECK(g.rewards.minCoeff() < 0.0);  // some members carry format penalties
    CHECK(b.maybe_inject(g, rng));
    CHECK(g.phase == GroupPhase::kReplayChecked);
    CHECK(g.success_count() == 1);
    int replayed = 0;
    for (const auto& t : g.trajectories)
      if (t.origin == Origin::kReplayed) {
        ++replayed;
        CHECK(t.behavior_version == 42);
        CHECK(t.steps[0].tokens.logprob_old == std::array{-0.25, -0.5});
      }
    CHECK(replayed == 1);
    CHECK(g.rewards.maxCoeff() == 1.0);
    CHECK(b.injection_count() == 1);
    CHECK(b.size(3) == 1);  // the buffer keeps its copy
  }
  SUBCASE("group with a success is untouched") {
    auto trajs = failures(3, 7);
    trajs.push_back(fake_trajectory(3, true, 7));
    auto g = fake_group(3, trajs);
    const auto copy = g.trajectories;
    CHECK_FALSE(b.maybe_inject(g, rng));
    CHECK(g.phase == GroupPhase::kReplayChecked);
    for (std::size_t i = 0; i < copy.size(); ++i) CHECK(g.trajectories[i] == copy[i]);
  }
  SUBCASE("no entry for this task") {
    auto g = fake_group(4, failures(4, 8));
    CHECK_FALSE(b.maybe_inject(g, rng));
    CHECK(g.success_count() == 0);
  }
  SUBCASE("contract errors") {
    auto g = fake_group(3, failures(3, 8));
    b.maybe_inject(g, rng);
    CHECK_THROWS_AS(b.maybe_inject(g, rng), UsageError);
    auto mixed = fake_group(3, failures(3, 4));
    mixed.trajectories.push_back(fake_trajectory(5, false, 1));
    CHECK_THROWS_AS(b.maybe_inject(mixed, rng), UsageError);
  }
}

TEST_CASE("randomized insert/inject stream keeps every invariant") {
  const auto rep = arpo::testing::simulate_replay(10000, 17);
  for (const auto& v : rep.violations) INFO(v);
  CHECK(rep.violations.empty());
  CHECK(rep.all_fail_after_success > 1000);
  CHECK(rep.injections == rep.all_fail_after_success);
}

TEST_CASE("serialization round trip and corruption") {
  ReplayBuffer empty(4);
  CHECK(ReplayBuffer::restore(empty.serialize()) == empty);

  ReplayBuffer b(4);
  for (std::uint64_t tag = 1; tag <= 3; ++tag) {
    auto t = fake_trajectory(tag == 2 ? 9 : 1, true, tag);
    t.steps.resize(1);
    t.steps[0].tokens.logprob_behavior = {-0.1 * static_cast<double>(tag), -1e-300};
    // Actions are re-derived from tokens on read, so keep them consistent.
    t.steps[0].action = parse_action(t.steps[0].tokens.verb_token, t.steps[0].tokens.arg_token);
    b.insert(t);
  }
  auto g = fake_group(1, failures(1, 8));
  Rng rng(3);
  b.maybe_inject(g, rng);
  const auto bytes = b.serialize();
  const auto back = ReplayBuffer::restore(bytes);
  CHECK(back == b);
  CHECK(back.entries(1)->at(1).trajectory.behavior_version == 3);
  CHECK(back.injection_count() == 1);

  for (std::size_t n = 0; n < bytes.size(); n += 7)
    CHECK_THROWS_AS(ReplayBuffer::restore(std::span(bytes).first(n)), IoError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(ReplayBuffer::restore(trailing), IoError);
  auto bad_magic = bytes;
  bad_magic[0] ^= 0xff;
  try {
    ReplayBuffer::restore(bad_magic);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("byte 0") != std::string::npos);
  }
}
