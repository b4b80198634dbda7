#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "arpo/task_selection.hpp"
#include "test_util.hpp"

using namespace arpo;

namespace {

// Gives up immediately: solves exactly the infeasible tasks.
class AlwaysFailPolicy final : public Policy {
 public:
  TokenStep act(const HistoryView&, double, Rng&) const override {
    TokenStep s;
    s.verb_token = static_cast<int>(ActionKind::kFail);
    s.arg_token = kNoArg;
    return s;
  }
};

}  // namespace

TEST_CASE("probe_task") {
  const Task task = arpo::testing::make_task(0, {{ActionKind::kClickLeft, 2}, {ActionKind::kTypeText, 1}});

  const auto solved = probe_task(task, ScriptedOptimalPolicy{}, 16, 1.0, 0);
  CHECK(solved.n_rollouts == 16);
  CHECK(solved.n_successes == 16);
  CHECK(solved.kept);
  CHECK(solved.rewards.size() == 16);

  const auto never = probe_task(task, NeverFinishPolicy{}, 16, 1.0, 0);
  CHECK(never.n_successes == 0);
  CHECK_FALSE(never.kept);

  const Task inf = arpo::testing::infeasible_task(1);
  for (int threshold : {1, 2, 3}) {
    const auto r = probe_task(inf, UniformRandomPolicy{}, 16, 1.0, 5, threshold);
    CHECK(r.n_successes < 16);
    CHECK(r.kept == (r.n_successes >= threshold));
    int sum = 0;
    for (double x : r.rewards) sum += static_cast<int>(x);
    CHECK(sum == r.n_successes);
  }
  CHECK_THROWS(probe_task(task, NeverFinishPolicy{}, 0, 1.0, 0));
}

TEST_CASE("select_tasks keeps exactly the solved tasks") {
  const auto suite = generate_task_suite(11, 8, 8, {2, 5});
  const auto sel = select_tasks(suite, AlwaysFailPolicy{}, 16, 1, 1.0, 3);
  REQUIRE(sel.reports.size() == suite.size());
  for (const auto& t : sel.selected) CHECK_FALSE(t.feasible);
  CHECK(sel.selected.size() == 8);

  const auto all = select_tasks(suite, NeverFinishPolicy{}, 4, 0, 1.0, 3);
  CHECK(all.selected == suite);
  const auto none = select_tasks(suite, NeverFinishPolicy{}, 4, 1, 1.0, 3);
  CHECK(none.selected.empty());
  CHECK_THROWS(select_tasks(TaskSet{}, NeverFinishPolicy{}, 4, 1, 1.0, 3));
}

TEST_CASE("selection is deterministic, monotone in the threshold and a subset") {
  const auto suite = generate_task_suite(12, 24, 4, {1, 4});
  const NeuralPolicy policy(arpo::testing::small_policy(6, 0.3));
  const auto base = select_tasks(suite, UniformRandomPolicy{}, 16, 1, 1.0, 9);
  CHECK(select_tasks(suite, UniformRandomPolicy{}, 16, 1, 1.0, 9).reports == base.reports);

  std::set<int> input_ids;
  for (const auto& t : suite) input_ids.insert(t.task_id);
  const UniformRandomPolicy uniform;
  for (const Policy* p : {static_cast<const Policy*>(&policy), static_cast<const Policy*>(&uniform)}) {
    std::set<int> prev = input_ids;
    for (int threshold = 0; threshold <= 17; ++threshold) {
      const auto sel = select_tasks(suite, *p, 16, threshold, 1.0, 9);
      std::set<int> ids;
      for (const auto& t : sel.selected) ids.insert(t.task_id);
      CHECK(std::includes(prev.begin(), prev.end(), ids.begin(), ids.end()));
      CHECK(std::includes(input_ids.begin(), input_ids.end(), ids.begin(), ids.end()));
      REQUIRE(sel.reports.size() == suite.size());
      for (std::size_t i = 0; i < suite.size(); ++i) {
        CHECK(sel.reports[i].task_id == suite[i].task_id);
        CHECK(sel.reports[i].n_successes <= sel.reports[i].n_rollouts);
        CHECK(sel.reports[i].kept == (sel.reports[i].n_successes >= threshold));
      }
      prev = ids;
    }
    CHECK(prev.empty());
  }
}

TEST_CASE("probe reports are written one per line") {
  const auto suite = generate_task_suite(13, 3, 1, {2, 3});
  const auto sel = select_tasks(suite, ScriptedOptimalPolicy{}, 2, 1, 1.0, 0);
  const auto dir = arpo::testing::temp_dir("probe");
  const auto path = (dir / "report.jsonl").string();
  write_probe_reports(path, sel.reports);
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("task_id").get<int>() == sel.reports[static_cast<std::size_t>(n)].task_id);
    CHECK(j.at("kept").get<bool>());
    ++n;
  }
  CHECK(n == 4);
}
