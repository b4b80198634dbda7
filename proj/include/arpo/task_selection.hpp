#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "arpo/environment.hpp"
#include "arpo/rollout.hpp"

namespace arpo {

struct TaskProbeReport {
  int task_id = 0;
  int n_rollouts = 0;
  int n_successes = 0;
  bool kept = false;
  std::vector<double> rewards;  // trajectory_reward per probe rollout

  friend bool operator==(const TaskProbeReport&, const TaskProbeReport&) = default;
};

/// n_rollouts independent episodes of `task`; a task is kept when at least
/// keep_threshold of them succeed.
TaskProbeReport probe_task(const Task& task, const Policy& policy, int n_rollouts, double temperature,
                           std::uint64_t seed, int keep_threshold = 1);

struct TaskSelection {
  TaskSet selected;
  std::vector<TaskProbeReport> reports;  // one per input task, input order
};

/// Probes every task (16 rollouts, keep on >= 1 success by default) and keeps
/// the ones the policy solves at least keep_threshold times. An empty selection
/// is returned as-is; callers decide whether that is fatal.
TaskSelection select_tasks(const TaskSet& tasks, const Policy& policy, int n_rollouts = 16, int keep_threshold = 1,
                           double temperature = 1.0, std::uint64_t seed = 0);

nlohmann::json probe_report_to_json(const TaskProbeReport& r);
void write_probe_reports(const std::string& path, const std::vector<TaskProbeReport>& reports);

}  // namespace arpo
