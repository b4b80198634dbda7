#include "arpo/task_selection.hpp"

#include <fstream>

namespace arpo {

TaskProbeReport probe_task(const Task& task, const Policy& policy, int n_rollouts, double temperature,
                           std::uint64_t seed, int keep_threshold) {
  if (n_rollouts < 1) throw ConfigError("probe_task: n_rollouts must be >= 1");
  if (keep_threshold < 0) throw ConfigError("probe_task: keep_threshold must be >= 0");
  TaskProbeReport r;
  r.task_id = task.task_id;
  r.n_rollouts = n_rollouts;
  for (int k = 0; k < n_rollouts; ++k) {
    const auto traj = run_episode(task, policy, temperature, derive_seed(seed, 0x960be, static_cast<std::uint64_t>(task.task_id), static_cast<std::uint64_t>(k)));
    r.rewards.push_back(traj.reward.trajectory_reward);
    if (traj.success()) ++r.n_successes;
  }
  r.kept = r.n_successes >= keep_threshold;
  return r;
}

TaskSelection select_tasks(const TaskSet& tasks, const Policy& policy, int n_rollouts, int keep_threshold,
                           double temperature, std::uint64_t seed) {
  if (tasks.empty()) throw ConfigError("select_tasks: empty task set");
  TaskSelection out;
  out.reports.reserve(tasks.size());
  for (const auto& t : tasks) {
    out.reports.push_back(probe_task(t, policy, n_rollouts, temperature, seed, keep_threshold));
    if (out.reports.back().kept) out.selected.push_back(t);
  }
  return out;
}

nlohmann::json probe_report_to_json(const TaskProbeReport& r) {
  return {{"task_id", r.task_id},
          {"n_rollouts", r.n_rollouts},
          {"n_successes", r.n_successes},
          {"kept", r.kept},
          {"rewards", r.rewards}};
}

void write_probe_reports(const std::string& path, const std::vector<TaskProbeReport>& reports) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& r : reports) out << probe_report_to_json(r).dump() << '\n';
}

}  // namespace arpo
