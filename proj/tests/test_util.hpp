#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "arpo/environment.hpp"
#include "arpo/policy_net.hpp"
#include "arpo/rollout.hpp"

namespace arpo::testing {

/// Small network so finite differences stay cheap.
inline PolicyParams small_policy(std::uint64_t seed, double scale = 1.0) {
  PolicyShape shape;
  shape.embed_dim = 4;
  shape.hidden_dim = 5;
  Rng rng(seed);
  auto p = init_policy(shape, rng, 0.5);
  // Heads start near zero in init_policy; widen them so softmaxes are not flat.
  auto b = p.view();
  for (Eigen::Index i = 0; i < b.wv.size(); ++i) b.wv.data()[i] = scale * normal01(rng);
  for (Eigen::Index i = 0; i < b.wa.size(); ++i) b.wa.data()[i] = scale * normal01(rng);
  for (Eigen::Index i = 0; i < b.bv.size(); ++i) b.bv(i) = 0.3 * normal01(rng);
  for (Eigen::Index i = 0; i < b.ba.size(); ++i) b.ba(i) = 0.3 * normal01(rng);
  return p;
}

inline Task make_task(int id, std::vector<Interaction> goal, int max_steps = kDefaultMaxSteps) {
  Task t;
  t.task_id = id;
  t.feasible = !goal.empty();
  t.goal = std::move(goal);
  t.max_steps = max_steps;
  return t;
}

inline Task infeasible_task(int id, int max_steps = kDefaultMaxSteps) { return make_task(id, {}, max_steps); }

/// Episode from a random network; at least `min_steps` long when possible.
inline Trajectory sampled_trajectory(const PolicyParams& p, const Task& task, std::uint64_t seed,
                                     double temperature = 1.0) {
  return run_episode(task, NeuralPolicy(p), temperature, seed);
}

/// |a - b| / max(|a|, |b|, floor)
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("arpo_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace arpo::testing
