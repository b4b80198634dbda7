#include "arpo/rollout.hpp"

#include <atomic>
#include <cmath>
#include <optional>
#include <queue>
#include <thread>

namespace arpo {

void RolloutConfig::validate() const {
  if (n_envs < 1) throw ConfigError("n_envs must be >= 1");
  if (group_size < 2) throw ConfigError("group_size must be >= 2");
  if (max_steps < 1 || max_steps > kMaxHorizon) throw ConfigError("max_steps out of range");
  if (!(rollout_temperature > 0.0)) throw ConfigError("rollout_temperature must be > 0");
  if (latency.os_delay_per_step < 0 || latency.infer_base_cost < 0 || latency.infer_per_item_cost < 0)
    throw ConfigError("latency costs must be >= 0");
}

void Policy::act_batch(std::span<const InferenceRequest> requests, std::span<TokenStep> out) const {
  if (out.size() != requests.size()) throw UsageError("act_batch: output size mismatch");
  for (std::size_t i = 0; i < requests.size(); ++i)
    out[i] = act(requests[i].history(), requests[i].temperature, *requests[i].rng);
}

TokenStep NeuralPolicy::act(const HistoryView& history, double temperature, Rng& rng) const {
  const auto hs = encode_history(*params_, history);
  return sample_step(*params_, hs, temperature, rng);
}

int goal_progress(const Task& task, std::span<const StepRecord> past) {
  std::size_t p = 0;
  for (const auto& rec : past) {
    const auto* a = std::get_if<Action>(&rec.action);
    if (!a || !is_primitive(a->kind) || p >= task.goal.size()) continue;
    if (task.goal[p] == Interaction{a->kind, *a->argument}) ++p;
  }
  return static_cast<int>(p);
}

namespace {

TokenStep deterministic(ActionKind kind, int arg) {
  TokenStep s;
  s.verb_token = static_cast<int>(kind);
  s.arg_token = arg;
  return s;
}

TokenStep optimal_step(const HistoryView& h) {
  if (!h.task.feasible) return deterministic(ActionKind::kFail, kNoArg);
  const int p = goal_progress(h.task, h.past);
  if (p < static_cast<int>(h.task.goal.size())) {
    const auto& g = h.task.goal[static_cast<std::size_t>(p)];
    return deterministic(g.kind, g.widget);
  }
  return deterministic(ActionKind::kFinish, kNoArg);
}

}  // namespace

TokenStep ScriptedOptimalPolicy::act(const HistoryView& history, double, Rng&) const {
  return optimal_step(history);
}

TokenStep NoisyExpertPolicy::act(const HistoryView& history, double, Rng& rng) const {
  const TokenStep best = optimal_step(history);
  TokenStep s = best;
  if (uniform01(rng) < noise_) {
    s.verb_token = static_cast<int>(uniform_index(rng, kNumPrimitiveKinds));
    s.arg_token = static_cast<int>(uniform_index(rng, kNumWidgets));
  }
  // Exact log-probs of the mixture, factored as p(verb) * p(arg | verb).
  const double n = noise_;
  const bool v_best = s.verb_token == best.verb_token;
  const bool v_prim = s.verb_token < kNumPrimitiveKinds;
  const double p_verb = (v_best ? 1.0 - n : 0.0) + (v_prim ? n / kNumPrimitiveKinds : 0.0);
  const double p_joint = (v_best && s.arg_token == best.arg_token ? 1.0 - n : 0.0) +
                         (v_prim && s.arg_token < kNumWidgets ? n / kNumGoalItems : 0.0);
  s.logprob_behavior = {std::log(p_verb), std::log(p_joint / p_verb)};
  s.logprob_old = s.logprob_behavior;
  return s;
}

TokenStep NeverFinishPolicy::act(const HistoryView&, double, Rng&) const {
  return deterministic(ActionKind::kWait, kNoArg);
}

TokenStep UniformRandomPolicy::act(const HistoryView&, double, Rng& rng) const {
  TokenStep s;
  s.verb_token = static_cast<int>(uniform_index(rng, kNumVerbs));
  s.arg_token = static_cast<int>(uniform_index(rng, kNumArgTokens));
  s.logprob_behavior = {-std::log(double{kNumVerbs}), -std::log(double{kNumArgTokens})};
  s.logprob_old = s.logprob_behavior;
  return s;
}

EpisodeRunner::EpisodeRunner(const Task& task, std::uint64_t seed, int max_steps_cap, double temperature,
                             std::uint64_t behavior_version)
    : task_(task), rng_(seed) {
  task_.max_steps = std::min(task_.max_steps, max_steps_cap);
  env_.reset(task_, seed);
  traj_.task = task_;
  traj_.behavior_version = behavior_version;
  traj_.behavior_temperature = temperature;
  traj_.steps.reserve(static_cast<std::size_t>(task_.max_steps));
}

InferenceRequest EpisodeRunner::request() {
  if (done()) throw UsageError("EpisodeRunner::request on a finished episode");
  return {&task_, traj_.steps, &env_.observation(), traj_.behavior_temperature, &rng_};
}

bool EpisodeRunner::apply(const TokenStep& tokens) {
  StepRecord rec{env_.observation(), tokens, parse_action(tokens.verb_token, tokens.arg_token)};
  const auto result = env_.step(rec.action);
  traj_.steps.push_back(std::move(rec));
  if (result.terminal) {
    traj_.final_observation = result.observation;
    traj_.outcome = env_.outcome();
    traj_.reward = env_.terminal_reward();
  }
  return result.terminal;
}

Trajectory EpisodeRunner::finish() && {
  if (!done()) throw UsageError("EpisodeRunner::finish before the episode ended");
  return std::move(traj_);
}

Trajectory run_episode(const Task& task, const Policy& policy, double temperature, std::uint64_t seed,
                       int max_steps_cap) {
  EpisodeRunner runner(task, seed, max_steps_cap, temperature, policy.version());
  while (!runner.done()) {
    const auto req = runner.request();
    runner.apply(policy.act(req.history(), req.temperature, *req.rng));
  }
  return std::move(runner).finish();
}

RolloutGroup run_group(const Task& task, const Policy& policy, const RolloutConfig& config,
                       std::uint64_t base_seed, std::size_t group_index) {
  config.validate();
  RolloutGroup g;
  g.task_id = task.task_id;
  g.trajectories.reserve(static_cast<std::size_t>(config.group_size));
  for (int k = 0; k < config.group_size; ++k)
    g.trajectories.push_back(run_episode(task, policy, config.rollout_temperature,
                                         episode_seed(base_seed, group_index, static_cast<std::size_t>(k)),
                                         config.max_steps));
  g.refresh_rewards();
  return g;
}

std::vector<TokenStep> InferenceService::batched_infer(std::span<const InferenceRequest> requests) {
  if (requests.empty()) throw UsageError("batched_infer: empty batch");
  std::vector<TokenStep> out(requests.size());
  policy_.act_batch(requests, out);
  ++calls_;
  items_ += requests.size();
  max_batch_ = std::max(max_batch_, requests.size());
  return out;
}

namespace {

enum class EventKind : int { kWorkerReady = 0, kServiceDone = 1, kTryStart = 2 };

struct Event {
  double time;
  EventKind kind;
  std::uint64_t seq;
  int worker;

  // Min-heap order: time, then kind, then insertion order.
  bool operator>(const Event& o) const {
    if (time != o.time) return time > o.time;
    if (kind != o.kind) return kind > o.kind;
    return seq > o.seq;
  }
};

}  // namespace

EpochRollout run_epoch(std::span<const Task> tasks, const Policy& policy, const RolloutConfig& config,
                       std::uint64_t base_seed) {
  config.validate();
  if (tasks.empty()) throw UsageError("run_epoch: no tasks");
  const std::size_t G = static_cast<std::size_t>(config.group_size);
  const std::size_t total = tasks.size() * G;
  const std::size_t n_envs = static_cast<std::size_t>(config.n_envs);

  std::vector<std::optional<Trajectory>> done_slots(total);
  InferenceService service(policy, config.latency);
  ThroughputReport report;
  report.n_envs = config.n_envs;
  double occupancy_sum = 0.0;
  double clock = 0.0;

  for (std::size_t wave_begin = 0; wave_begin < total; wave_begin += n_envs) {
    const std::size_t wave_size = std::min(n_envs, total - wave_begin);
    std::vector<std::optional<EpisodeRunner>> workers(wave_size);
    for (std::size_t w = 0; w < wave_size; ++w) {
      const std::size_t ep = wave_begin + w;
      workers[w].emplace(tasks[ep / G], episode_seed(base_seed, ep / G, ep % G), config.max_steps,
                         config.rollout_temperature, policy.version());
    }

    std::priority_queue<Event, std::vector<Event>, std::greater<>> events;
    std::uint64_t seq = 0;
    std::vector<int> pending;
    std::vector<int> in_flight;
    bool service_busy = false;
    const double wave_start = clock;
    double wave_end = clock;

    for (std::size_t w = 0; w < wave_size; ++w) events.push({clock, EventKind::kWorkerReady, seq++, static_cast<int>(w)});

    while (!events.empty()) {
      const Event e = events.top();
      events.pop();
      switch (e.kind) {
        case EventKind::kWorkerReady:
          pending.push_back(e.worker);
          events.push({e.time, EventKind::kTryStart, seq++, -1});
          break;
        case EventKind::kTryStart: {
          if (service_busy || pending.empty()) break;
          in_flight.assign(pending.begin(), pending.end());
          pending.clear();
          std::vector<InferenceRequest> batch;
          batch.reserve(in_flight.size());
          for (int w : in_flight) batch.push_back(workers[static_cast<std::size_t>(w)]->request());
          auto results = service.batched_infer(batch);
          for (std::size_t i = 0; i < in_flight.size(); ++i) {
            auto& runner = *workers[static_cast<std::size_t>(in_flight[i])];
            runner.apply(results[i]);
          }
          const double cost = service.batch_cost(batch.size());
          report.inference_vtime += cost;
          occupancy_sum += static_cast<double>(batch.size());
          report.max_occupancy = std::max(report.max_occupancy, static_cast<int>(batch.size()));
          service_busy = true;
          events.push({e.time + cost, EventKind::kServiceDone, seq++, -1});
          break;
        }
        case EventKind::kServiceDone: {
          service_busy = false;
          // Each answered worker now executes its action in the environment.
          for (int w : in_flight) {
            const double ready = e.time + config.latency.os_delay_per_step;
            report.env_step_vtime += config.latency.os_delay_per_step;
            ++report.env_steps;
            if (workers[static_cast<std::size_t>(w)]->done())
              wave_end = std::max(wave_end, ready);
            else
              events.push({ready, EventKind::kWorkerReady, seq++, w});
          }
          in_flight.clear();
          events.push({e.time, EventKind::kTryStart, seq++, -1});
          break;
        }
      }
    }

    for (std::size_t w = 0; w < wave_size; ++w) done_slots[wave_begin + w] = std::move(*workers[w]).finish();
    report.batch_times.push_back(wave_end - wave_start);
    clock = wave_end;
  }

  EpochRollout out;
  out.groups.resize(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    auto& g = out.groups[i];
    g.task_id = tasks[i].task_id;
    for (std::size_t k = 0; k < G; ++k) g.trajectories.push_back(std::move(*done_slots[i * G + k]));
    g.refresh_rewards();
  }
  report.inference_calls = service.calls();
  report.mean_occupancy = report.inference_calls ? occupancy_sum / static_cast<double>(report.inference_calls) : 0.0;
  report.per_epoch_vtime = clock;
  report.per_batch_vtime = clock / static_cast<double>(report.batch_times.size());
  out.report = std::move(report);
  return out;
}

std::vector<RolloutGroup> run_epoch_threaded(std::span<const Task> tasks, const Policy& policy,
                                             const RolloutConfig& config, std::uint64_t base_seed, int n_threads) {
  config.validate();
  if (tasks.empty()) throw UsageError("run_epoch_threaded: no tasks");
  if (n_threads < 1) throw ConfigError("n_threads must be >= 1");
  const std::size_t G = static_cast<std::size_t>(config.group_size);
  const std::size_t total = tasks.size() * G;
  std::vector<std::optional<Trajectory>> slots(total);
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t ep = next++; ep < total; ep = next++)
          slots[ep] = run_episode(tasks[ep / G], policy, config.rollout_temperature,
                                  episode_seed(base_seed, ep / G, ep % G), config.max_steps);
      });
    }
  }
  std::vector<RolloutGroup> groups(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    groups[i].task_id = tasks[i].task_id;
    for (std::size_t k = 0; k < G; ++k) groups[i].trajectories.push_back(std::move(*slots[i * G + k]));
    groups[i].refresh_rewards();
  }
  return groups;
}

}  // namespace arpo
