#include "arpo/grpo.hpp"

namespace arpo {

void RolloutGroup::refresh_rewards() {
  rewards.resize(size());
  for (int i = 0; i < size(); ++i) rewards(i) = trajectories[static_cast<std::size_t>(i)].reward.total;
}

bool RolloutGroup::all_failed() const { return success_count() == 0; }

int RolloutGroup::success_count() const {
  return static_cast<int>(std::count_if(trajectories.begin(), trajectories.end(),
                                        [](const Trajectory& t) { return t.success(); }));
}

void mark_replay_checked(RolloutGroup& group) {
  if (group.phase != GroupPhase::kCollected) throw UsageError("group already past the replay phase");
  group.phase = GroupPhase::kReplayChecked;
}

void compute_group_advantages(RolloutGroup& group, double sigma_floor) {
  if (group.phase != GroupPhase::kReplayChecked)
    throw UsageError("advantages must be computed after replay injection, exactly once");
  group.refresh_rewards();
  const auto stats = compute_advantages(group.rewards, sigma_floor);
  group.mu = stats.mu;
  group.sigma = stats.sigma;
  group.advantages = stats.advantages;
  group.phase = GroupPhase::kAdvantaged;
}

SurrogateResult surrogate_from_logprobs(std::span<const Eigen::VectorXd> new_logprobs,
                                        std::span<const Eigen::VectorXd> old_logprobs,
                                        std::span<const double> advantages, const ClipConfig& clip) {
  const std::size_t n = new_logprobs.size();
  if (old_logprobs.size() != n || advantages.size() != n) throw UsageError("surrogate: sample count mismatch");
  if (n == 0) throw UsageError("surrogate: no samples");

  SurrogateResult out;
  out.token_weights.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& lp = new_logprobs[i];
    const auto& old = old_logprobs[i];
    if (lp.size() != old.size()) throw UsageError("surrogate: token-count mismatch between policy and behavior");
    if (lp.size() == 0) throw UsageError("surrogate: empty trajectory");
    const double inv_len = 1.0 / static_cast<double>(lp.size());
    auto& w = out.token_weights[i];
    w.resize(lp.size());
    double sum = 0.0;
    for (Eigen::Index t = 0; t < lp.size(); ++t) {
      const double ratio = std::exp(lp(t) - old(t));
      sum += clipped_contribution(ratio, advantages[i], clip);
      // d(-objective)/d log pi_t
      w(t) = -inv_n * inv_len * clipped_contribution_dlogp(ratio, advantages[i], clip);
    }
    objective += inv_len * sum;
  }
  out.loss = -inv_n * objective;
  return out;
}

SurrogateResult surrogate_loss(const PolicyParams& params, std::span<const PolicySample> samples,
                               const ClipConfig& clip) {
  std::vector<Eigen::VectorXd> fresh, old;
  std::vector<double> adv;
  fresh.reserve(samples.size());
  old.reserve(samples.size());
  adv.reserve(samples.size());
  for (const auto& s : samples) {
    fresh.push_back(trajectory_logprobs(params, *s.trajectory, 1.0));
    old.push_back(s.trajectory->old_logprobs());
    adv.push_back(s.advantage);
  }
  return surrogate_from_logprobs(fresh, old, adv, clip);
}

SurrogateResult surrogate_loss(const PolicyParams& params, const RolloutGroup& group, const ClipConfig& clip) {
  if (group.phase != GroupPhase::kAdvantaged) throw UsageError("surrogate_loss: advantages not computed");
  std::vector<PolicySample> samples;
  for (int i = 0; i < group.size(); ++i)
    samples.push_back({&group.trajectories[static_cast<std::size_t>(i)], group.advantages(i)});
  return surrogate_loss(params, samples, clip);
}

LossAndGradient surrogate_loss_and_gradient(const PolicyParams& params, std::span<const PolicySample> samples,
                                            const ClipConfig& clip) {
  const auto s = surrogate_loss(params, samples, clip);
  LossAndGradient out{s.loss, Eigen::VectorXd::Zero(params.theta.size())};
  for (std::size_t i = 0; i < samples.size(); ++i)
    accumulate_gradient(params, *samples[i].trajectory, s.token_weights[i], out.gradient);
  return out;
}

LossAndGradient nll_loss_and_gradient(const PolicyParams& params, std::span<const Trajectory* const> corpus) {
  if (corpus.empty()) throw UsageError("nll: empty corpus");
  LossAndGradient out{0.0, Eigen::VectorXd::Zero(params.theta.size())};
  const double inv_n = 1.0 / static_cast<double>(corpus.size());
  for (const Trajectory* t : corpus) {
    const auto lp = trajectory_logprobs(params, *t, 1.0);
    const double inv_len = 1.0 / static_cast<double>(lp.size());
    out.loss -= inv_n * inv_len * lp.sum();
    const Eigen::VectorXd w = Eigen::VectorXd::Constant(lp.size(), -inv_n * inv_len);
    accumulate_gradient(params, *t, w, out.gradient);
  }
  return out;
}

void accumulate_and_step(PolicyParams& params, std::span<const Eigen::VectorXd> minibatch_gradients,
                         const AdamWConfig& cfg, AdamMoments& moments) {
  if (minibatch_gradients.empty()) throw UsageError("accumulate_and_step: no minibatches");
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(params.theta.size());
  for (const auto& g : minibatch_gradients) {
    if (g.size() != avg.size()) throw UsageError("accumulate_and_step: gradient shape mismatch");
    avg += g;
  }
  avg /= static_cast<double>(minibatch_gradients.size());
  adamw_step(params, avg, cfg, moments);
}

}  // namespace arpo
