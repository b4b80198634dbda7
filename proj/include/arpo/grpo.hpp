#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "arpo/common.hpp"
#include "arpo/policy_net.hpp"
#include "arpo/trajectory.hpp"

namespace arpo {

struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.3;
  double sigma_floor = 1e-8;

  void validate() const {
    if (!(eps_low > 0.0 && eps_low <= eps_high && eps_high < 1.0))
      throw ConfigError("clip config requires 0 < eps_low <= eps_high < 1");
    if (!(sigma_floor >= 0.0)) throw ConfigError("sigma_floor must be >= 0");
  }
};

template <typename Scalar>
struct AdvantageStats {
  Scalar mu = 0;
  Scalar sigma = 0;
  VectorX<Scalar> advantages;
};

/// Group-normalized advantages (r_i - mu) / sigma with the population standard
/// deviation. Groups whose sigma falls below `sigma_floor` carry no ranking
/// information and get all-zero advantages.
template <typename Derived>
AdvantageStats<typename Derived::Scalar> compute_advantages(const Eigen::MatrixBase<Derived>& rewards,
                                                            typename Derived::Scalar sigma_floor = 1e-8) {
  using Scalar = typename Derived::Scalar;
  if (rewards.size() < 2) throw UsageError("compute_advantages: group needs at least 2 rewards");
  AdvantageStats<Scalar> s;
  s.mu = rewards.mean();
  s.sigma = std::sqrt((rewards.array() - s.mu).square().mean());
  if (s.sigma < sigma_floor)
    s.advantages = VectorX<Scalar>::Zero(rewards.size());
  else
    s.advantages = ((rewards.array() - s.mu) / s.sigma).matrix();
  return s;
}

/// Lifecycle of a group inside one training iteration. Advantages may only be
/// computed once replay injection has had its chance to modify the group.
enum class GroupPhase : int { kCollected = 0, kReplayChecked = 1, kAdvantaged = 2 };

struct RolloutGroup {
  int task_id = 0;
  std::vector<Trajectory> trajectories;
  Eigen::VectorXd rewards;  // totals r_i, filled by refresh_rewards()
  double mu = 0.0;
  double sigma = 0.0;
  Eigen::VectorXd advantages;
  GroupPhase phase = GroupPhase::kCollected;

  int size() const { return static_cast<int>(trajectories.size()); }
  void refresh_rewards();
  bool all_failed() const;
  int success_count() const;
};

/// Marks the group as replay-checked (used when replay is disabled).
void mark_replay_checked(RolloutGroup& group);

/// Fills mu, sigma, advantages. Requires phase kReplayChecked.
void compute_group_advantages(RolloutGroup& group, double sigma_floor);

/// min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)
inline double clipped_contribution(double ratio, double advantage, const ClipConfig& clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
  return std::min(ratio * advantage, clipped * advantage);
}

/// d clipped_contribution / d log pi_theta. Zero where the clipped branch is the
/// strict minimum.
inline double clipped_contribution_dlogp(double ratio, double advantage, const ClipConfig& clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
  return ratio * advantage <= clipped * advantage ? ratio * advantage : 0.0;
}

/// One trajectory with the advantage broadcast to its tokens.
struct PolicySample {
  const Trajectory* trajectory = nullptr;
  double advantage = 0.0;
};

struct SurrogateResult {
  double loss = 0.0;
  /// Per sample, d loss / d log pi(token); feed to accumulate_gradient().
  std::vector<Eigen::VectorXd> token_weights;
};

/// loss = -(1/N) sum_i (1/|o_i|) sum_t min(rho_t A_i, clip(rho_t) A_i) from
/// per-token log-probs. There is no reference-policy or KL term: the value
/// depends only on the ratios, the advantages and the clip config.
SurrogateResult surrogate_from_logprobs(std::span<const Eigen::VectorXd> new_logprobs,
                                        std::span<const Eigen::VectorXd> old_logprobs,
                                        std::span<const double> advantages, const ClipConfig& clip);

/// Evaluates pi_theta on every sample (teacher forced, temperature 1) against the
/// stored temperature-1 behavior log-probs.
SurrogateResult surrogate_loss(const PolicyParams& params, std::span<const PolicySample> samples,
                               const ClipConfig& clip);

/// Whole-group form; the group must already be in phase kAdvantaged.
SurrogateResult surrogate_loss(const PolicyParams& params, const RolloutGroup& group, const ClipConfig& clip);

struct LossAndGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;
};

LossAndGradient surrogate_loss_and_gradient(const PolicyParams& params, std::span<const PolicySample> samples,
                                            const ClipConfig& clip);

/// Negative mean (per trajectory, then over trajectories) token log-likelihood.
/// Used by the reject-sampling baseline.
LossAndGradient nll_loss_and_gradient(const PolicyParams& params, std::span<const Trajectory* const> corpus);

struct AdamWConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename Scalar>
struct AdamState {
  VectorX<Scalar> m, v;
  std::uint64_t step = 0;

  explicit AdamState(Eigen::Index n = 0) : m(VectorX<Scalar>::Zero(n)), v(VectorX<Scalar>::Zero(n)) {}
};
using AdamMoments = AdamState<double>;

/// Bias-corrected Adam moments with decoupled weight decay:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
/// A non-finite gradient aborts the step (params and moments untouched).
template <typename Scalar>
void adamw_step(BasicPolicyParams<Scalar>& params, const VectorX<Scalar>& grad, const AdamWConfig& cfg,
                AdamState<Scalar>& st) {
  if (grad.size() != params.theta.size() || st.m.size() != grad.size())
    throw UsageError("adamw_step: shape mismatch");
  if (!grad.allFinite()) {
    Eigen::Index first = -1, bad = 0;
    for (Eigen::Index i = 0; i < grad.size(); ++i)
      if (!std::isfinite(static_cast<double>(grad(i)))) {
        if (first < 0) first = i;
        ++bad;
      }
    throw NumericError("non-finite gradient: " + std::to_string(bad) + " entries, first at index " +
                       std::to_string(first) + "; optimizer step skipped at version " +
                       std::to_string(params.version));
  }
  const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  ++st.step;
  st.m = b1 * st.m + (Scalar(1) - b1) * grad;
  st.v = b2 * st.v + (Scalar(1) - b2) * grad.cwiseAbs2();
  const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(st.step));
  const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(st.step));
  const Scalar lr = Scalar(cfg.lr);
  params.theta -= lr * Scalar(cfg.weight_decay) * params.theta;
  params.theta.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + Scalar(cfg.eps));
  ++params.version;
}

/// Averages the accumulated minibatch gradients and applies one optimizer step.
void accumulate_and_step(PolicyParams& params, std::span<const Eigen::VectorXd> minibatch_gradients,
                         const AdamWConfig& cfg, AdamMoments& moments);

}  // namespace arpo
