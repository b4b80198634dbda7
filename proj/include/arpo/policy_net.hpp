#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "arpo/common.hpp"
#include "arpo/environment.hpp"
#include "arpo/trajectory.hpp"

namespace arpo {

// Sequence policy over the full interaction history.
//
//   x        = sum of embedding columns for every history feature
//   h1       = tanh(W1 x + b1)
//   h2       = tanh(W2 h1 + b2)
//   verb     ~ softmax((Wv h2 + bv) / T)
//   arg|verb ~ softmax((Wa[verb] h2 + ba[verb]) / T)     one argument head per verb
//
// History features are position tagged: instruction items by absolute index and
// by offset from the current step, every past observation's widget states by
// step, every past verb/argument token by step, and the current step index.
// Nothing is truncated, so editing step 0 reaches every later step.
//
// All parameters live in one flat vector; gradients and optimizer moments share
// its layout.

struct PolicyShape {
  int embed_dim = 32;
  int hidden_dim = 64;
  /// Instruction items within this many steps of the current step get a relative tag.
  int relative_window = 2;

  static constexpr int kVerbs = kNumVerbs;
  static constexpr int kArgs = kNumArgTokens;
  static constexpr int kInstrItems = kNumGoalItems + 1;  // + "infeasible request" marker
  static constexpr int kWidgetStates = kNumPrimitiveKinds + 1;

  int bos_feature() const { return 0; }
  int instr_abs_feature(int pos, int item) const { return 1 + pos * kInstrItems + item; }
  int instr_rel_base() const { return 1 + kMaxHorizon * kInstrItems; }
  int instr_rel_feature(int offset, int item) const {
    return instr_rel_base() + (offset + relative_window) * kInstrItems + item;
  }
  int obs_base() const { return instr_rel_base() + (2 * relative_window + 1) * kInstrItems; }
  int obs_feature(int step, int widget, int state) const {
    return obs_base() + (step * kNumWidgets + widget) * kWidgetStates + state;
  }
  int verb_base() const { return obs_base() + kMaxHorizon * kNumWidgets * kWidgetStates; }
  int verb_feature(int step, int verb) const { return verb_base() + step * kVerbs + verb; }
  int arg_base() const { return verb_base() + kMaxHorizon * kVerbs; }
  int arg_feature(int step, int arg) const { return arg_base() + step * kArgs + arg; }
  int step_base() const { return arg_base() + kMaxHorizon * kArgs; }
  int step_feature(int step) const { return step_base() + step; }
  int num_features() const { return step_base() + kMaxHorizon; }

  // Offsets of each block inside the flat parameter vector.
  Eigen::Index off_emb() const { return 0; }
  Eigen::Index off_w1() const { return off_emb() + Eigen::Index{embed_dim} * num_features(); }
  Eigen::Index off_b1() const { return off_w1() + Eigen::Index{hidden_dim} * embed_dim; }
  Eigen::Index off_w2() const { return off_b1() + hidden_dim; }
  Eigen::Index off_b2() const { return off_w2() + Eigen::Index{hidden_dim} * hidden_dim; }
  Eigen::Index off_wv() const { return off_b2() + hidden_dim; }
  Eigen::Index off_bv() const { return off_wv() + Eigen::Index{kVerbs} * hidden_dim; }
  Eigen::Index off_wa() const { return off_bv() + kVerbs; }
  Eigen::Index off_ba() const { return off_wa() + Eigen::Index{kArgs} * kVerbs * hidden_dim; }
  Eigen::Index num_params() const { return off_ba() + Eigen::Index{kArgs} * kVerbs; }

  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

/// Read-only view of a history prefix: the task instruction, the steps taken so
/// far and the observation the next action responds to.
struct HistoryView {
  const Task& task;
  std::span<const StepRecord> past;
  const Observation& current;
};

/// Active feature indices (with multiplicity) for a history prefix.
std::vector<int> history_features(const PolicyShape& shape, const HistoryView& history);

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Named block views into a flat parameter-shaped vector.
template <typename Scalar, bool kConst>
struct ParamBlocks {
  using Mat = std::conditional_t<kConst, const MatrixX<Scalar>, MatrixX<Scalar>>;
  using Vec = std::conditional_t<kConst, const VectorX<Scalar>, VectorX<Scalar>>;
  Eigen::Map<Mat> emb, w1;
  Eigen::Map<Vec> b1;
  Eigen::Map<Mat> w2;
  Eigen::Map<Vec> b2;
  Eigen::Map<Mat> wv;
  Eigen::Map<Vec> bv;
  Eigen::Map<Mat> wa;  // (V * A) x H; rows [v * A, v * A + A) belong to verb v
  Eigen::Map<Vec> ba;  // V * A
};

template <typename Scalar, typename Ptr>
auto make_blocks(const PolicyShape& s, Ptr p) {
  constexpr bool kConst = std::is_const_v<std::remove_pointer_t<Ptr>>;
  const int D = s.embed_dim, H = s.hidden_dim, F = s.num_features();
  const int V = PolicyShape::kVerbs, A = PolicyShape::kArgs;
  return ParamBlocks<Scalar, kConst>{{p + s.off_emb(), D, F}, {p + s.off_w1(), H, D}, {p + s.off_b1(), H},
                                     {p + s.off_w2(), H, H},  {p + s.off_b2(), H},    {p + s.off_wv(), V, H},
                                     {p + s.off_bv(), V},     {p + s.off_wa(), V * A, H}, {p + s.off_ba(), V * A}};
}

template <typename Scalar>
auto blocks(const PolicyShape& s, VectorX<Scalar>& flat) {
  return make_blocks<Scalar>(s, flat.data());
}
template <typename Scalar>
auto blocks(const PolicyShape& s, const VectorX<Scalar>& flat) {
  return make_blocks<Scalar>(s, flat.data());
}

template <typename Scalar>
struct BasicPolicyParams {
  PolicyShape shape;
  VectorX<Scalar> theta;
  /// Incremented by every optimizer step.
  std::uint64_t version = 0;

  BasicPolicyParams() = default;
  explicit BasicPolicyParams(const PolicyShape& s) : shape(s), theta(VectorX<Scalar>::Zero(s.num_params())) {}

  auto view() const { return blocks<Scalar>(shape, theta); }
  auto view() { return blocks<Scalar>(shape, theta); }
  bool all_finite() const { return theta.allFinite(); }
};

using PolicyParams = BasicPolicyParams<double>;

/// Gaussian initialization scaled by fan-in; biases start at zero.
template <typename Scalar>
BasicPolicyParams<Scalar> init_policy(const PolicyShape& shape, Rng& rng, Scalar embed_scale = Scalar(0.1)) {
  BasicPolicyParams<Scalar> p(shape);
  auto b = p.view();
  auto fill = [&rng](auto&& m, Scalar scale) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * static_cast<Scalar>(normal01(rng));
  };
  fill(b.emb, embed_scale);
  fill(b.w1, Scalar(1) / std::sqrt(Scalar(shape.embed_dim)));
  fill(b.w2, Scalar(1) / std::sqrt(Scalar(shape.hidden_dim)));
  fill(b.wv, Scalar(0.1) / std::sqrt(Scalar(shape.hidden_dim)));
  fill(b.wa, Scalar(0.1) / std::sqrt(Scalar(shape.hidden_dim)));
  return p;
}

/// Pooled encoding plus the activations backward() needs.
template <typename Scalar>
struct HiddenState {
  std::vector<int> features;
  VectorX<Scalar> x, h1, h2;
};

template <typename Scalar>
HiddenState<Scalar> encode_history(const BasicPolicyParams<Scalar>& params, const HistoryView& history) {
  const auto b = params.view();
  HiddenState<Scalar> hs;
  hs.features = history_features(params.shape, history);
  hs.x = VectorX<Scalar>::Zero(params.shape.embed_dim);
  for (int f : hs.features) hs.x += b.emb.col(f);
  hs.h1 = (b.w1 * hs.x + b.b1).array().tanh().matrix();
  hs.h2 = (b.w2 * hs.h1 + b.b2).array().tanh().matrix();
  return hs;
}

/// log softmax(logits / temperature).
template <typename Derived>
auto log_softmax(const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar temperature) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > Scalar(0))) throw ConfigError("temperature must be > 0");
  VectorX<Scalar> z = logits / temperature;
  const Scalar m = z.maxCoeff();
  const Scalar lse = m + std::log((z.array() - m).exp().sum());
  return VectorX<Scalar>((z.array() - lse).matrix());
}

template <typename Derived>
auto softmax(const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar temperature) {
  using Scalar = typename Derived::Scalar;
  return VectorX<Scalar>(log_softmax(logits, temperature).array().exp().matrix());
}

template <typename Scalar>
VectorX<Scalar> verb_logits(const BasicPolicyParams<Scalar>& params, const HiddenState<Scalar>& hs) {
  const auto b = params.view();
  return b.wv * hs.h2 + b.bv;
}

template <typename Scalar>
VectorX<Scalar> arg_logits(const BasicPolicyParams<Scalar>& params, const HiddenState<Scalar>& hs, int verb) {
  const auto b = params.view();
  constexpr int A = PolicyShape::kArgs;
  return b.wa.middleRows(verb * A, A) * hs.h2 + b.ba.segment(verb * A, A);
}

/// Verb distribution and, per verb column, the conditional argument distribution.
template <typename Scalar>
struct ActionDistribution {
  VectorX<Scalar> verb_probs;
  MatrixX<Scalar> arg_probs;  // A x V; column v sums to one
};

template <typename Scalar>
ActionDistribution<Scalar> action_distribution(const BasicPolicyParams<Scalar>& params,
                                               const HiddenState<Scalar>& hs, Scalar temperature) {
  ActionDistribution<Scalar> d;
  d.verb_probs = softmax(verb_logits(params, hs), temperature);
  d.arg_probs.resize(PolicyShape::kArgs, PolicyShape::kVerbs);
  for (int v = 0; v < PolicyShape::kVerbs; ++v) d.arg_probs.col(v) = softmax(arg_logits(params, hs, v), temperature);
  return d;
}

/// Inverse-CDF draw from a probability vector.
template <typename Derived>
int sample_categorical(const Eigen::MatrixBase<Derived>& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  const auto n = probs.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    acc += static_cast<double>(probs(i));
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding left u above the last partial sum: take the last non-zero entry.
  for (Eigen::Index i = n - 1; i >= 0; --i)
    if (probs(i) > 0) return static_cast<int>(i);
  return static_cast<int>(n - 1);
}

/// Per-token log-probs of a (verb, arg) pair at the given temperature.
template <typename Scalar>
std::array<Scalar, 2> token_logprobs(const BasicPolicyParams<Scalar>& params, const HiddenState<Scalar>& hs,
                                     int verb, int arg, Scalar temperature) {
  const auto lv = log_softmax(verb_logits(params, hs), temperature);
  const auto la = log_softmax(arg_logits(params, hs, verb), temperature);
  return {lv(verb), la(arg)};
}

/// Draws verb then argument from the tempered distributions and records the
/// log-probs under both the tempered and the temperature-1 distributions.
template <typename Scalar>
TokenStep sample_step(const BasicPolicyParams<Scalar>& params, const HiddenState<Scalar>& hs, Scalar temperature,
                      Rng& rng) {
  const VectorX<Scalar> vlogits = verb_logits(params, hs);
  const VectorX<Scalar> lv = log_softmax(vlogits, temperature);
  TokenStep step;
  step.verb_token = sample_categorical(lv.array().exp().matrix(), rng);
  const VectorX<Scalar> alogits = arg_logits(params, hs, step.verb_token);
  const VectorX<Scalar> la = log_softmax(alogits, temperature);
  step.arg_token = sample_categorical(la.array().exp().matrix(), rng);
  step.logprob_behavior = {static_cast<double>(lv(step.verb_token)), static_cast<double>(la(step.arg_token))};
  if (temperature == Scalar(1)) {
    step.logprob_old = step.logprob_behavior;
  } else {
    step.logprob_old = {static_cast<double>(log_softmax(vlogits, Scalar(1))(step.verb_token)),
                        static_cast<double>(log_softmax(alogits, Scalar(1))(step.arg_token))};
  }
  return step;
}

/// Teacher-forced per-token log-probs (v0, a0, v1, a1, ...) of a recorded trajectory.
template <typename Scalar>
VectorX<Scalar> trajectory_logprobs(const BasicPolicyParams<Scalar>& params, const Trajectory& traj,
                                    Scalar temperature) {
  VectorX<Scalar> out(traj.token_count());
  const std::span<const StepRecord> steps(traj.steps);
  for (int s = 0; s < traj.num_steps(); ++s) {
    const auto& rec = steps[static_cast<std::size_t>(s)];
    const auto hs = encode_history(params, HistoryView{traj.task, steps.first(static_cast<std::size_t>(s)), rec.observation});
    const auto lp = token_logprobs(params, hs, rec.tokens.verb_token, rec.tokens.arg_token, temperature);
    out(2 * s) = lp[0];
    out(2 * s + 1) = lp[1];
  }
  return out;
}

/// grad += d/dtheta sum_t weights(t) * log pi(token_t | history) at `temperature`.
template <typename Scalar, typename Derived>
void accumulate_gradient(const BasicPolicyParams<Scalar>& params, const Trajectory& traj,
                         const Eigen::MatrixBase<Derived>& weights, VectorX<Scalar>& grad,
                         Scalar temperature = Scalar(1)) {
  if (weights.size() != traj.token_count()) throw UsageError("backward: weight vector length != token_count");
  if (grad.size() != params.theta.size()) throw UsageError("backward: gradient buffer has the wrong size");
  const auto b = params.view();
  auto g = blocks<Scalar>(params.shape, grad);
  const std::span<const StepRecord> steps(traj.steps);

  for (int s = 0; s < traj.num_steps(); ++s) {
    const Scalar wv_tok = weights(2 * s), wa_tok = weights(2 * s + 1);
    if (wv_tok == Scalar(0) && wa_tok == Scalar(0)) continue;
    const auto& rec = steps[static_cast<std::size_t>(s)];
    const auto hs = encode_history(params, HistoryView{traj.task, steps.first(static_cast<std::size_t>(s)), rec.observation});
    const int verb = rec.tokens.verb_token, arg = rec.tokens.arg_token;
    constexpr int A = PolicyShape::kArgs;

    // d log softmax(z/T)[k] / dz = (onehot(k) - p) / T
    VectorX<Scalar> gv = -softmax(verb_logits(params, hs), temperature);
    gv(verb) += Scalar(1);
    gv *= wv_tok / temperature;
    VectorX<Scalar> ga = -softmax(arg_logits(params, hs, verb), temperature);
    ga(arg) += Scalar(1);
    ga *= wa_tok / temperature;

    g.wv.noalias() += gv * hs.h2.transpose();
    g.bv += gv;
    g.wa.middleRows(verb * A, A).noalias() += ga * hs.h2.transpose();
    g.ba.segment(verb * A, A) += ga;

    const VectorX<Scalar> gh2 = b.wv.transpose() * gv + b.wa.middleRows(verb * A, A).transpose() * ga;
    const VectorX<Scalar> ga2 = gh2.cwiseProduct((Scalar(1) - hs.h2.array().square()).matrix());
    g.w2.noalias() += ga2 * hs.h1.transpose();
    g.b2 += ga2;
    const VectorX<Scalar> gh1 = b.w2.transpose() * ga2;
    const VectorX<Scalar> ga1 = gh1.cwiseProduct((Scalar(1) - hs.h1.array().square()).matrix());
    g.w1.noalias() += ga1 * hs.x.transpose();
    g.b1 += ga1;
    const VectorX<Scalar> gx = b.w1.transpose() * ga1;
    for (int f : hs.features) g.emb.col(f) += gx;
  }
}

template <typename Scalar, typename Derived>
VectorX<Scalar> backward(const BasicPolicyParams<Scalar>& params, const Trajectory& traj,
                         const Eigen::MatrixBase<Derived>& weights, Scalar temperature = Scalar(1)) {
  VectorX<Scalar> grad = VectorX<Scalar>::Zero(params.theta.size());
  accumulate_gradient(params, traj, weights, grad, temperature);
  return grad;
}

}  // namespace arpo
