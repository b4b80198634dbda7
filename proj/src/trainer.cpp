#include "arpo/trainer.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "arpo/serialize.hpp"

namespace arpo {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kGrpo: return "grpo";
    case Algorithm::kArpo: return "arpo";
    case Algorithm::kRejectSft: return "reject_sft";
  }
  return "?";
}

Algorithm algorithm_from_string(std::string_view s) {
  if (s == "grpo") return Algorithm::kGrpo;
  if (s == "arpo") return Algorithm::kArpo;
  if (s == "reject_sft") return Algorithm::kRejectSft;
  throw ConfigError("unknown algorithm '" + std::string(s) + "' (expected grpo, arpo or reject_sft)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (rollout_batch_tasks < 1) throw ConfigError("rollout_batch_tasks must be >= 1");
  if (minibatch_size < 1) throw ConfigError("minibatch_size must be >= 1");
  if (grad_accumulation < 1) throw ConfigError("grad_accumulation must be >= 1");
  if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be > 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    throw ConfigError("optimizer betas must lie in [0, 1)");
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps must be > 0");
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  clip.validate();
  if (!(eval_temperature > 0.0)) throw ConfigError("eval_temperature must be > 0");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (replay_capacity < 0) throw ConfigError("replay_capacity must be >= 0");
  if (sft_passes < 1) throw ConfigError("sft_passes must be >= 1");
  if (selection_rollouts < 1) throw ConfigError("selection_rollouts must be >= 1");
  if (selection_keep_threshold < 0) throw ConfigError("selection_keep_threshold must be >= 0");
  const auto& b = baseline;
  if (b.embed_dim < 1 || b.hidden_dim < 1 || b.relative_window < 0) throw ConfigError("baseline network shape invalid");
  if (b.pool_tasks < 0 || b.pool_infeasible < 0) throw ConfigError("baseline pool sizes must be >= 0");
  if (b.pool_min_len < 1 || b.pool_max_len < b.pool_min_len) throw ConfigError("baseline pool lengths invalid");
  if (!(b.demo_noise >= 0.0 && b.demo_noise <= 1.0)) throw ConfigError("baseline.demo_noise must lie in [0, 1]");
  if (b.pretrain_steps < 0 || b.pretrain_batch < 1) throw ConfigError("baseline pretraining budget invalid");
  if (!(b.pretrain_lr > 0.0)) throw ConfigError("baseline.pretrain_lr must be > 0");
  rollout_config().validate();
}

RolloutConfig TrainConfig::rollout_config() const {
  RolloutConfig rc;
  rc.n_envs = n_envs;
  rc.group_size = group_size;
  rc.max_steps = max_steps;
  rc.rollout_temperature = rollout_temperature;
  rc.latency = latency;
  return rc;
}

// ---------------------------------------------------------------------------
// Config file

json config_to_json(const TrainConfig& c) {
  const auto& b = c.baseline;
  return {
      {"algorithm", std::string(to_string(c.algorithm))},
      {"epochs", c.epochs},
      {"rollout_batch_tasks", c.rollout_batch_tasks},
      {"group_size", c.group_size},
      {"minibatch_size", c.minibatch_size},
      {"grad_accumulation", c.grad_accumulation},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"clip", {{"eps_low", c.clip.eps_low}, {"eps_high", c.clip.eps_high}, {"sigma_floor", c.clip.sigma_floor}}},
      {"rollout_temperature", c.rollout_temperature},
      {"eval_temperature", c.eval_temperature},
      {"eval_episodes", c.eval_episodes},
      {"eval_every", c.eval_every},
      {"replay_capacity", c.replay_capacity},
      {"seed", c.seed},
      {"n_envs", c.n_envs},
      {"max_steps", c.max_steps},
      {"latency",
       {{"os_delay_per_step", c.latency.os_delay_per_step},
        {"infer_base_cost", c.latency.infer_base_cost},
        {"infer_per_item_cost", c.latency.infer_per_item_cost}}},
      {"baseline",
       {{"seed", b.seed},
        {"embed_dim", b.embed_dim},
        {"hidden_dim", b.hidden_dim},
        {"relative_window", b.relative_window},
        {"pool_tasks", b.pool_tasks},
        {"pool_infeasible", b.pool_infeasible},
        {"pool_min_len", b.pool_min_len},
        {"pool_max_len", b.pool_max_len},
        {"demo_noise", b.demo_noise},
        {"pretrain_steps", b.pretrain_steps},
        {"pretrain_batch", b.pretrain_batch},
        {"pretrain_lr", b.pretrain_lr}}},
      {"sft_passes", c.sft_passes},
      {"selection_rollouts", c.selection_rollouts},
      {"selection_keep_threshold", c.selection_keep_threshold},
      {"write_transcripts", c.write_transcripts},
  };
}

namespace {

// Copies j[key] into dst when present and records the key as known.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config: '" + (prefix_.empty() ? "<root>" : prefix_) + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      dst = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for '" + prefix_ + key + "': " + e.what());
    }
  }

  ObjectReader child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    static const json kEmpty = json::object();
    return ObjectReader(it == j_.end() ? kEmpty : *it, prefix_ + key + ".");
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + prefix_ + k + "'");
  }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  ObjectReader r(j, "");
  std::string algorithm(to_string(c.algorithm));
  r.get("algorithm", algorithm);
  c.algorithm = algorithm_from_string(algorithm);
  r.get("epochs", c.epochs);
  r.get("rollout_batch_tasks", c.rollout_batch_tasks);
  r.get("group_size", c.group_size);
  r.get("minibatch_size", c.minibatch_size);
  r.get("grad_accumulation", c.grad_accumulation);
  {
    auto o = r.child("optimizer");
    o.get("lr", c.optimizer.lr);
    o.get("beta1", c.optimizer.beta1);
    o.get("beta2", c.optimizer.beta2);
    o.get("eps", c.optimizer.eps);
    o.get("weight_decay", c.optimizer.weight_decay);
    o.finish();
  }
  {
    auto o = r.child("clip");
    o.get("eps_low", c.clip.eps_low);
    o.get("eps_high", c.clip.eps_high);
    o.get("sigma_floor", c.clip.sigma_floor);
    o.finish();
  }
  r.get("rollout_temperature", c.rollout_temperature);
  r.get("eval_temperature", c.eval_temperature);
  r.get("eval_episodes", c.eval_episodes);
  r.get("eval_every", c.eval_every);
  r.get("replay_capacity", c.replay_capacity);
  r.get("seed", c.seed);
  r.get("n_envs", c.n_envs);
  r.get("max_steps", c.max_steps);
  {
    auto o = r.child("latency");
    o.get("os_delay_per_step", c.latency.os_delay_per_step);
    o.get("infer_base_cost", c.latency.infer_base_cost);
    o.get("infer_per_item_cost", c.latency.infer_per_item_cost);
    o.finish();
  }
  {
    auto o = r.child("baseline");
    auto& b = c.baseline;
    o.get("seed", b.seed);
    o.get("embed_dim", b.embed_dim);
    o.get("hidden_dim", b.hidden_dim);
    o.get("relative_window", b.relative_window);
    o.get("pool_tasks", b.pool_tasks);
    o.get("pool_infeasible", b.pool_infeasible);
    o.get("pool_min_len", b.pool_min_len);
    o.get("pool_max_len", b.pool_max_len);
    o.get("demo_noise", b.demo_noise);
    o.get("pretrain_steps", b.pretrain_steps);
    o.get("pretrain_batch", b.pretrain_batch);
    o.get("pretrain_lr", b.pretrain_lr);
    o.finish();
  }
  r.get("sft_passes", c.sft_passes);
  r.get("selection_rollouts", c.selection_rollouts);
  r.get("selection_keep_threshold", c.selection_keep_threshold);
  r.get("write_transcripts", c.write_transcripts);
  r.finish();
  c.validate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + path + "': " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Baseline

namespace {

// One teacher-forced likelihood term: grad += scale * d/dtheta sum_t w_t log pi(token_t).
struct WeightedSequence {
  Trajectory trajectory;
  Eigen::VectorXd weights;
  double scale = 0.0;
};

}  // namespace

PolicyParams make_baseline_policy(const BaselineConfig& cfg) {
  PolicyShape shape;
  shape.embed_dim = cfg.embed_dim;
  shape.hidden_dim = cfg.hidden_dim;
  shape.relative_window = cfg.relative_window;
  Rng rng(derive_seed(cfg.seed, 0x1417));
  PolicyParams params = init_policy<double>(shape, rng);
  if (cfg.pretrain_steps == 0 || cfg.pool_tasks + cfg.pool_infeasible == 0) return params;

  const TaskSet pool = generate_task_suite(derive_seed(cfg.seed, 0x9001), cfg.pool_tasks, cfg.pool_infeasible,
                                           {cfg.pool_min_len, cfg.pool_max_len});
  const NoisyExpertPolicy demonstrator(cfg.demo_noise);
  const ScriptedOptimalPolicy expert;
  AdamWConfig opt;
  opt.lr = cfg.pretrain_lr;
  AdamMoments moments(params.theta.size());
  const double inv_batch = 1.0 / cfg.pretrain_batch;

  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    std::vector<WeightedSequence> terms;
    for (int k = 0; k < cfg.pretrain_batch; ++k) {
      const Task& task = pool[uniform_index(rng, pool.size())];
      Trajectory demo = run_episode(task, demonstrator, 1.0, rng());
      // Imitate only the expert's choices; the injected mistakes are there so the
      // student also sees (and learns to recover from) off-path histories.
      Eigen::VectorXd w = Eigen::VectorXd::Zero(demo.token_count());
      const std::span<const StepRecord> steps(demo.steps);
      for (int s = 0; s < demo.num_steps(); ++s) {
        const auto& rec = steps[static_cast<std::size_t>(s)];
        Rng unused(0);
        const auto best = expert.act(HistoryView{demo.task, steps.first(static_cast<std::size_t>(s)), rec.observation},
                                     1.0, unused);
        if (best.verb_token == rec.tokens.verb_token && best.arg_token == rec.tokens.arg_token)
          w.segment(2 * s, 2).setOnes();
      }
      if (const double mass = w.sum(); mass > 0.0)
        terms.push_back({std::move(demo), std::move(w), inv_batch / mass});
    }
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.theta.size());
    for (const auto& t : terms) accumulate_gradient(params, t.trajectory, Eigen::VectorXd(-t.scale * t.weights), grad);
    adamw_step(params, grad, opt, moments);
  }
  params.version = 0;
  return params;
}

// ---------------------------------------------------------------------------
// Evaluation

bool EvalSummary::operator==(const EvalSummary& o) const {
  auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
  return epoch == o.epoch && step == o.step && same(in_domain_standard, o.in_domain_standard) &&
         same(in_domain_hard, o.in_domain_hard) && same(ood_standard, o.ood_standard) &&
         same(ood_hard, o.ood_hard) && same(all_standard, o.all_standard) && same(all_hard, o.all_hard);
}

EvalResult evaluate(const Policy& policy, const TaskSet& tasks, int n_episodes, double temperature,
                    std::uint64_t seed, int max_steps_cap) {
  if (tasks.empty()) throw ConfigError("evaluate: empty task set");
  if (n_episodes < 1) throw ConfigError("evaluate: n_episodes must be >= 1");
  EvalResult out;
  double sum[2][2] = {{0, 0}, {0, 0}};  // [domain][protocol]
  int count[2] = {0, 0};
  for (const auto& task : tasks) {
    TaskEval te{task.task_id, task.domain, 0.0, 0.0};
    for (int k = 0; k < n_episodes; ++k) {
      const auto traj = run_episode(task, policy, temperature,
                                    derive_seed(seed, 0xe7a1, static_cast<std::uint64_t>(task.task_id),
                                                static_cast<std::uint64_t>(k)),
                                    max_steps_cap);
      te.standard += score_episode(traj.task, traj.outcome, true).trajectory_reward;
      te.hard += score_episode(traj.task, traj.outcome, false).trajectory_reward;
    }
    te.standard /= n_episodes;
    te.hard /= n_episodes;
    const int d = static_cast<int>(task.domain);
    sum[d][0] += te.standard;
    sum[d][1] += te.hard;
    ++count[d];
    out.per_task.push_back(te);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto mean = [&](int d, int p) { return count[d] ? sum[d][p] / count[d] : nan; };
  auto& s = out.summary;
  s.in_domain_standard = mean(0, 0);
  s.in_domain_hard = mean(0, 1);
  s.ood_standard = mean(1, 0);
  s.ood_hard = mean(1, 1);
  const double n = static_cast<double>(tasks.size());
  s.all_standard = (sum[0][0] + sum[1][0]) / n;
  s.all_hard = (sum[0][1] + sum[1][1]) / n;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[] = "ARPOCKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

void write_vector(ByteWriter& w, const Eigen::VectorXd& v) {
  w.u64(static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) w.f64(v(i));
}

Eigen::VectorXd read_vector(ByteReader& r) {
  const std::size_t n = r.count(8);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = r.f64();
  return v;
}

void write_params(ByteWriter& w, const PolicyParams& p) {
  w.i32(p.shape.embed_dim);
  w.i32(p.shape.hidden_dim);
  w.i32(p.shape.relative_window);
  w.u64(p.version);
  write_vector(w, p.theta);
}

PolicyParams read_params(ByteReader& r) {
  const std::size_t at = r.position();
  PolicyShape shape;
  shape.embed_dim = r.i32();
  shape.hidden_dim = r.i32();
  shape.relative_window = r.i32();
  if (shape.embed_dim < 1 || shape.hidden_dim < 1 || shape.relative_window < 0 || shape.embed_dim > 4096 ||
      shape.hidden_dim > 4096 || shape.relative_window > kMaxHorizon)
    r.fail(at, "invalid policy shape");
  PolicyParams p(shape);
  p.version = r.u64();
  const std::size_t theta_at = r.position();
  p.theta = read_vector(r);
  if (p.theta.size() != shape.num_params()) r.fail(theta_at, "parameter count does not match the shape");
  return p;
}

void write_metrics_row(ByteWriter& w, const MetricsRow& m) {
  w.i32(m.step);
  w.i32(m.epoch);
  w.i32(m.batch);
  w.u64(m.policy_version);
  w.f64(m.mean_reward);
  w.f64(m.mean_success);
  w.f64(m.mean_group_std);
  w.f64(m.mean_group_std_trained);
  w.f64(m.frac_all_fail);
  w.i32(m.injections);
  w.u64(m.injections_total);
  w.u64(m.replay_size);
  w.f64(m.loss);
  w.f64(m.rollout_vtime);
}

MetricsRow read_metrics_row(ByteReader& r) {
  MetricsRow m;
  m.step = r.i32();
  m.epoch = r.i32();
  m.batch = r.i32();
  m.policy_version = r.u64();
  m.mean_reward = r.f64();
  m.mean_success = r.f64();
  m.mean_group_std = r.f64();
  m.mean_group_std_trained = r.f64();
  m.frac_all_fail = r.f64();
  m.injections = r.i32();
  m.injections_total = r.u64();
  m.replay_size = r.u64();
  m.loss = r.f64();
  m.rollout_vtime = r.f64();
  return m;
}

void write_eval_row(ByteWriter& w, const EvalSummary& e) {
  w.i32(e.epoch);
  w.i32(e.step);
  for (double v : {e.in_domain_standard, e.in_domain_hard, e.ood_standard, e.ood_hard, e.all_standard, e.all_hard})
    w.f64(v);
}

EvalSummary read_eval_row(ByteReader& r) {
  EvalSummary e;
  e.epoch = r.i32();
  e.step = r.i32();
  for (double* v : {&e.in_domain_standard, &e.in_domain_hard, &e.ood_standard, &e.ood_hard, &e.all_standard,
                    &e.all_hard})
    *v = r.f64();
  return e;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TrainerState& s) {
  ByteWriter w;
  w.raw({reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 8});
  w.u32(kCheckpointVersion);
  w.str(s.config_json);
  write_params(w, s.params);
  write_vector(w, s.moments.m);
  write_vector(w, s.moments.v);
  w.u64(s.moments.step);
  s.replay.write(w);
  std::ostringstream rng_text;
  rng_text << s.rng;
  w.str(rng_text.str());
  w.i32(s.next_epoch);
  w.i32(s.steps);
  w.f64(s.rollout_vtime);
  w.u64(s.metrics.size());
  for (const auto& m : s.metrics) write_metrics_row(w, m);
  w.u64(s.evals.size());
  for (const auto& e : s.evals) write_eval_row(w, e);
  return w.take();
}

TrainerState restore_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.raw(8);
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kCheckpointMagic)))
    r.fail(0, "not a checkpoint (bad magic)");
  const std::size_t version_at = r.position();
  if (const auto v = r.u32(); v != kCheckpointVersion)
    r.fail(version_at, "unsupported checkpoint version " + std::to_string(v));
  TrainerState s;
  s.config_json = r.str();
  s.params = read_params(r);
  const std::size_t moments_at = r.position();
  s.moments.m = read_vector(r);
  s.moments.v = read_vector(r);
  if (s.moments.m.size() != s.params.theta.size() || s.moments.v.size() != s.params.theta.size())
    r.fail(moments_at, "optimizer moments do not match the parameter count");
  s.moments.step = r.u64();
  s.replay = ReplayBuffer::read(r);
  const std::size_t rng_at = r.position();
  std::istringstream rng_text(r.str());
  rng_text >> s.rng;
  if (!rng_text) r.fail(rng_at, "bad generator state");
  s.next_epoch = r.i32();
  s.steps = r.i32();
  s.rollout_vtime = r.f64();
  if (s.next_epoch < 0 || s.steps < 0) r.fail("negative progress counters");
  const std::size_t n_metrics = r.count(8);
  for (std::size_t i = 0; i < n_metrics; ++i) s.metrics.push_back(read_metrics_row(r));
  const std::size_t n_evals = r.count(8);
  for (std::size_t i = 0; i < n_evals; ++i) s.evals.push_back(read_eval_row(r));
  if (!r.done()) r.fail("trailing bytes after checkpoint");
  return s;
}

void save_checkpoint(const std::string& path, const TrainerState& s) {
  write_file_bytes(path, serialize_checkpoint(s));
}

TrainerState load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return restore_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError("checkpoint '" + path + "': " + e.what());
  }
}

PolicyParams load_policy(const std::string& path) { return load_checkpoint(path).params; }

// ---------------------------------------------------------------------------
// Training

std::vector<std::vector<Task>> epoch_batches(const TaskSet& tasks, int batch_tasks, Rng& rng) {
  if (tasks.empty()) throw ConfigError("training task set is empty");
  if (batch_tasks < 1) throw ConfigError("rollout_batch_tasks must be >= 1");
  std::vector<std::size_t> order(tasks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order.begin(), order.end(), rng);
  const std::size_t b = static_cast<std::size_t>(batch_tasks);
  const std::size_t n_batches = (order.size() + b - 1) / b;
  std::vector<std::vector<Task>> out(n_batches);
  for (std::size_t k = 0; k < n_batches * b; ++k) out[k / b].push_back(tasks[order[k % order.size()]]);
  return out;
}

namespace {

std::string config_fingerprint(const TrainConfig& c) {
  json j = config_to_json(c);
  j.erase("epochs");  // extending a run is a legitimate resume
  j.erase("write_transcripts");
  return j.dump();
}

double mean_group_std(const std::vector<RolloutGroup>& groups) {
  double s = 0.0;
  for (const auto& g : groups) {
    const double mu = g.rewards.mean();
    s += std::sqrt((g.rewards.array() - mu).square().mean());
  }
  return s / static_cast<double>(groups.size());
}

void write_lines(const std::string& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void persist_run(const std::string& run_dir, const TrainerState& st) {
  if (run_dir.empty()) return;
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory '" + run_dir + "': " + ec.message());
  save_checkpoint(run_dir + "/checkpoint.bin", st);
  std::vector<json> rows;
  for (const auto& m : st.metrics) rows.push_back(metrics_to_json(m));
  write_lines(run_dir + "/metrics.jsonl", rows);
  rows.clear();
  for (const auto& e : st.evals) rows.push_back(eval_to_json(e));
  write_lines(run_dir + "/eval.jsonl", rows);
  write_text(run_dir + "/train_metrics.csv", metrics_csv(st.metrics));
  write_text(run_dir + "/eval_metrics.csv", eval_csv(st.evals));
}

void append_transcripts(const std::string& run_dir, int epoch, const std::vector<RolloutGroup>& groups) {
  if (run_dir.empty()) return;
  std::ofstream out(run_dir + "/transcripts.jsonl", std::ios::app);
  if (!out) throw IoError("cannot append to '" + run_dir + "/transcripts.jsonl'");
  for (const auto& g : groups)
    for (const auto& t : g.trajectories) {
      json j = trajectory_to_json(t);
      j["epoch"] = epoch;
      out << j.dump() << '\n';
    }
}

TrainerState fresh_state(const TrainConfig& config, const PolicyParams& initial) {
  TrainerState st(config.replay_capacity);
  st.params = initial;
  st.moments = AdamMoments(initial.theta.size());
  st.rng.seed(derive_seed(config.seed, 0x7a11));
  st.config_json = config_fingerprint(config);
  return st;
}

TrainerState resume_state(const TrainConfig& config, TrainOptions& options, const PolicyParams& initial) {
  if (!options.resume) return fresh_state(config, initial);
  TrainerState st = std::move(*options.resume);
  options.resume.reset();
  if (st.config_json != config_fingerprint(config))
    throw ConfigError("resume: checkpoint was written under a different configuration");
  return st;
}

void maybe_evaluate(const TrainConfig& config, const TaskSet& tasks, TrainerState& st, int epoch) {
  const bool last = epoch + 1 == config.epochs;
  const bool periodic = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
  if (!last && !periodic) return;
  const NeuralPolicy policy(st.params);
  auto summary = evaluate(policy, tasks, config.eval_episodes, config.eval_temperature,
                          derive_seed(config.seed, 0xe7a1, static_cast<std::uint64_t>(epoch)), config.max_steps)
                     .summary;
  summary.epoch = epoch;
  summary.step = st.steps;
  st.evals.push_back(summary);
}

void check_loss(double loss, const TrainerState& st) {
  if (!std::isfinite(loss))
    throw NumericError("non-finite loss at optimizer step " + std::to_string(st.steps) + " (policy version " +
                       std::to_string(st.params.version) + ")");
}

}  // namespace

TrainResult train(const TrainConfig& config, const TaskSet& tasks, const PolicyParams& initial, TrainOptions options) {
  config.validate();
  if (config.algorithm == Algorithm::kRejectSft) return reject_sampling_sft(config, tasks, initial, std::move(options));
  if (tasks.empty()) throw ConfigError("training task set is empty");
  for (const auto& t : tasks) validate(t);
  const bool use_replay = config.algorithm == Algorithm::kArpo;
  const RolloutConfig rc = config.rollout_config();
  TrainerState st = resume_state(config, options, initial);

  int epochs_run = 0;
  for (int epoch = st.next_epoch; epoch < config.epochs; ++epoch) {
    const auto batches = epoch_batches(tasks, config.rollout_batch_tasks, st.rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const NeuralPolicy behavior(std::make_shared<const PolicyParams>(st.params));
      auto rollout = run_epoch(batches[b], behavior, rc,
                               derive_seed(config.seed, 0x5011, static_cast<std::uint64_t>(epoch), b));
      auto& groups = rollout.groups;
      st.rollout_vtime += rollout.report.per_epoch_vtime;
      if (config.write_transcripts) append_transcripts(options.run_dir, epoch, groups);

      MetricsRow row;
      row.epoch = epoch;
      row.batch = static_cast<int>(b);
      double n_traj = 0.0;
      for (const auto& g : groups) {
        for (const auto& t : g.trajectories) {
          row.mean_reward += t.reward.total;
          row.mean_success += t.reward.trajectory_reward;
          n_traj += 1.0;
        }
        if (g.all_failed()) row.frac_all_fail += 1.0;
      }
      row.mean_reward /= n_traj;
      row.mean_success /= n_traj;
      row.frac_all_fail /= static_cast<double>(groups.size());
      row.mean_group_std = mean_group_std(groups);

      if (use_replay) {
        for (const auto& g : groups)
          for (const auto& t : g.trajectories)
            if (st.replay.insert(t) && options.audit) options.audit("insert task=" + std::to_string(t.task_id()));
        Rng inject_rng(derive_seed(config.seed, 0x1e9, static_cast<std::uint64_t>(epoch), b));
        for (auto& g : groups)
          if (st.replay.maybe_inject(g, inject_rng)) {
            ++row.injections;
            if (options.audit) options.audit("inject task=" + std::to_string(g.task_id));
          }
      } else {
        for (auto& g : groups) mark_replay_checked(g);
      }
      for (auto& g : groups) compute_group_advantages(g, config.clip.sigma_floor);
      row.mean_group_std_trained = mean_group_std(groups);
      row.injections_total = st.replay.injection_count();
      row.replay_size = st.replay.total_size();

      std::vector<PolicySample> samples;
      for (const auto& g : groups)
        for (int i = 0; i < g.size(); ++i) samples.push_back({&g.trajectories[static_cast<std::size_t>(i)], g.advantages(i)});
      shuffle(samples.begin(), samples.end(), st.rng);

      const std::size_t mb = static_cast<std::size_t>(config.minibatch_size);
      std::vector<Eigen::VectorXd> grads;
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < samples.size(); start += mb) {
        const std::span<const PolicySample> chunk(samples.data() + start, std::min(mb, samples.size() - start));
        auto lg = surrogate_loss_and_gradient(st.params, chunk, config.clip);
        check_loss(lg.loss, st);
        loss_sum += lg.loss;
        grads.push_back(std::move(lg.gradient));
        const bool last_chunk = start + mb >= samples.size();
        if (static_cast<int>(grads.size()) == config.grad_accumulation || last_chunk) {
          const double loss = loss_sum / static_cast<double>(grads.size());
          accumulate_and_step(st.params, grads, config.optimizer, st.moments);
          ++st.steps;
          row.step = st.steps;
          row.policy_version = st.params.version;
          row.loss = loss;
          row.rollout_vtime = st.rollout_vtime;
          st.metrics.push_back(row);
          grads.clear();
          loss_sum = 0.0;
        }
      }
    }
    st.next_epoch = epoch + 1;
    maybe_evaluate(config, tasks, st, epoch);
    persist_run(options.run_dir, st);
    if (options.stop_after_epochs && ++epochs_run >= *options.stop_after_epochs) break;
  }
  TrainResult out{st, st.metrics, st.evals};
  return out;
}

TrainResult reject_sampling_sft(const TrainConfig& config, const TaskSet& tasks, const PolicyParams& initial,
                                TrainOptions options) {
  config.validate();
  if (tasks.empty()) throw ConfigError("training task set is empty");
  for (const auto& t : tasks) validate(t);
  if (options.resume) throw ConfigError("reject_sampling_sft does not support resume");
  const RolloutConfig rc = config.rollout_config();
  TrainerState st = fresh_state(config, initial);

  // Same rollout budget as RL training, all from the fixed initial policy.
  const NeuralPolicy behavior(std::make_shared<const PolicyParams>(initial));
  std::vector<Trajectory> corpus;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = epoch_batches(tasks, config.rollout_batch_tasks, st.rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      auto rollout = run_epoch(batches[b], behavior, rc,
                               derive_seed(config.seed, 0x5011, static_cast<std::uint64_t>(epoch), b));
      st.rollout_vtime += rollout.report.per_epoch_vtime;
      for (auto& g : rollout.groups)
        for (auto& t : g.trajectories)
          if (t.success()) corpus.push_back(std::move(t));
    }
  }
  if (corpus.empty())
    throw ConfigError("reject_sampling_sft: the initial policy produced no successful trajectory to imitate");

  std::vector<const Trajectory*> order;
  for (const auto& t : corpus) order.push_back(&t);
  std::size_t cursor = order.size();
  auto next_minibatch = [&] {
    std::vector<const Trajectory*> mb;
    while (static_cast<int>(mb.size()) < config.minibatch_size) {
      if (cursor == order.size()) {
        shuffle(order.begin(), order.end(), st.rng);
        cursor = 0;
      }
      mb.push_back(order[cursor++]);
    }
    return mb;
  };

  const std::size_t per_step = static_cast<std::size_t>(config.minibatch_size) * config.grad_accumulation;
  const std::size_t total_steps = (corpus.size() * config.sft_passes + per_step - 1) / per_step;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Optimizer steps are spread evenly over the epochs so evaluation cadence matches RL.
    const std::size_t e = static_cast<std::size_t>(epoch), n_epochs = static_cast<std::size_t>(config.epochs);
    const std::size_t steps_this_epoch = (e + 1) * total_steps / n_epochs - e * total_steps / n_epochs;
    for (std::size_t u = 0; u < steps_this_epoch; ++u) {
      std::vector<Eigen::VectorXd> grads;
      double loss = 0.0;
      for (int a = 0; a < config.grad_accumulation; ++a) {
        const auto mb = next_minibatch();
        auto lg = nll_loss_and_gradient(st.params, mb);
        check_loss(lg.loss, st);
        loss += lg.loss;
        grads.push_back(std::move(lg.gradient));
      }
      accumulate_and_step(st.params, grads, config.optimizer, st.moments);
      ++st.steps;
      MetricsRow row;
      row.step = st.steps;
      row.epoch = epoch;
      row.policy_version = st.params.version;
      row.loss = loss / config.grad_accumulation;
      row.replay_size = corpus.size();
      row.rollout_vtime = st.rollout_vtime;
      st.metrics.push_back(row);
    }
    st.next_epoch = epoch + 1;
    maybe_evaluate(config, tasks, st, epoch);
    persist_run(options.run_dir, st);
  }
  TrainResult out{st, st.metrics, st.evals};
  return out;
}

// ---------------------------------------------------------------------------
// Metrics files

const std::vector<std::string> kTrainMetricsColumns = {
    "step",          "epoch",          "batch",        "policy_version",   "mean_reward",
    "mean_success",  "mean_group_std", "mean_group_std_trained", "frac_all_fail", "injections",
    "injections_total", "replay_size", "loss",         "rollout_vtime"};
const std::vector<std::string> kEvalMetricsColumns = {"epoch",        "step",    "in_domain_standard",
                                                      "in_domain_hard", "ood_standard", "ood_hard",
                                                      "all_standard", "all_hard"};
const std::vector<std::string> kThroughputColumns = {
    "n_envs",         "n_batches",      "per_batch_vtime", "per_epoch_vtime", "inference_calls",
    "mean_occupancy", "max_occupancy",  "inference_vtime", "env_step_vtime",  "env_steps"};

namespace {

// Shortest text that round-trips; NaN as an empty cell.
std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string header(const std::vector<std::string>& cols) {
  std::string s;
  for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + cols[i];
  return s + "\n";
}

std::string join(std::initializer_list<std::string> cells) {
  std::string s;
  bool first = true;
  for (const auto& c : cells) {
    if (!first) s += ',';
    s += c;
    first = false;
  }
  return s + "\n";
}

json num_json(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double json_num(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string s = header(kTrainMetricsColumns);
  for (const auto& m : rows)
    s += join({std::to_string(m.step), std::to_string(m.epoch), std::to_string(m.batch),
               std::to_string(m.policy_version), num(m.mean_reward), num(m.mean_success), num(m.mean_group_std),
               num(m.mean_group_std_trained), num(m.frac_all_fail), std::to_string(m.injections),
               std::to_string(m.injections_total), std::to_string(m.replay_size), num(m.loss),
               num(m.rollout_vtime)});
  return s;
}

std::string eval_csv(const std::vector<EvalSummary>& rows) {
  std::string s = header(kEvalMetricsColumns);
  for (const auto& e : rows)
    s += join({std::to_string(e.epoch), std::to_string(e.step), num(e.in_domain_standard), num(e.in_domain_hard),
               num(e.ood_standard), num(e.ood_hard), num(e.all_standard), num(e.all_hard)});
  return s;
}

std::string throughput_csv(const std::vector<ThroughputReport>& rows) {
  std::string s = header(kThroughputColumns);
  for (const auto& r : rows)
    s += join({std::to_string(r.n_envs), std::to_string(r.batch_times.size()), num(r.per_batch_vtime),
               num(r.per_epoch_vtime), std::to_string(r.inference_calls), num(r.mean_occupancy),
               std::to_string(r.max_occupancy), num(r.inference_vtime), num(r.env_step_vtime),
               std::to_string(r.env_steps)});
  return s;
}

json metrics_to_json(const MetricsRow& m) {
  return {{"step", m.step},
          {"epoch", m.epoch},
          {"batch", m.batch},
          {"policy_version", m.policy_version},
          {"mean_reward", m.mean_reward},
          {"mean_success", m.mean_success},
          {"mean_group_std", m.mean_group_std},
          {"mean_group_std_trained", m.mean_group_std_trained},
          {"frac_all_fail", m.frac_all_fail},
          {"injections", m.injections},
          {"injections_total", m.injections_total},
          {"replay_size", m.replay_size},
          {"loss", m.loss},
          {"rollout_vtime", m.rollout_vtime}};
}

json eval_to_json(const EvalSummary& e) {
  return {{"epoch", e.epoch},
          {"step", e.step},
          {"in_domain_standard", num_json(e.in_domain_standard)},
          {"in_domain_hard", num_json(e.in_domain_hard)},
          {"ood_standard", num_json(e.ood_standard)},
          {"ood_hard", num_json(e.ood_hard)},
          {"all_standard", num_json(e.all_standard)},
          {"all_hard", num_json(e.all_hard)}};
}

json throughput_to_json(const ThroughputReport& r) {
  return {{"n_envs", r.n_envs},
          {"batch_times", r.batch_times},
          {"per_batch_vtime", r.per_batch_vtime},
          {"per_epoch_vtime", r.per_epoch_vtime},
          {"inference_calls", r.inference_calls},
          {"mean_occupancy", r.mean_occupancy},
          {"max_occupancy", r.max_occupancy},
          {"inference_vtime", r.inference_vtime},
          {"env_step_vtime", r.env_step_vtime},
          {"env_steps", r.env_steps}};
}

namespace {

std::vector<json> read_records(const std::string& path) {
  std::vector<json> out;
  std::ifstream in(path);
  if (!in) return out;  // a run that has not produced this record kind yet
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

void export_metrics(const std::string& run_dir) {
  if (!fs::is_directory(run_dir)) throw IoError("run directory '" + run_dir + "' does not exist");
  std::vector<MetricsRow> metrics;
  std::vector<EvalSummary> evals;
  std::vector<ThroughputReport> throughput;
  const auto where = [&](const char* file) { return run_dir + "/" + file; };
  try {
    for (const auto& j : read_records(where("metrics.jsonl"))) {
      MetricsRow m;
      m.step = j.at("step");
      m.epoch = j.at("epoch");
      m.batch = j.at("batch");
      m.policy_version = j.at("policy_version");
      m.mean_reward = j.at("mean_reward");
      m.mean_success = j.at("mean_success");
      m.mean_group_std = j.at("mean_group_std");
      m.mean_group_std_trained = j.at("mean_group_std_trained");
      m.frac_all_fail = j.at("frac_all_fail");
      m.injections = j.at("injections");
      m.injections_total = j.at("injections_total");
      m.replay_size = j.at("replay_size");
      m.loss = j.at("loss");
      m.rollout_vtime = j.at("rollout_vtime");
      metrics.push_back(m);
    }
    for (const auto& j : read_records(where("eval.jsonl"))) {
      EvalSummary e;
      e.epoch = j.at("epoch");
      e.step = j.at("step");
      e.in_domain_standard = json_num(j.at("in_domain_standard"));
      e.in_domain_hard = json_num(j.at("in_domain_hard"));
      e.ood_standard = json_num(j.at("ood_standard"));
      e.ood_hard = json_num(j.at("ood_hard"));
      e.all_standard = json_num(j.at("all_standard"));
      e.all_hard = json_num(j.at("all_hard"));
      evals.push_back(e);
    }
    for (const auto& j : read_records(where("throughput.jsonl"))) {
      ThroughputReport r;
      r.n_envs = j.at("n_envs");
      r.batch_times = j.at("batch_times").get<std::vector<double>>();
      r.per_batch_vtime = j.at("per_batch_vtime");
      r.per_epoch_vtime = j.at("per_epoch_vtime");
      r.inference_calls = j.at("inference_calls");
      r.mean_occupancy = j.at("mean_occupancy");
      r.max_occupancy = j.at("max_occupancy");
      r.inference_vtime = j.at("inference_vtime");
      r.env_step_vtime = j.at("env_step_vtime");
      r.env_steps = j.at("env_steps");
      throughput.push_back(r);
    }
  } catch (const json::exception& e) {
    throw IoError("run directory '" + run_dir + "': malformed record: " + e.what());
  }
  write_text(where("train_metrics.csv"), metrics_csv(metrics));
  write_text(where("eval_metrics.csv"), eval_csv(evals));
  write_text(where("throughput.csv"), throughput_csv(throughput));
}

}  // namespace arpo
