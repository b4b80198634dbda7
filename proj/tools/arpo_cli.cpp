// Command-line front end: task generation, selection, training, evaluation,
// rollout benchmarking and metrics export.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 I/O error,
// 4 numeric error, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "arpo/environment.hpp"
#include "arpo/rollout.hpp"
#include "arpo/task_selection.hpp"
#include "arpo/trainer.hpp"

namespace {

using namespace arpo;
using nlohmann::json;

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file");
  cmd->add_option("--set", o.overrides, "Override a config key: dotted.key=value (repeatable)");
}

TrainConfig make_config(const CommonOptions& o) { return load_config(o.config_path, o.overrides); }

// ARPO_RUN_DIR wins over the flag.
std::string resolve_run_dir(const std::string& flag) {
  if (const char* env = std::getenv("ARPO_RUN_DIR"); env && *env) return env;
  return flag;
}

PolicyParams policy_from(const std::string& checkpoint, const TrainConfig& cfg) {
  if (!checkpoint.empty()) return load_policy(checkpoint);
  return make_baseline_policy(cfg.baseline);
}

void print_summary(const EvalSummary& s) {
  auto pct = [](double v) { return std::isnan(v) ? std::string("n/a") : std::to_string(100.0 * v).substr(0, 5) + "%"; };
  std::cout << "              standard   hard\n"
            << "  in-domain   " << pct(s.in_domain_standard) << "     " << pct(s.in_domain_hard) << "\n"
            << "  ood         " << pct(s.ood_standard) << "     " << pct(s.ood_hard) << "\n"
            << "  all         " << pct(s.all_standard) << "     " << pct(s.all_hard) << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"ARPO toy-scale trainer for multi-turn agents"};
  app.require_subcommand(1);

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "Generate a task suite (one JSON task per line)");
  std::uint64_t gen_seed = 0;
  int n_feasible = 32, n_infeasible = 0, min_len = 3, max_len = 6, max_steps = kDefaultMaxSteps;
  double in_domain = 0.25;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "Suite seed");
  gen->add_option("--feasible", n_feasible, "Number of feasible tasks");
  gen->add_option("--infeasible", n_infeasible, "Number of infeasible tasks");
  gen->add_option("--min-len", min_len, "Shortest goal");
  gen->add_option("--max-len", max_len, "Longest goal");
  gen->add_option("--in-domain-fraction", in_domain, "Fraction tagged in-domain");
  gen->add_option("--max-steps", max_steps, "Step cap per episode");
  gen->add_option("-o,--out", gen_out, "Output file")->required();

  // select-tasks
  auto* sel = app.add_subcommand("select-tasks", "Keep tasks the baseline solves at least once in the probe budget");
  CommonOptions sel_common;
  add_config_options(sel, sel_common);
  std::string sel_tasks, sel_out, sel_report, sel_policy;
  sel->add_option("--tasks", sel_tasks, "Input task file")->required();
  sel->add_option("-o,--out", sel_out, "Selected task file")->required();
  sel->add_option("--report", sel_report, "Per-task probe report (JSON lines)");
  sel->add_option("--policy", sel_policy, "Checkpoint to probe with (default: baseline from config)");

  // train
  auto* tr = app.add_subcommand("train", "Run GRPO, ARPO or reject-sampling SFT");
  CommonOptions tr_common;
  add_config_options(tr, tr_common);
  std::string tr_tasks, tr_run_dir, tr_init;
  bool tr_resume = false;
  tr->add_option("--tasks", tr_tasks, "Training task file")->required();
  tr->add_option("--run-dir", tr_run_dir, "Run directory (env ARPO_RUN_DIR overrides)");
  tr->add_option("--init", tr_init, "Start from this checkpoint's policy instead of the baseline");
  tr->add_flag("--resume", tr_resume, "Continue from <run-dir>/checkpoint.bin");

  // eval
  auto* ev = app.add_subcommand("eval", "Success rates under the standard and hard protocols");
  CommonOptions ev_common;
  add_config_options(ev, ev_common);
  std::string ev_tasks, ev_policy, ev_out;
  std::optional<int> ev_episodes;
  std::optional<std::uint64_t> ev_seed;
  ev->add_option("--tasks", ev_tasks, "Task file")->required();
  ev->add_option("--policy", ev_policy, "Checkpoint (default: baseline from config)");
  ev->add_option("--episodes", ev_episodes, "Episodes per task (default: eval_episodes)");
  ev->add_option("--seed", ev_seed, "Evaluation seed (default: config seed)");
  ev->add_option("-o,--out", ev_out, "Per-task results (JSON lines)");

  // bench-rollout
  auto* bench = app.add_subcommand("bench-rollout", "Virtual-clock rollout throughput for several n_envs");
  CommonOptions bench_common;
  add_config_options(bench, bench_common);
  std::string bench_tasks, bench_run_dir;
  std::vector<int> bench_envs{8, 16, 32, 64, 128, 256};
  bench->add_option("--tasks", bench_tasks, "Task file (default: 32 generated tasks)");
  bench->add_option("--n-envs", bench_envs, "Worker counts to compare");
  bench->add_option("--run-dir", bench_run_dir, "Write throughput.jsonl here (env ARPO_RUN_DIR overrides)");

  // export-metrics
  auto* ex = app.add_subcommand("export-metrics", "Write train/eval/throughput CSVs from a run directory");
  std::string ex_run_dir;
  ex->add_option("--run-dir", ex_run_dir, "Run directory (env ARPO_RUN_DIR overrides)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  if (*gen) {
    const auto tasks = generate_task_suite(gen_seed, n_feasible, n_infeasible, {min_len, max_len}, in_domain, max_steps);
    write_task_set(gen_out, tasks);
    std::cout << "wrote " << tasks.size() << " tasks to " << gen_out << "\n";
  } else if (*sel) {
    const auto cfg = make_config(sel_common);
    const auto tasks = read_task_set(sel_tasks);
    const NeuralPolicy policy(policy_from(sel_policy, cfg));
    const auto result = select_tasks(tasks, policy, cfg.selection_rollouts, cfg.selection_keep_threshold,
                                     cfg.rollout_temperature, cfg.seed);
    write_task_set(sel_out, result.selected);
    if (!sel_report.empty()) write_probe_reports(sel_report, result.reports);
    std::cout << "kept " << result.selected.size() << " of " << tasks.size() << " tasks\n";
    if (result.selected.empty()) std::cerr << "warning: no task was solved by the probe policy\n";
  } else if (*tr) {
    const auto cfg = make_config(tr_common);
    const auto tasks = read_task_set(tr_tasks);
    TrainOptions opts;
    opts.run_dir = resolve_run_dir(tr_run_dir);
    if (opts.run_dir.empty()) throw ConfigError("train needs --run-dir or ARPO_RUN_DIR");
    if (tr_resume) opts.resume = load_checkpoint(opts.run_dir + "/checkpoint.bin");
    std::filesystem::create_directories(opts.run_dir);
    {
      std::ofstream out(opts.run_dir + "/config.json");
      if (!out) throw IoError("cannot write " + opts.run_dir + "/config.json");
      out << config_to_json(cfg).dump(2) << "\n";
    }
    const auto initial = policy_from(tr_init, cfg);
    const auto result = train(cfg, tasks, initial, std::move(opts));
    if (!result.metrics.empty()) {
      const auto& last = result.metrics.back();
      std::cout << to_string(cfg.algorithm) << ": " << result.metrics.size() << " optimizer steps, final-batch success "
                << last.mean_success << "\n";
    }
    if (!result.evals.empty()) print_summary(result.evals.back());
  } else if (*ev) {
    const auto cfg = make_config(ev_common);
    const auto tasks = read_task_set(ev_tasks);
    const NeuralPolicy policy(policy_from(ev_policy, cfg));
    const auto result = evaluate(policy, tasks, ev_episodes.value_or(cfg.eval_episodes), cfg.eval_temperature,
                                 ev_seed.value_or(cfg.seed), cfg.max_steps);
    print_summary(result.summary);
    if (!ev_out.empty()) {
      std::ofstream out(ev_out);
      if (!out) throw IoError("cannot open '" + ev_out + "' for writing");
      for (const auto& t : result.per_task)
        out << json{{"task_id", t.task_id},
                    {"domain", t.domain == Domain::kInDomain ? "in" : "ood"},
                    {"standard", t.standard},
                    {"hard", t.hard}}
                   .dump()
            << "\n";
    }
  } else if (*bench) {
    auto cfg = make_config(bench_common);
    const auto tasks = bench_tasks.empty() ? generate_task_suite(cfg.seed, 32, 0, {3, 6}) : read_task_set(bench_tasks);
    const NeuralPolicy policy(make_baseline_policy(cfg.baseline));
    std::vector<ThroughputReport> reports;
    for (int n : bench_envs) {
      cfg.n_envs = n;
      auto rollout = run_epoch(tasks, policy, cfg.rollout_config(), cfg.seed);
      reports.push_back(std::move(rollout.report));
    }
    std::cout << throughput_csv(reports);
    const std::string dir = resolve_run_dir(bench_run_dir);
    if (!dir.empty()) {
      std::filesystem::create_directories(dir);
      std::ofstream out(dir + "/throughput.jsonl");
      if (!out) throw IoError("cannot write " + dir + "/throughput.jsonl");
      for (const auto& r : reports) out << throughput_to_json(r).dump() << "\n";
    }
  } else if (*ex) {
    const std::string dir = resolve_run_dir(ex_run_dir);
    if (dir.empty()) throw ConfigError("export-metrics needs --run-dir or ARPO_RUN_DIR");
    export_metrics(dir);
    std::cout << "wrote train_metrics.csv, eval_metrics.csv, throughput.csv in " << dir << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const arpo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const arpo::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const arpo::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const arpo::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
