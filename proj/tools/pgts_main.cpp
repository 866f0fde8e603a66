#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pgts/cli.hpp"

namespace {

pgts::RunConfig load_config(const std::string& config_path, std::optional<std::uint64_t> seed,
                            std::optional<int> jobs, std::optional<std::string> out_dir) {
  pgts::RunConfig config =
      config_path.empty() ? pgts::RunConfig{} : pgts::run_config_from_json_file(config_path);
  if (seed) config.seed = *seed;
  if (jobs) config.jobs = *jobs;
  if (out_dir) config.out_dir = *out_dir;
  config.finalize();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pgts: policy-guided tree search over reasoning trees"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out_dir;
  std::optional<std::string> checkpoint;
  std::vector<std::string> methods;
  std::string task_id;
  std::string method;

  app.add_option("--config", config_path, "JSON run config; flags override file values");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--jobs", jobs, "parallel workers for evaluation sweeps");
  app.add_option("--out", out_dir, "output directory");

  auto* train_cmd = app.add_subcommand("train", "train the PGTS policy");
  train_cmd->add_option("--checkpoint", checkpoint, "resume from this checkpoint");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate one method on the task suite");
  eval_cmd->add_option("--method", method, "greedy|pgts|pgts-sc|mcts-best|mcts-agg|mcts-oracle")
      ->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint (pgts methods)");

  auto* compare_cmd = app.add_subcommand("compare", "compare methods with cost ratios");
  compare_cmd->add_option("--method", methods, "method name (repeatable)")->required();
  compare_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint (pgts methods)");

  auto* rollout_cmd = app.add_subcommand("rollout", "print one policy trajectory");
  rollout_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();
  rollout_cmd->add_option("--task", task_id, "task id, e.g. eval-0003")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    pgts::RunConfig config = load_config(config_path, seed, jobs, out_dir);
    if (train_cmd->parsed()) return pgts::cli::cmd_train(config, checkpoint);
    if (eval_cmd->parsed()) return pgts::cli::cmd_eval(config, method, checkpoint);
    if (compare_cmd->parsed()) return pgts::cli::cmd_compare(config, methods, checkpoint);
    if (rollout_cmd->parsed()) return pgts::cli::cmd_rollout(config, *checkpoint, task_id);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
