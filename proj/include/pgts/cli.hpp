#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pgts/run_config.hpp"

namespace pgts::cli {

/// Per-task evaluation record; the CSV row format shared by eval/compare.
struct EvalRow {
  std::string method;
  std::string task_id;
  bool correct = false;
  double traj_reward = 0.0;
  long proposals = 0;
  long tokens = 0;
  double wall_ms = 0.0;
};

struct MethodSummary {
  std::string method;
  double success_rate = 0.0;
  double mean_traj_reward = 0.0;
  double mean_proposals = 0.0;
  double mean_tokens = 0.0;
  double mean_wall_ms = 0.0;
};

/// Known method names: greedy, pgts, pgts-sc, mcts-best, mcts-agg,
/// mcts-oracle.
bool is_known_method(const std::string& method);

/// Runs one method over the task list (--jobs parallel, deterministic
/// per-task streams) and returns rows in task order.
std::vector<EvalRow> evaluate_method(const std::string& method, const RunConfig& config,
                                     const std::vector<TaskInstance>& tasks,
                                     const std::optional<PolicyParams>& params);

MethodSummary summarize(const std::string& method, const std::vector<EvalRow>& rows);

int cmd_train(const RunConfig& config, const std::optional<std::string>& resume_checkpoint);
int cmd_eval(const RunConfig& config, const std::string& method,
             const std::optional<std::string>& checkpoint);
int cmd_compare(const RunConfig& config, std::vector<std::string> methods,
                const std::optional<std::string>& checkpoint);
int cmd_rollout(const RunConfig& config, const std::string& checkpoint, const std::string& task_id);

}  // namespace pgts::cli
