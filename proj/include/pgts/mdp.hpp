#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pgts/stepgen.hpp"
#include "pgts/tree.hpp"

namespace pgts {

/// The D+2-way meta-action. Index encoding matches ConstraintVector slots.
struct SearchAction {
  enum class Kind { expand, branch, backtrack, terminate };
  Kind kind = Kind::expand;
  int k = 0;  // backtrack steps, 1..D-1; 0 otherwise

  static SearchAction expand() { return {Kind::expand, 0}; }
  static SearchAction branch() { return {Kind::branch, 0}; }
  static SearchAction backtrack(int k) { return {Kind::backtrack, k}; }
  static SearchAction terminate() { return {Kind::terminate, 0}; }

  static SearchAction from_index(int index, int depth_limit);
  int to_index(int depth_limit) const;
  std::string name() const;

  bool operator==(const SearchAction&) const = default;
};

struct CostConfig {
  double expand_cost = 0.1;
  double branch_cost = 0.2;
  double backtrack_cost = 0.5;
  double terminate_cost = 0.0;

  double cost(const SearchAction& a) const;
};

enum class TerminalRewardMode {
  ground_truth,   // training: 1.0 on exact answer match, else 0.0
  path_mean,      // evaluation: mean incoming-edge reward on the final path
};

struct EpisodeConfig {
  CostConfig cost;
  int max_steps = 32;          // T_max
  double discount = 0.99;      // gamma
  TerminalRewardMode terminal_mode = TerminalRewardMode::ground_truth;
  std::string answer_marker = "The answer is";
};

struct StepOutcome {
  double reward = 0.0;
  bool done = false;
  std::optional<NodeId> new_node;
  double cost = 0.0;  // total cost charged for this step (incl. forced terminate)
};

/// The TS-MDP environment. Owns one tree per episode; deterministic given
/// (task seed, action sequence) with a deterministic generator.
class TreeSearchEnv {
 public:
  TreeSearchEnv(TaskInstance task, StepGenerator& gen, EpisodeConfig config, TreeLimits limits);

  /// Rebuilds the root-only tree and clears counters.
  void reset();

  /// Applies a valid action. Throws std::invalid_argument on an action whose
  /// constraint bit is 0 and std::logic_error when the episode is done; the
  /// tree is untouched on every failure path.
  StepOutcome step(const SearchAction& action);

  const ReasoningTreeState& tree() const { return *tree_; }
  const TaskInstance& task() const { return task_; }
  bool done() const { return done_; }
  int steps_taken() const { return steps_; }
  double total_cost() const { return total_cost_; }
  double terminal_quality() const { return terminal_quality_; }

  /// Extracted answer at the current node, if any.
  std::optional<std::string> current_answer() const;

 private:
  double terminal_reward_value() const;

  TaskInstance task_;
  StepGenerator* gen_;
  EpisodeConfig config_;
  TreeLimits limits_;
  std::optional<ReasoningTreeState> tree_;
  int steps_ = 0;
  bool done_ = false;
  double total_cost_ = 0.0;
  double terminal_quality_ = 0.0;
};

/// Terminal quality R(s_d) per the configured mode.
double terminal_reward(const ReasoningTreeState& tree, const TaskInstance& task,
                       TerminalRewardMode mode, const std::string& answer_marker = "The answer is");

/// Discounted return over an episode's outcomes, t starting at 0.
double episode_return(const std::vector<StepOutcome>& outcomes, double discount);

/// Trajectory log sink: one JSON object per step, episodes separated by a
/// header record {task_id, seed, config}.
class TrajectoryLog {
 public:
  explicit TrajectoryLog(const std::string& path);
  ~TrajectoryLog();
  void begin_episode(const TaskInstance& task, const EpisodeConfig& config);
  void record(int step, const SearchAction& action, int action_index, const StepOutcome& outcome,
              NodeId current_node);

 private:
  struct Impl;
  Impl* impl_;
};

}  // namespace pgts
