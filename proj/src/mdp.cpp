#include "pgts/mdp.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace pgts {

SearchAction SearchAction::from_index(int index, int depth_limit) {
  if (index == ConstraintVector::kExpand) return expand();
  if (index == ConstraintVector::kBranch) return branch();
  if (index == ConstraintVector::terminate_slot(depth_limit)) return terminate();
  if (index >= 2 && index <= depth_limit) return backtrack(index - 1);
  throw std::invalid_argument("action index " + std::to_string(index) + " out of range");
}

int SearchAction::to_index(int depth_limit) const {
  switch (kind) {
    case Kind::expand:
      return ConstraintVector::kExpand;
    case Kind::branch:
      return ConstraintVector::kBranch;
    case Kind::backtrack:
      if (k < 1 || k > depth_limit - 1) throw std::invalid_argument("backtrack k out of range");
      return ConstraintVector::backtrack_slot(k);
    case Kind::terminate:
      return ConstraintVector::terminate_slot(depth_limit);
  }
  throw std::logic_error("unreachable");
}

std::string SearchAction::name() const {
  switch (kind) {
    case Kind::expand:
      return "expand";
    case Kind::branch:
      return "branch";
    case Kind::backtrack:
      return "backtrack(" + std::to_string(k) + ")";
    case Kind::terminate:
      return "terminate";
  }
  return "?";
}

double CostConfig::cost(const SearchAction& a) const {
  switch (a.kind) {
    case SearchAction::Kind::expand:
      return expand_cost;
    case SearchAction::Kind::branch:
      return branch_cost;
    case SearchAction::Kind::backtrack:
      return backtrack_cost;
    case SearchAction::Kind::terminate:
      return terminate_cost;
  }
  return 0.0;
}

TreeSearchEnv::TreeSearchEnv(TaskInstance task, StepGenerator& gen, EpisodeConfig config,
                             TreeLimits limits)
    : task_(std::move(task)), gen_(&gen), config_(config), limits_(limits) {
  if (config_.max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (!(config_.discount > 0.0 && config_.discount <= 1.0))
    throw std::invalid_argument("discount must be in (0, 1]");
  reset();
}

void TreeSearchEnv::reset() {
  tree_.emplace(limits_, task_.prompt, gen_->root_features(task_));
  steps_ = 0;
  done_ = false;
  total_cost_ = 0.0;
  terminal_quality_ = 0.0;
}

std::optional<std::string> TreeSearchEnv::current_answer() const {
  return detect_final(tree_->node(tree_->current()).content, config_.answer_marker);
}

double TreeSearchEnv::terminal_reward_value() const {
  return terminal_reward(*tree_, task_, config_.terminal_mode, config_.answer_marker);
}

StepOutcome TreeSearchEnv::step(const SearchAction& action) {
  if (done_) throw std::logic_error("step() after episode end");
  const ConstraintVector constraints = tree_->compute_constraints();
  const int index = action.to_index(limits_.depth_limit);
  if (!constraints.valid(index))
    throw std::invalid_argument("invalid action " + action.name() + " in current state");

  const NodeId cur = tree_->current();
  const ReasoningNode& cur_node = tree_->node(cur);
  const int d = cur_node.depth;

  StepOutcome out;
  out.cost = config_.cost.cost(action);

  switch (action.kind) {
    case SearchAction::Kind::expand: {
      const auto path = tree_->path_contents(cur);
      const int slot = static_cast<int>(cur_node.children.size());
      StepProposal p = gen_->propose_step(task_, path, slot);
      NodeId child = tree_->add_child(cur, p);
      tree_->set_current(child);
      out.new_node = child;
      out.reward = p.step_reward - out.cost;
      break;
    }
    case SearchAction::Kind::branch: {
      const NodeId parent = *cur_node.parent;
      const auto path = tree_->path_contents(parent);
      const int slot = static_cast<int>(tree_->node(parent).children.size());
      StepProposal p = gen_->propose_step(task_, path, slot);
      NodeId sibling = tree_->add_child(parent, p);
      tree_->set_current(sibling);
      out.new_node = sibling;
      out.reward = p.step_reward - cur_node.edge_reward - out.cost;
      break;
    }
    case SearchAction::Kind::backtrack: {
      // Land on a fresh sibling of the ancestor at depth d-k. The whole
      // abandoned segment leaves the path, so its k+1 edge rewards
      // (entering depths d-k..d) are revoked along with the backtrack cost.
      const int land_depth = d - action.k;
      const NodeId land_parent = tree_->ancestor_at_depth(cur, land_depth - 1);
      double revoked = 0.0;
      for (NodeId v = cur; tree_->node(v).depth >= land_depth;) {
        revoked += tree_->node(v).edge_reward;
        v = *tree_->node(v).parent;
      }
      const auto path = tree_->path_contents(land_parent);
      const int slot = static_cast<int>(tree_->node(land_parent).children.size());
      StepProposal p = gen_->propose_step(task_, path, slot);
      NodeId sibling = tree_->add_child(land_parent, p);
      tree_->set_current(sibling);
      out.new_node = sibling;
      out.reward = p.step_reward - revoked - out.cost;
      break;
    }
    case SearchAction::Kind::terminate: {
      terminal_quality_ = terminal_reward_value();
      out.reward = terminal_quality_ - out.cost;
      out.done = true;
      done_ = true;
      break;
    }
  }

  ++steps_;
  if (!done_ && steps_ >= config_.max_steps) {
    // Exploration budget exhausted: forced terminate with the terminal
    // reward folded into this outcome.
    terminal_quality_ = terminal_reward_value();
    out.reward += terminal_quality_ - config_.cost.terminate_cost;
    out.cost += config_.cost.terminate_cost;
    out.done = true;
    done_ = true;
  }
  total_cost_ += out.cost;
  return out;
}

double terminal_reward(const ReasoningTreeState& tree, const TaskInstance& task,
                       TerminalRewardMode mode, const std::string& answer_marker) {
  const NodeId cur = tree.current();
  switch (mode) {
    case TerminalRewardMode::ground_truth: {
      if (!task.ground_truth) throw std::invalid_argument("ground truth required in training mode");
      auto answer = detect_final(tree.node(cur).content, answer_marker);
      return (answer && *answer == *task.ground_truth) ? 1.0 : 0.0;
    }
    case TerminalRewardMode::path_mean: {
      const int depth = tree.node(cur).depth;
      if (depth == 0) return 0.0;
      return tree.path_edge_reward_sum(cur) / static_cast<double>(depth);
    }
  }
  return 0.0;
}

double episode_return(const std::vector<StepOutcome>& outcomes, double discount) {
  if (outcomes.empty()) throw std::invalid_argument("episode_return of empty episode");
  double g = 0.0;
  double w = 1.0;
  for (const auto& o : outcomes) {
    g += w * o.reward;
    w *= discount;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Trajectory log
// ---------------------------------------------------------------------------

struct TrajectoryLog::Impl {
  std::ofstream out;
};

TrajectoryLog::TrajectoryLog(const std::string& path) : impl_(new Impl) {
  impl_->out.open(path);
  if (!impl_->out) {
    delete impl_;
    throw std::runtime_error("cannot open trajectory log " + path);
  }
}

TrajectoryLog::~TrajectoryLog() { delete impl_; }

void TrajectoryLog::begin_episode(const TaskInstance& task, const EpisodeConfig& config) {
  nlohmann::json j;
  j["task_id"] = task.task_id;
  j["seed"] = task.seed;
  j["config"] = {{"max_steps", config.max_steps},
                 {"discount", config.discount},
                 {"costs",
                  {{"expand", config.cost.expand_cost},
                   {"branch", config.cost.branch_cost},
                   {"backtrack", config.cost.backtrack_cost},
                   {"terminate", config.cost.terminate_cost}}}};
  impl_->out << j.dump() << "\n";
}

void TrajectoryLog::record(int step, const SearchAction& action, int action_index,
                           const StepOutcome& outcome, NodeId current_node) {
  nlohmann::json j;
  j["step"] = step;
  j["action_index"] = action_index;
  j["action_kind"] = action.name();
  j["reward"] = outcome.reward;
  j["cost"] = outcome.cost;
  j["current_node"] = current_node;
  j["done"] = outcome.done;
  impl_->out << j.dump() << "\n";
}

}  // namespace pgts
