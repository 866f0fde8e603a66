#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pgts/mdp.hpp"
#include "pgts/policy.hpp"
#include "pgts/stepgen.hpp"
#include "pgts/tree.hpp"

namespace pgts {

struct MCTSConfig {
  int iterations = 32;
  double uct_c = std::sqrt(2.0);
  int breadth = 4;
  bool oracle = false;

  void check() const;
};

/// One completed reasoning chain, comparable across methods.
struct ChainResult {
  std::string answer;
  double traj_reward = 0.0;  // mean incoming-edge reward along the chain
  std::vector<std::string> steps;
  GenerationCost generation_cost;
};

struct MCTSNodeStats {
  int visits = 0;
  double value_sum = 0.0;
  int endpoint_count = 0;  // times this node was the simulation endpoint

  double q() const { return visits > 0 ? value_sum / visits : 0.0; }
};

struct MCTSResult {
  std::vector<ChainResult> chains;  // one per completed simulation
  std::vector<MCTSNodeStats> stats;
  std::vector<double> backup_log;   // value backed up per simulation, in order
  std::vector<NodeId> endpoint_log; // endpoint node per simulation
  std::optional<ReasoningTreeState> tree;  // final search tree
};

/// UCT value for a child given its mean value, parent visits and own visits.
double uct_score(double q, int parent_visits, int child_visits, double c);

/// Standard UCT search over the generator's reasoning tree: selection by
/// UCT with unvisited children first (leftmost tie-break), one-child
/// expansion, greedy rollout to a final node, mean-path-edge-reward
/// backpropagation (+1 on ground-truth match in oracle mode).
MCTSResult mcts_search(const TaskInstance& task, StepGenerator& gen, const MCTSConfig& config,
                       const TreeLimits& limits, Rng& rng);

/// Single chain of sampled proposals (child slot 0) until final or depth D.
ChainResult greedy_chain(const TaskInstance& task, StepGenerator& gen, const TreeLimits& limits,
                         Rng& rng);

enum class AggregateMode { majority, weighted, best };

/// Vote over final answers. Ties resolve to the earliest-generated chain's
/// answer. Throws on an empty list.
std::string aggregate(std::span<const ChainResult> chains, AggregateMode mode);

struct SelfConsistencyResult {
  std::string answer;
  std::vector<ChainResult> chains;
};

/// n_chains independent policy episodes on distinct rng streams, aggregated
/// with reward-weighted voting.
SelfConsistencyResult pgts_self_consistency(const PolicyParams& params, const TaskInstance& task,
                                            StepGenerator& gen, const EpisodeConfig& episode_config,
                                            const TreeLimits& limits, int n_chains, Rng& rng);

}  // namespace pgts
