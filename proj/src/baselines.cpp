#include "pgts/baselines.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <stdexcept>

#include "pgts/trainer.hpp"

namespace pgts {

void MCTSConfig::check() const {
  if (iterations < 1) throw std::invalid_argument("mcts iterations must be >= 1");
  if (uct_c < 0.0) throw std::invalid_argument("uct_c must be >= 0");
  if (breadth < 1) throw std::invalid_argument("mcts breadth must be >= 1");
}

double uct_score(double q, int parent_visits, int child_visits, double c) {
  if (child_visits == 0) return std::numeric_limits<double>::infinity();
  return q + c * std::sqrt(std::log(static_cast<double>(parent_visits)) /
                           static_cast<double>(child_visits));
}

namespace {

bool is_terminal_node(const ReasoningTreeState& tree, NodeId v) {
  const auto& n = tree.node(v);
  return n.is_final || n.depth >= tree.limits().depth_limit;
}

double mean_path_edge_reward(const ReasoningTreeState& tree, NodeId v) {
  const int depth = tree.node(v).depth;
  return depth > 0 ? tree.path_edge_reward_sum(v) / depth : 0.0;
}

ChainResult chain_from_leaf(const ReasoningTreeState& tree, NodeId leaf,
                            const GenerationCost& cost) {
  ChainResult c;
  c.traj_reward = mean_path_edge_reward(tree, leaf);
  c.answer = detect_final(tree.node(leaf).content).value_or("");
  for (NodeId v : tree.path_to_root(leaf))
    if (tree.node(v).parent) c.steps.push_back(tree.node(v).content);
  c.generation_cost = cost;
  return c;
}

}  // namespace

MCTSResult mcts_search(const TaskInstance& task, StepGenerator& gen, const MCTSConfig& config,
                       const TreeLimits& limits, Rng& rng) {
  (void)rng;  // synthetic proposals are deterministic; the generator owns any sampling
  config.check();
  TreeLimits tl = limits;
  tl.breadth_limit = config.breadth;

  ReasoningTreeState tree(tl, task.prompt, gen.root_features(task));
  MCTSResult result;
  result.stats.resize(1);

  auto grow_stats = [&result](const ReasoningTreeState& t) {
    result.stats.resize(static_cast<std::size_t>(t.size()));
  };

  auto propose_child = [&](NodeId parent) {
    const auto path = tree.path_contents(parent);
    const int slot = static_cast<int>(tree.node(parent).children.size());
    StepProposal p = gen.propose_step(task, path, slot);
    NodeId child = tree.add_child(parent, p);
    grow_stats(tree);
    return child;
  };

  for (int iter = 0; iter < config.iterations; ++iter) {
    const GenerationCost before = gen.cost();

    // Selection: descend through fully-expanded nodes; unvisited children
    // (attached by earlier rollouts) come first, leftmost first.
    NodeId cur = 0;
    while (!is_terminal_node(tree, cur)) {
      const auto& children = tree.node(cur).children;
      if (static_cast<int>(children.size()) < tl.breadth_limit) break;  // expand here
      NodeId next = -1;
      for (NodeId ch : children) {
        if (result.stats[static_cast<std::size_t>(ch)].visits == 0) {
          next = ch;
          break;
        }
      }
      if (next < 0) {
        double best = -std::numeric_limits<double>::infinity();
        const int parent_visits = std::max(1, result.stats[static_cast<std::size_t>(cur)].visits);
        for (NodeId ch : children) {
          const auto& st = result.stats[static_cast<std::size_t>(ch)];
          const double score = uct_score(st.q(), parent_visits, st.visits, config.uct_c);
          if (score > best) {
            best = score;
            next = ch;
          }
        }
      }
      cur = next;
    }

    // Expansion: one new child unless the selected node is terminal.
    NodeId endpoint = cur;
    if (!is_terminal_node(tree, cur)) endpoint = propose_child(cur);

    // Rollout: greedy single-proposal chain down to a final node.
    NodeId leaf = endpoint;
    while (!is_terminal_node(tree, leaf)) leaf = propose_child(leaf);

    double value = mean_path_edge_reward(tree, leaf);
    ChainResult chain = chain_from_leaf(tree, leaf, {});
    if (config.oracle && task.ground_truth && chain.answer == *task.ground_truth) value += 1.0;

    // Backpropagation along the endpoint's path (rollout nodes keep 0 visits).
    for (NodeId v : tree.path_to_root(endpoint)) {
      auto& st = result.stats[static_cast<std::size_t>(v)];
      st.visits += 1;
      st.value_sum += value;
    }
    result.stats[static_cast<std::size_t>(endpoint)].endpoint_count += 1;
    result.backup_log.push_back(value);
    result.endpoint_log.push_back(endpoint);

    const GenerationCost after = gen.cost();
    chain.generation_cost = {after.proposals - before.proposals, after.tokens - before.tokens};
    result.chains.push_back(std::move(chain));
  }

  tree.validate();
  result.tree = std::move(tree);
  return result;
}

ChainResult greedy_chain(const TaskInstance& task, StepGenerator& gen, const TreeLimits& limits,
                         Rng& rng) {
  (void)rng;
  const GenerationCost before = gen.cost();
  ReasoningTreeState tree(limits, task.prompt, gen.root_features(task));
  NodeId cur = 0;
  while (!is_terminal_node(tree, cur)) {
    StepProposal p = gen.propose_step(task, tree.path_contents(cur), 0);
    cur = tree.add_child(cur, p);
  }
  const GenerationCost after = gen.cost();
  return chain_from_leaf(tree, cur,
                         {after.proposals - before.proposals, after.tokens - before.tokens});
}

std::string aggregate(std::span<const ChainResult> chains, AggregateMode mode) {
  if (chains.empty()) throw std::invalid_argument("aggregate over an empty chain list");

  if (mode == AggregateMode::best) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < chains.size(); ++i)
      if (chains[i].traj_reward > chains[best].traj_reward) best = i;
    return chains[best].answer;
  }

  struct Tally {
    double weight = 0.0;
    std::size_t first_index = 0;
  };
  std::map<std::string, Tally> votes;
  for (std::size_t i = 0; i < chains.size(); ++i) {
    const double w = mode == AggregateMode::majority ? 1.0 : chains[i].traj_reward;
    auto it = votes.try_emplace(chains[i].answer, Tally{0.0, i}).first;
    it->second.weight += w;
  }
  const Tally* best = nullptr;
  const std::string* best_answer = nullptr;
  for (const auto& [answer, tally] : votes) {
    if (!best || tally.weight > best->weight ||
        (tally.weight == best->weight && tally.first_index < best->first_index)) {
      best = &tally;
      best_answer = &answer;
    }
  }
  return *best_answer;
}

SelfConsistencyResult pgts_self_consistency(const PolicyParams& params, const TaskInstance& task,
                                            StepGenerator& gen, const EpisodeConfig& episode_config,
                                            const TreeLimits& limits, int n_chains, Rng& rng) {
  if (n_chains < 1) throw std::invalid_argument("n_chains must be >= 1");
  SelfConsistencyResult result;
  for (int i = 0; i < n_chains; ++i) {
    const GenerationCost before = gen.cost();
    Rng chain_rng = rng.fork(static_cast<std::uint64_t>(i) + 1);
    EvalEpisode ep = run_policy_episode(params, task, gen, episode_config, limits, chain_rng);
    const GenerationCost after = gen.cost();
    ChainResult c;
    c.answer = ep.answer;
    c.traj_reward = ep.traj_reward;
    for (std::size_t s = 1; s < ep.chain_contents.size(); ++s) c.steps.push_back(ep.chain_contents[s]);
    c.generation_cost = {after.proposals - before.proposals, after.tokens - before.tokens};
    result.chains.push_back(std::move(c));
  }
  result.answer = aggregate(result.chains, AggregateMode::weighted);
  return result;
}

}  // namespace pgts
