#include "pgts/tree.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace pgts {

namespace {

void check_features(const std::vector<double>& f, int feature_dim) {
  if (static_cast<int>(f.size()) != feature_dim)
    throw TreeError(TreeErrorKind::bad_features,
                    "feature vector has " + std::to_string(f.size()) + " entries, expected " +
                        std::to_string(feature_dim));
  for (double x : f)
    if (!std::isfinite(x)) throw TreeError(TreeErrorKind::bad_features, "non-finite feature entry");
}

}  // namespace

ReasoningTreeState::ReasoningTreeState(TreeLimits limits, std::string root_content,
                                       std::vector<double> root_features)
    : limits_(limits) {
  if (limits_.depth_limit < 1 || limits_.breadth_limit < 1)
    throw std::invalid_argument("tree limits must be >= 1");
  check_features(root_features, limits_.feature_dim);
  ReasoningNode root;
  root.id = 0;
  root.depth = 0;
  root.content = std::move(root_content);
  root.features = std::move(root_features);
  nodes_.push_back(std::move(root));
}

void ReasoningTreeState::check_node(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
    throw TreeError(TreeErrorKind::unknown_node, "unknown node id " + std::to_string(id));
}

const ReasoningNode& ReasoningTreeState::node(NodeId id) const {
  check_node(id);
  return nodes_[static_cast<size_t>(id)];
}

void ReasoningTreeState::set_current(NodeId id) {
  check_node(id);
  current_ = id;
}

NodeId ReasoningTreeState::add_child(NodeId parent, const StepProposal& proposal) {
  check_node(parent);
  const ReasoningNode& p = nodes_[static_cast<size_t>(parent)];
  if (p.is_final)
    throw TreeError(TreeErrorKind::expand_after_final,
                    "node " + std::to_string(parent) + " already holds a final answer");
  if (static_cast<int>(p.children.size()) >= limits_.breadth_limit)
    throw TreeError(TreeErrorKind::breadth_exceeded,
                    "node " + std::to_string(parent) + " is at the breadth limit");
  if (p.depth >= limits_.depth_limit)
    throw TreeError(TreeErrorKind::depth_exceeded,
                    "node " + std::to_string(parent) + " is at the depth limit");
  check_features(proposal.features, limits_.feature_dim);

  ReasoningNode n;
  n.id = static_cast<NodeId>(nodes_.size());
  n.parent = parent;
  n.depth = p.depth + 1;
  n.content = proposal.content;
  n.features = proposal.features;
  n.edge_reward = proposal.step_reward;
  n.is_final = proposal.is_final;
  nodes_.push_back(std::move(n));
  nodes_[static_cast<size_t>(parent)].children.push_back(nodes_.back().id);
  return nodes_.back().id;
}

std::vector<NodeId> ReasoningTreeState::path_to_root(NodeId id) const {
  check_node(id);
  std::vector<NodeId> path;
  for (NodeId cur = id;;) {
    path.push_back(cur);
    const auto& n = nodes_[static_cast<size_t>(cur)];
    if (!n.parent) break;
    cur = *n.parent;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

double ReasoningTreeState::path_edge_reward_sum(NodeId id) const {
  check_node(id);
  double sum = 0.0;
  for (NodeId cur = id; nodes_[static_cast<size_t>(cur)].parent;) {
    sum += nodes_[static_cast<size_t>(cur)].edge_reward;
    cur = *nodes_[static_cast<size_t>(cur)].parent;
  }
  return sum;
}

NodeId ReasoningTreeState::ancestor_at_depth(NodeId id, int depth) const {
  check_node(id);
  NodeId cur = id;
  while (nodes_[static_cast<size_t>(cur)].depth > depth) {
    const auto& n = nodes_[static_cast<size_t>(cur)];
    if (!n.parent) break;
    cur = *n.parent;
  }
  if (nodes_[static_cast<size_t>(cur)].depth != depth)
    throw TreeError(TreeErrorKind::unknown_node,
                    "no ancestor of node " + std::to_string(id) + " at depth " + std::to_string(depth));
  return cur;
}

ConstraintVector ReasoningTreeState::compute_constraints() const {
  const int d_limit = limits_.depth_limit;
  const int b_limit = limits_.breadth_limit;
  const ReasoningNode& cur = nodes_[static_cast<size_t>(current_)];
  const int d = cur.depth;

  ConstraintVector c;
  c.bits.assign(static_cast<size_t>(d_limit) + 2, 0);

  // Expand: below the depth limit and no final answer at the current node.
  // Reachable states always sit at a childless node (every action lands on a
  // fresh node), so the breadth guard only matters for arbitrary snapshots.
  if (d < d_limit && !cur.is_final && static_cast<int>(cur.children.size()) < b_limit)
    c.bits[ConstraintVector::kExpand] = 1;

  // Branch: a fresh sibling of the current node; needs a parent with room.
  if (cur.parent) {
    const auto& p = nodes_[static_cast<size_t>(*cur.parent)];
    if (static_cast<int>(p.children.size()) < b_limit) c.bits[ConstraintVector::kBranch] = 1;
  }

  // Backtrack(k): lands on a fresh sibling of the ancestor at depth d-k,
  // so the ancestor at depth d-k-1 must have room. k <= d-1 keeps the
  // landing depth >= 1 (the root has no siblings).
  for (int k = 1; k <= d_limit - 1; ++k) {
    if (k > d - 1) continue;
    NodeId anc_parent = ancestor_at_depth(current_, d - k - 1);
    const auto& ap = nodes_[static_cast<size_t>(anc_parent)];
    if (static_cast<int>(ap.children.size()) < b_limit)
      c.bits[static_cast<size_t>(ConstraintVector::backtrack_slot(k))] = 1;
  }

  // Terminate: a final answer is present or the depth limit is reached.
  if (cur.is_final || d == d_limit) c.bits[static_cast<size_t>(ConstraintVector::terminate_slot(d_limit))] = 1;

  return c;
}

void ReasoningTreeState::validate() const {
  if (nodes_.empty()) throw std::logic_error("tree has no root");
  if (nodes_[0].parent || nodes_[0].depth != 0) throw std::logic_error("malformed root");
  check_node(current_);
  size_t edge_count = 0;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.id != static_cast<NodeId>(i)) throw std::logic_error("node id mismatch");
    if (n.parent) {
      ++edge_count;
      const auto& p = node(*n.parent);
      if (n.depth != p.depth + 1) throw std::logic_error("depth arithmetic violated");
      if (std::count(p.children.begin(), p.children.end(), n.id) != 1)
        throw std::logic_error("parent does not list child exactly once");
      if (*n.parent >= n.id) throw std::logic_error("child created before parent");
    } else if (i != 0) {
      throw std::logic_error("non-root node without parent");
    }
    if (n.depth > limits_.depth_limit) throw std::logic_error("depth limit violated");
    if (static_cast<int>(n.children.size()) > limits_.breadth_limit)
      throw std::logic_error("breadth limit violated");
    if (static_cast<int>(n.features.size()) != limits_.feature_dim)
      throw std::logic_error("feature dimension violated");
    for (double x : n.features)
      if (!std::isfinite(x)) throw std::logic_error("non-finite feature");
    for (NodeId ch : n.children)
      if (node(ch).parent != std::optional<NodeId>(n.id)) throw std::logic_error("child does not point back");
  }
  if (edge_count != nodes_.size() - 1) throw std::logic_error("edge count != nodes - 1");
}

std::vector<std::string> ReasoningTreeState::path_contents(NodeId id) const {
  std::vector<std::string> out;
  for (NodeId nid : path_to_root(id)) out.push_back(node(nid).content);
  return out;
}

std::vector<std::vector<double>> rwse(const ReasoningTreeState& tree, int k_max) {
  if (k_max < 1) throw std::invalid_argument("k_max must be >= 1");
  const int n = tree.size();
  std::vector<std::vector<double>> enc(static_cast<size_t>(n),
                                       std::vector<double>(static_cast<size_t>(k_max), 0.0));
  if (n == 1) return enc;

  // Sparse random-walk matrix of the undirected tree: row v holds 1/deg(v)
  // at each neighbour. Powers accumulate into a dense n x n table.
  std::vector<std::vector<int>> nbr(static_cast<size_t>(n));
  for (NodeId v = 0; v < n; ++v) {
    const auto& nd = tree.node(v);
    if (nd.parent) {
      nbr[static_cast<size_t>(v)].push_back(*nd.parent);
      nbr[static_cast<size_t>(*nd.parent)].push_back(v);
    }
  }

  std::vector<double> power(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
  for (int v = 0; v < n; ++v) power[static_cast<size_t>(v) * n + v] = 1.0;
  std::vector<double> next(power.size(), 0.0);

  for (int j = 1; j <= k_max; ++j) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int v = 0; v < n; ++v) {
      const double inv_deg = 1.0 / static_cast<double>(nbr[static_cast<size_t>(v)].size());
      for (int u : nbr[static_cast<size_t>(v)]) {
        const double* src = &power[static_cast<size_t>(u) * n];
        double* dst = &next[static_cast<size_t>(v) * n];
        for (int w = 0; w < n; ++w) dst[w] += inv_deg * src[w];
      }
    }
    power.swap(next);
    for (int v = 0; v < n; ++v)
      enc[static_cast<size_t>(v)][static_cast<size_t>(j - 1)] = power[static_cast<size_t>(v) * n + v];
  }
  return enc;
}

void save_tree_nodes(const ReasoningTreeState& tree, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (NodeId v = 0; v < tree.size(); ++v) {
    const auto& n = tree.node(v);
    nlohmann::json j;
    j["id"] = n.id;
    if (n.parent)
      j["parent"] = *n.parent;
    else
      j["parent"] = nullptr;
    j["depth"] = n.depth;
    j["content"] = n.content;
    j["edge_reward"] = n.edge_reward;
    j["is_final"] = n.is_final;
    out << j.dump() << "\n";
  }
}

void save_tree_features(const ReasoningTreeState& tree, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  nlohmann::json header;
  header["num_nodes"] = tree.size();
  header["F"] = tree.limits().feature_dim;
  out << header.dump() << "\n";
  for (NodeId v = 0; v < tree.size(); ++v) {
    const auto& f = tree.node(v).features;
    for (double x : f) {
      float xf = static_cast<float>(x);
      char buf[4];
      std::memcpy(buf, &xf, 4);
      out.write(buf, 4);
    }
  }
}

ReasoningTreeState load_tree(const std::string& nodes_path, const std::string& features_path,
                             const TreeLimits& limits) {
  std::ifstream fin(features_path, std::ios::binary);
  if (!fin) throw std::runtime_error("cannot open " + features_path);
  std::string header_line;
  std::getline(fin, header_line);
  auto header = nlohmann::json::parse(header_line);
  const int num_nodes = header.at("num_nodes").get<int>();
  const int feat_dim = header.at("F").get<int>();
  if (feat_dim != limits.feature_dim) throw std::runtime_error("feature dimension mismatch");
  std::vector<std::vector<double>> feats(static_cast<size_t>(num_nodes),
                                         std::vector<double>(static_cast<size_t>(feat_dim)));
  for (auto& row : feats)
    for (auto& x : row) {
      char buf[4];
      fin.read(buf, 4);
      if (!fin) throw std::runtime_error("truncated feature payload");
      float xf;
      std::memcpy(&xf, buf, 4);
      x = static_cast<double>(xf);
    }

  std::ifstream nin(nodes_path);
  if (!nin) throw std::runtime_error("cannot open " + nodes_path);
  std::string line;
  std::optional<ReasoningTreeState> tree;
  int row = 0;
  while (std::getline(nin, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const int id = j.at("id").get<int>();
    if (id != row) throw std::runtime_error("node ids out of order in " + nodes_path);
    if (row >= num_nodes) throw std::runtime_error("more nodes than the feature header declares");
    if (row == 0) {
      tree.emplace(limits, j.at("content").get<std::string>(), feats[0]);
    } else {
      StepProposal p;
      p.content = j.at("content").get<std::string>();
      p.features = feats[static_cast<size_t>(row)];
      p.step_reward = j.at("edge_reward").get<double>();
      p.is_final = j.at("is_final").get<bool>();
      NodeId got = tree->add_child(j.at("parent").get<int>(), p);
      if (got != id) throw std::runtime_error("node id mismatch while loading");
    }
    ++row;
  }
  if (!tree || row != num_nodes) throw std::runtime_error("node count mismatch while loading");
  return std::move(*tree);
}

}  // namespace pgts
