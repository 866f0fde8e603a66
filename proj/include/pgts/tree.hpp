#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pgts/task.hpp"

namespace pgts {

/// Dense index into the tree's node table. Root is always 0; ids are
/// assigned in creation order and never reused.
using NodeId = int;

struct TreeLimits {
  int depth_limit = 4;    // D
  int breadth_limit = 2;  // B
  int feature_dim = 32;   // F
};

enum class TreeErrorKind {
  unknown_node,
  breadth_exceeded,
  depth_exceeded,
  expand_after_final,
  bad_features,
};

class TreeError : public std::runtime_error {
 public:
  TreeError(TreeErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  TreeErrorKind kind() const { return kind_; }

 private:
  TreeErrorKind kind_;
};

struct ReasoningNode {
  NodeId id = 0;
  std::optional<NodeId> parent;
  int depth = 0;
  std::string content;
  std::vector<double> features;
  double edge_reward = 0.0;  // R(s,a) of the incoming edge; meaningless for root
  bool is_final = false;
  std::vector<NodeId> children;
};

/// Validity mask over the D+2 meta-actions. Slot layout:
/// 0 = Expand, 1 = Branch, 1+k = Backtrack(k) for k in 1..D-1, D+1 = Terminate.
struct ConstraintVector {
  std::vector<std::uint8_t> bits;

  static constexpr int kExpand = 0;
  static constexpr int kBranch = 1;
  static int backtrack_slot(int k) { return 1 + k; }
  static int terminate_slot(int depth_limit) { return depth_limit + 1; }

  int size() const { return static_cast<int>(bits.size()); }
  bool valid(int slot) const { return bits[static_cast<size_t>(slot)] != 0; }
  int num_valid() const {
    int n = 0;
    for (auto b : bits) n += b;
    return n;
  }
};

/// The revealed portion of the reasoning tree plus the current position.
/// Single writer; all const queries are safe against an unchanging snapshot.
class ReasoningTreeState {
 public:
  ReasoningTreeState(TreeLimits limits, std::string root_content, std::vector<double> root_features);

  const ReasoningNode& node(NodeId id) const;
  NodeId current() const { return current_; }
  void set_current(NodeId id);
  int size() const { return static_cast<int>(nodes_.size()); }
  const TreeLimits& limits() const { return limits_; }

  /// Appends a child of `parent` built from `proposal`. Throws TreeError
  /// (breadth_exceeded / depth_exceeded / expand_after_final) without
  /// mutating anything on contract violation.
  NodeId add_child(NodeId parent, const StepProposal& proposal);

  /// Root-first path ending at `id`; length == depth(id) + 1.
  std::vector<NodeId> path_to_root(NodeId id) const;

  /// Sum of edge_reward over the edges from root to `id` (0 for root).
  double path_edge_reward_sum(NodeId id) const;

  /// Ancestor of `id` at the given depth (depth <= depth(id)).
  NodeId ancestor_at_depth(NodeId id, int depth) const;

  /// The D+2 validity mask at the current node.
  ConstraintVector compute_constraints() const;

  /// Full well-formedness check (parent/child symmetry, depth arithmetic,
  /// limits, feature shape). Throws on the first violation.
  void validate() const;

  /// Contents along the path root..id, in order. Convenience for step
  /// generators, which key on the path.
  std::vector<std::string> path_contents(NodeId id) const;

 private:
  void check_node(NodeId id) const;

  TreeLimits limits_;
  std::vector<ReasoningNode> nodes_;
  NodeId current_ = 0;
};

/// Random-walk structural encodings: entry j-1 of node v's vector is
/// (M^j)_vv for j = 1..k_max, with M = Deg^-1 Adj of the undirected tree.
/// A single-node tree yields all-zero vectors.
std::vector<std::vector<double>> rwse(const ReasoningTreeState& tree, int k_max);

/// Serialization. Nodes go to line-delimited JSON, one object per line with
/// fields {id, parent, depth, content, edge_reward, is_final}. Feature
/// vectors go to a separate binary file: one JSON header line
/// {"num_nodes": N, "F": F} followed by little-endian 32-bit floats,
/// row-major.
void save_tree_nodes(const ReasoningTreeState& tree, const std::string& path);
void save_tree_features(const ReasoningTreeState& tree, const std::string& path);
ReasoningTreeState load_tree(const std::string& nodes_path, const std::string& features_path,
                             const TreeLimits& limits);

}  // namespace pgts
