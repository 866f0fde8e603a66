#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "pgts/rng.hpp"
#include "pgts/tree.hpp"

using namespace pgts;

namespace {

std::vector<double> feat(int dim, double fill = 0.0) {
  return std::vector<double>(static_cast<size_t>(dim), fill);
}

StepProposal proposal(int dim, double reward, bool is_final = false, const std::string& content = "s") {
  StepProposal p;
  p.content = content;
  p.features = feat(dim);
  p.step_reward = reward;
  p.is_final = is_final;
  return p;
}

ReasoningTreeState fresh_tree(int d = 4, int b = 2, int f = 3) {
  return ReasoningTreeState(TreeLimits{d, b, f}, "prompt", feat(f));
}

// Independent validity oracle: attempt each action's defining mutation on a
// clone instead of evaluating the constraint rules.
std::vector<uint8_t> enumerate_valid_actions(const ReasoningTreeState& tree) {
  const int D = tree.limits().depth_limit;
  const int F = tree.limits().feature_dim;
  std::vector<uint8_t> bits(static_cast<size_t>(D) + 2, 0);
  const NodeId cur = tree.current();
  const auto& cur_node = tree.node(cur);

  auto try_child = [&](NodeId parent) {
    ReasoningTreeState clone = tree;
    try {
      clone.add_child(parent, proposal(F, 0.5));
      return true;
    } catch (const TreeError&) {
      return false;
    }
  };

  if (try_child(cur)) bits[ConstraintVector::kExpand] = 1;
  if (cur_node.parent && try_child(*cur_node.parent)) bits[ConstraintVector::kBranch] = 1;
  for (int k = 1; k <= D - 1; ++k) {
    const int land_depth = cur_node.depth - k;
    if (land_depth < 1) continue;
    NodeId anc = cur;
    while (tree.node(anc).depth > land_depth - 1) anc = *tree.node(anc).parent;
    if (try_child(anc)) bits[static_cast<size_t>(ConstraintVector::backtrack_slot(k))] = 1;
  }
  if (cur_node.is_final || cur_node.depth == D)
    bits[static_cast<size_t>(ConstraintVector::terminate_slot(D))] = 1;
  return bits;
}

// Random well-formed tree grown through legal insertions; leaves may be
// final below the depth limit the way LLM-mode steps can be.
ReasoningTreeState random_tree(Rng& rng, int D, int B, int F) {
  ReasoningTreeState tree(TreeLimits{D, B, F}, "prompt", feat(F));
  const int inserts = rng.uniform_int(2 * D * B + 1);
  for (int i = 0; i < inserts; ++i) {
    std::vector<NodeId> eligible;
    for (NodeId v = 0; v < tree.size(); ++v) {
      const auto& n = tree.node(v);
      if (!n.is_final && n.depth < D && static_cast<int>(n.children.size()) < B)
        eligible.push_back(v);
    }
    if (eligible.empty()) break;
    const NodeId parent = eligible[static_cast<size_t>(rng.uniform_int(static_cast<int>(eligible.size())))];
    const int child_depth = tree.node(parent).depth + 1;
    const bool is_final = child_depth == D || rng.uniform() < 0.15;
    tree.add_child(parent, proposal(F, rng.uniform(), is_final));
  }
  tree.set_current(rng.uniform_int(tree.size()));
  return tree;
}

}  // namespace

TEST_CASE("add_child first insertion") {
  auto tree = fresh_tree(4, 2, 3);
  auto p = proposal(3, 0.8);
  NodeId id = tree.add_child(0, p);
  CHECK(id == 1);
  CHECK(tree.node(id).depth == 1);
  CHECK(tree.node(id).edge_reward == doctest::Approx(0.8));
  CHECK(tree.node(0).children.size() == 1);
  tree.validate();
}

TEST_CASE("add_child rejects over-breadth, over-depth and final parents") {
  auto tree = fresh_tree(4, 2, 3);
  tree.add_child(0, proposal(3, 0.1));
  tree.add_child(0, proposal(3, 0.2));
  CHECK_THROWS_AS(tree.add_child(0, proposal(3, 0.3)), TreeError);
  try {
    tree.add_child(0, proposal(3, 0.3));
  } catch (const TreeError& e) {
    CHECK(e.kind() == TreeErrorKind::breadth_exceeded);
  }

  // Depth: chain to the limit, then one more.
  auto deep = fresh_tree(2, 2, 3);
  NodeId a = deep.add_child(0, proposal(3, 0.1));
  NodeId b = deep.add_child(a, proposal(3, 0.1));
  try {
    deep.add_child(b, proposal(3, 0.1));
    CHECK(false);
  } catch (const TreeError& e) {
    CHECK(e.kind() == TreeErrorKind::depth_exceeded);
  }

  auto fin = fresh_tree(4, 2, 3);
  NodeId f = fin.add_child(0, proposal(3, 0.9, true));
  try {
    fin.add_child(f, proposal(3, 0.1));
    CHECK(false);
  } catch (const TreeError& e) {
    CHECK(e.kind() == TreeErrorKind::expand_after_final);
  }

  // A rejected mutation leaves the tree unchanged.
  CHECK(fin.size() == 2);
  CHECK(fin.node(f).children.empty());
  fin.validate();
}

TEST_CASE("path queries") {
  auto tree = fresh_tree(4, 2, 3);
  NodeId a = tree.add_child(0, proposal(3, 0.4));
  NodeId b = tree.add_child(a, proposal(3, 0.3));

  CHECK(tree.path_to_root(0) == std::vector<NodeId>{0});
  CHECK(tree.path_to_root(b) == std::vector<NodeId>{0, a, b});

  NodeId c = tree.add_child(b, proposal(3, 0.2));
  CHECK(tree.path_to_root(c).size() == static_cast<size_t>(tree.node(c).depth) + 1);

  CHECK(tree.path_edge_reward_sum(0) == doctest::Approx(0.0));
  CHECK(tree.path_edge_reward_sum(b) == doctest::Approx(0.7));

  auto single = fresh_tree(4, 2, 3);
  NodeId s = single.add_child(0, proposal(3, 0.9));
  CHECK(single.path_edge_reward_sum(s) == doctest::Approx(0.9));

  CHECK_THROWS_AS(tree.path_to_root(99), TreeError);
  CHECK_THROWS_AS(tree.path_edge_reward_sum(-1), TreeError);
}

TEST_CASE("constraints at the fresh root") {
  auto tree = fresh_tree(4, 2, 3);
  auto c = tree.compute_constraints();
  CHECK(c.bits == std::vector<uint8_t>{1, 0, 0, 0, 0, 0});
}

TEST_CASE("constraints at depth 3 with a full root") {
  // D=4, B=2; current at depth 3; parent (depth 2) has 1 child; ancestor at
  // depth 1 has 1 child; root has 2 children.
  auto tree = fresh_tree(4, 2, 3);
  NodeId d1 = tree.add_child(0, proposal(3, 0.5));
  tree.add_child(0, proposal(3, 0.5));  // root now full
  NodeId d2 = tree.add_child(d1, proposal(3, 0.5));
  NodeId d3 = tree.add_child(d2, proposal(3, 0.5));
  tree.set_current(d3);
  auto c = tree.compute_constraints();
  CHECK(c.bits == std::vector<uint8_t>{1, 1, 1, 0, 0, 0});
  CHECK(c.bits == enumerate_valid_actions(tree));
}

TEST_CASE("constraints at a final node at depth 2") {
  // D=4, B=2; current depth 2 final; parent has 1 child; root has 1 child.
  auto tree = fresh_tree(4, 2, 3);
  NodeId d1 = tree.add_child(0, proposal(3, 0.5));
  NodeId d2 = tree.add_child(d1, proposal(3, 0.5, true));
  tree.set_current(d2);
  auto c = tree.compute_constraints();
  CHECK(c.bits == std::vector<uint8_t>{0, 1, 1, 0, 0, 1});
  CHECK(c.bits == enumerate_valid_actions(tree));
}

TEST_CASE("constraint oracle equivalence on random trees") {
  Rng rng(20240601);
  for (int trial = 0; trial < 1000; ++trial) {
    const int D = 2 + rng.uniform_int(5);  // 2..6
    const int B = 1 + rng.uniform_int(4);  // 1..4
    auto tree = random_tree(rng, D, B, 2);
    auto expected = enumerate_valid_actions(tree);
    auto got = tree.compute_constraints();
    REQUIRE(got.bits == expected);
    // Reachable states sit at childless nodes and always keep an option open.
    if (tree.node(tree.current()).children.empty()) CHECK(got.num_valid() >= 1);
  }
}

TEST_CASE("every state reachable within six actions has a valid action") {
  // Exhaustive breadth-first enumeration over action sequences (D=4, B=2).
  struct State {
    ReasoningTreeState tree;
  };
  std::vector<State> frontier{State{fresh_tree(4, 2, 1)}};
  int visited = 0;
  for (int ply = 0; ply < 10 && !frontier.empty(); ++ply) {
    std::vector<State> next;
    for (const auto& st : frontier) {
      auto c = st.tree.compute_constraints();
      ++visited;
      REQUIRE(c.num_valid() >= 1);
      const int D = st.tree.limits().depth_limit;
      for (int slot = 0; slot < c.size(); ++slot) {
        if (!c.valid(slot)) continue;
        if (slot == ConstraintVector::terminate_slot(D)) continue;  // episode over
        State ns = st;
        const NodeId cur = ns.tree.current();
        const int depth = ns.tree.node(cur).depth;
        NodeId parent;
        if (slot == ConstraintVector::kExpand) {
          parent = cur;
        } else if (slot == ConstraintVector::kBranch) {
          parent = *ns.tree.node(cur).parent;
        } else {
          const int k = slot - 1;
          parent = ns.tree.ancestor_at_depth(cur, depth - k - 1);
        }
        const bool is_final = ns.tree.node(parent).depth + 1 == D;
        ns.tree.set_current(ns.tree.add_child(parent, proposal(1, 0.5, is_final)));
        ns.tree.validate();
        next.push_back(std::move(ns));
      }
    }
    frontier = std::move(next);
  }
  CHECK(visited > 500);
}

TEST_CASE("rwse matches hand-computed values") {
  // Path a-b-c.
  auto tree = fresh_tree(4, 2, 1);
  NodeId b = tree.add_child(0, proposal(1, 0.5));
  tree.add_child(b, proposal(1, 0.5));
  auto enc = rwse(tree, 2);
  CHECK(enc[b][0] == doctest::Approx(0.0));
  CHECK(enc[b][1] == doctest::Approx(1.0));
  CHECK(enc[0][0] == doctest::Approx(0.0));
  CHECK(enc[0][1] == doctest::Approx(0.5));

  // Star: center with 3 leaves, two hops return with certainty.
  auto star = fresh_tree(4, 3, 1);
  star.add_child(0, proposal(1, 0.5));
  star.add_child(0, proposal(1, 0.5));
  star.add_child(0, proposal(1, 0.5));
  auto senc = rwse(star, 2);
  CHECK(senc[0][1] == doctest::Approx(1.0));

  // Single node: all zero.
  auto one = fresh_tree(4, 2, 1);
  auto oenc = rwse(one, 3);
  CHECK(oenc[0] == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("rwse agrees with a dense matrix-power oracle") {
  Rng rng(777);
  for (int trial = 0; trial < 40; ++trial) {
    auto tree = random_tree(rng, 6, 4, 1);
    const int n = tree.size();
    const int k_max = 1 + rng.uniform_int(8);

    // Dense oracle: naive matrix powers of M = Deg^-1 Adj.
    std::vector<double> M(static_cast<size_t>(n) * n, 0.0);
    if (n > 1) {
      std::vector<int> deg(static_cast<size_t>(n), 0);
      for (NodeId v = 0; v < n; ++v)
        if (tree.node(v).parent) {
          ++deg[static_cast<size_t>(v)];
          ++deg[static_cast<size_t>(*tree.node(v).parent)];
        }
      for (NodeId v = 0; v < n; ++v)
        if (tree.node(v).parent) {
          const NodeId p = *tree.node(v).parent;
          M[static_cast<size_t>(v) * n + p] = 1.0 / deg[static_cast<size_t>(v)];
          M[static_cast<size_t>(p) * n + v] = 1.0 / deg[static_cast<size_t>(p)];
        }
    }
    std::vector<double> P = M;
    auto enc = rwse(tree, k_max);
    for (int j = 1; j <= k_max; ++j) {
      if (j > 1) {
        std::vector<double> next(static_cast<size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i)
          for (int l = 0; l < n; ++l) {
            const double x = P[static_cast<size_t>(i) * n + l];
            if (x == 0.0) continue;
            for (int m = 0; m < n; ++m)
              next[static_cast<size_t>(i) * n + m] += x * M[static_cast<size_t>(l) * n + m];
          }
        P = std::move(next);
      }
      for (int v = 0; v < n; ++v)
        REQUIRE(enc[static_cast<size_t>(v)][static_cast<size_t>(j - 1)] ==
                doctest::Approx(P[static_cast<size_t>(v) * n + v]).epsilon(1e-12));
    }
    // First hop never returns: no self-loops.
    for (int v = 0; v < n; ++v) CHECK(enc[static_cast<size_t>(v)][0] == 0.0);
  }
}

TEST_CASE("well-formedness holds under random mutation sequences") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    auto tree = random_tree(rng, 5, 3, 2);
    tree.validate();
  }
}

TEST_CASE("tree serialization round-trips") {
  Rng rng(5);
  auto tree = random_tree(rng, 4, 2, 3);
  const auto dir = std::filesystem::temp_directory_path() / "pgts_tree_io";
  std::filesystem::create_directories(dir);
  const std::string nodes = (dir / "nodes.jsonl").string();
  const std::string feats = (dir / "feats.bin").string();
  save_tree_nodes(tree, nodes);
  save_tree_features(tree, feats);
  auto loaded = load_tree(nodes, feats, tree.limits());
  REQUIRE(loaded.size() == tree.size());
  for (NodeId v = 0; v < tree.size(); ++v) {
    const auto& a = tree.node(v);
    const auto& b = loaded.node(v);
    CHECK(a.parent == b.parent);
    CHECK(a.depth == b.depth);
    CHECK(a.content == b.content);
    CHECK(a.is_final == b.is_final);
    CHECK(a.edge_reward == doctest::Approx(b.edge_reward));
    for (size_t i = 0; i < a.features.size(); ++i)
      CHECK(b.features[i] == doctest::Approx(static_cast<float>(a.features[i])));
  }
  loaded.validate();
}
