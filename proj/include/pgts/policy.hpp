#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pgts/mdp.hpp"
#include "pgts/rng.hpp"
#include "pgts/tree.hpp"

namespace pgts {

/// Architecture of the shared policy/value network: an input projection of
/// (features || RWSE), L hybrid layers (edge-conditioned local message
/// passing + single-head global self-attention, each followed by a
/// residual + layer norm and a feed-forward block), and two linear heads on
/// the current node's embedding concatenated with the constraint bits.
struct PolicyConfig {
  int feature_dim = 32;  // F
  int k_max = 8;         // RWSE steps appended to node features
  int hidden = 32;       // H
  int layers = 2;        // L
  int depth_limit = 4;   // D; the action head has D+2 outputs

  // Ablation flags. Disabling a term zeroes its contribution.
  bool use_local_mpnn = true;
  bool use_global_attention = true;
  bool use_edge_features = true;

  int num_actions() const { return depth_limit + 2; }
  int input_dim() const { return feature_dim + k_max; }
  int head_input() const { return hidden + num_actions(); }
  void check() const;

  bool operator==(const PolicyConfig&) const = default;
};

/// Offsets of every weight block inside the flat parameter vector, in
/// checkpoint order.
struct ParamLayout {
  struct Section {
    std::string name;
    std::size_t offset;
    int rows;
    int cols;  // 1 for vectors
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  };
  std::vector<Section> sections;
  std::size_t total = 0;

  struct Layer {
    std::size_t w_msg1, b_msg1, w_msg2, b_msg2;
    std::size_t w_q, w_k, w_v;
    std::size_t ln1_g, ln1_b;
    std::size_t w_ff1, b_ff1, w_ff2, b_ff2;
    std::size_t ln2_g, ln2_b;
  };
  std::size_t w_in, b_in;
  std::vector<Layer> layer;
  std::size_t w_act, b_act, w_val, b_val;

  static ParamLayout make(const PolicyConfig& config);
};

/// All weights of the network, stored flat so that optimizer steps,
/// serialization and finite-difference probing are uniform.
class PolicyParams {
 public:
  PolicyParams() = default;

  static PolicyParams zeros(const PolicyConfig& config);
  /// Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)] per weight block; layer
  /// norm gains start at 1, offsets at 0.
  static PolicyParams random_init(const PolicyConfig& config, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<double>& data() { return theta_; }
  const std::vector<double>& data() const { return theta_; }
  std::size_t size() const { return theta_.size(); }

  /// Checkpoint format: one JSON header line (shapes, config, seed, episode
  /// count) followed by the little-endian 64-bit float payload in declared
  /// order. Round-trips byte-exactly.
  struct CheckpointMeta {
    std::uint64_t seed = 0;
    long episodes_seen = 0;
  };
  void save_checkpoint(const std::string& path, const CheckpointMeta& meta) const;
  static std::pair<PolicyParams, CheckpointMeta> load_checkpoint(const std::string& path);

 private:
  PolicyConfig config_;
  ParamLayout layout_;
  std::vector<double> theta_;
};

struct GraphEdge {
  int u = 0;
  int v = 0;
  double reward = 0.0;
};

/// Immutable snapshot of one TS-MDP state as the network consumes it.
struct GraphBatch {
  int num_nodes = 0;
  int input_dim = 0;                 // F + k_max
  std::vector<double> node_inputs;   // num_nodes x input_dim, row-major
  std::vector<GraphEdge> edges;      // undirected; mirrors the tree exactly
  int current_index = 0;
  ConstraintVector constraints;
};

/// Snapshot builder: features || RWSE per node, tree edges with edge
/// rewards, current pointer and constraint vector.
GraphBatch make_graph_batch(const ReasoningTreeState& tree, int k_max);

struct ActionDistribution {
  std::vector<double> probs;      // exactly 0 where the constraint bit is 0
  std::vector<double> log_probs;  // -inf where masked
  double entropy = 0.0;
};

/// Node embeddings after the hybrid layers; num_nodes x hidden, row-major.
std::vector<double> encode(const PolicyParams& params, const GraphBatch& batch);

/// Masked action logits: head(embedding[current] || constraints) with -inf
/// substituted where the constraint bit is 0. Throws when no action is
/// valid (unreachable in well-formed states).
std::vector<double> action_logits(const PolicyParams& params, const std::vector<double>& embeddings,
                                  int current_index, const ConstraintVector& constraints);

/// Softmax over the valid entries of masked logits.
ActionDistribution masked_distribution(const std::vector<double>& masked_logits);

/// Scalar value estimate from the shared representation.
double value(const PolicyParams& params, const std::vector<double>& embeddings, int current_index,
             const ConstraintVector& constraints);

/// One full forward pass (what rollouts need).
struct PolicyEvaluation {
  ActionDistribution dist;
  double value = 0.0;
};
PolicyEvaluation evaluate_policy(const PolicyParams& params, const GraphBatch& batch);

/// Samples an action index from the distribution; the returned action is
/// always valid and log_prob equals dist.log_probs[index].
std::pair<SearchAction, double> sample_action(const ActionDistribution& dist, Rng& rng);

/// Scalar loss specification: a weighted sum of the clipped PPO surrogate,
/// the value regression error and the (negated) entropy bonus.
struct LossSpec {
  double policy_weight = 0.0;
  int action_index = -1;
  double log_prob_old = 0.0;
  double advantage = 0.0;
  double clip = 0.2;

  double value_weight = 0.0;
  double value_target = 0.0;

  double entropy_weight = 0.0;  // contributes entropy_weight * (-entropy)
};

double loss_eval(const PolicyParams& params, const GraphBatch& batch, const LossSpec& spec);

struct GradResult {
  double loss = 0.0;
  std::vector<double> grad;  // same flat shape as PolicyParams::data()

  // Unweighted per-term diagnostics of the same forward pass.
  double policy_term = 0.0;  // -min(rho*A, clip(rho)*A)
  double value_term = 0.0;   // (V - target)^2
  double entropy = 0.0;
  double ratio = 1.0;        // exp(log_prob - log_prob_old)
};

/// Exact reverse-mode gradients of the loss w.r.t. every parameter.
/// Throws on non-finite intermediates.
GradResult loss_grad(const PolicyParams& params, const GraphBatch& batch, const LossSpec& spec);

}  // namespace pgts
