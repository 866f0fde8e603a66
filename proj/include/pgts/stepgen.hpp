#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pgts/task.hpp"

namespace pgts {

/// The "LLM as environment" surface. One session owns monotone generation
/// counters; synthetic generators are pure given (seed, path, sibling_index).
class StepGenerator {
 public:
  virtual ~StepGenerator() = default;

  /// Propose the step occupying child slot `sibling_index` under the node
  /// whose root-first contents are `path`. The path starts with the prompt.
  virtual StepProposal propose_step(const TaskInstance& task, const std::vector<std::string>& path,
                                    int sibling_index) = 0;

  /// Feature vector for the root (prompt) node.
  virtual std::vector<double> root_features(const TaskInstance& task) = 0;

  virtual int feature_dim() const = 0;

  GenerationCost cost() const { return {proposals_.load(), tokens_.load()}; }

 protected:
  void count_generation(long tokens) {
    proposals_.fetch_add(1);
    if (tokens > 0) tokens_.fetch_add(tokens);
  }

 private:
  std::atomic<long> proposals_{0};
  std::atomic<long> tokens_{0};
};

/// Seeded task family for desk-scale experiments. Each task hides a
/// ground-truth child-index chain c_1..c_D drawn from its seed; a proposal
/// is on-path iff the whole prefix followed the chain and sibling_index
/// matches the next planted index. Step rewards are clamped Gaussians
/// around on_path_mean / off_path_mean, deterministically seeded by
/// (task seed, path, sibling_index).
struct SyntheticTaskConfig {
  int depth = 4;               // D
  int breadth = 2;             // B
  double on_path_mean = 0.8;
  double off_path_mean = 0.3;
  double noise_std = 0.1;
  int feature_dim = 32;        // F
  double feature_shift = 1.0;

  void check() const;
};

class SyntheticGenerator final : public StepGenerator {
 public:
  explicit SyntheticGenerator(SyntheticTaskConfig config);

  StepProposal propose_step(const TaskInstance& task, const std::vector<std::string>& path,
                            int sibling_index) override;
  std::vector<double> root_features(const TaskInstance& task) override;
  int feature_dim() const override { return config_.feature_dim; }

  const SyntheticTaskConfig& config() const { return config_; }

  /// The planted chain for a task seed, as child indices c_1..c_D.
  std::vector<int> planted_chain(const TaskInstance& task) const;

 private:
  SyntheticTaskConfig config_;
};

/// Builds a synthetic TaskInstance whose ground truth is the planted chain.
TaskInstance make_synthetic_task(const SyntheticTaskConfig& config, std::uint64_t seed,
                                 const std::string& task_id);

/// Sentence segmentation: terminal punctuation (. ! ?) followed by
/// whitespace or end of input, with newlines also treated as boundaries.
/// Empty segments are dropped.
std::vector<std::string> split_steps(const std::string& completion);

/// Extracts the answer following `marker` (default "The answer is"),
/// case-insensitively, trimmed of surrounding whitespace and trailing
/// punctuation. Returns nullopt when the marker is absent.
std::optional<std::string> detect_final(const std::string& content,
                                        const std::string& marker = "The answer is");

struct LeafSearchResult {
  std::vector<int> chain;       // child indices, length D
  double path_reward_sum = 0.0;
  bool matches_ground_truth = false;
};

/// Brute-force oracle: enumerates all B^D leaves of a synthetic task and
/// returns the chain maximizing the path edge-reward sum. Guarded to
/// B^D <= 10^6.
LeafSearchResult exhaustive_best_leaf(const TaskInstance& task, const SyntheticTaskConfig& config);

/// Chain helpers shared by the synthetic generator and the oracle.
std::string chain_to_string(const std::vector<int>& chain);
std::vector<int> parse_chain(const std::string& text);

}  // namespace pgts
