#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pgts/mdp.hpp"
#include "pgts/policy.hpp"

namespace pgts {

/// One stored environment step: the state snapshot the action was sampled
/// from, plus everything PPO needs to recompute and clip the ratio.
struct Transition {
  GraphBatch state;
  int action_index = 0;
  double log_prob_old = 0.0;
  double reward = 0.0;
  double value_old = 0.0;
  bool done = false;

  // Filled by compute_returns_advantages.
  double ret = 0.0;
  double advantage = 0.0;
};

struct EpisodeStats {
  double traj_reward = 0.0;  // undiscounted return
  bool success = false;
  int steps = 0;
};

struct RolloutBuffer {
  std::vector<Transition> transitions;
  std::vector<std::size_t> episode_starts;  // index into transitions, one per episode
  std::vector<EpisodeStats> episodes;

  std::size_t episode_end(std::size_t e) const {
    return e + 1 < episode_starts.size() ? episode_starts[e + 1] : transitions.size();
  }
};

struct TrainConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  double entropy_weight = 0.01;
  double lr_policy = 3e-4;
  double lr_value = 3e-4;
  int epochs_per_batch = 4;
  int value_epochs = 0;   // extra value-only epochs after the joint PPO epochs
  bool value_ridge = false;  // refit the linear value head exactly per batch
  int minibatch_size = 64;
  int episodes_per_batch = 16;
  int total_episodes = 1000;
  std::uint64_t seed = 0;
  bool normalize_advantages = true;
  bool plain_returns = false;  // Algorithm-1 A_t = G_t - V(s_t), i.e. lambda = 1 bootstrap-free
  bool use_adam = false;       // adaptive-moment variant behind a flag
  int eval_every_batches = 8;
  int eval_episodes = 64;

  void check() const;
};

/// Collects n_episodes complete episodes under the given parameter snapshot,
/// sampling tasks uniformly and actions from the masked policy. Fully
/// deterministic given (params, tasks, rng seed).
RolloutBuffer collect_rollouts(const PolicyParams& params, std::span<const TaskInstance> tasks,
                               StepGenerator& gen, const EpisodeConfig& episode_config,
                               const TreeLimits& limits, int n_episodes, Rng& rng);

/// GAE(gamma, lambda) returns and advantages, normalized per buffer when
/// configured. With plain_returns the advantage is the discounted return
/// minus the stored value.
void compute_returns_advantages(RolloutBuffer& buffer, const TrainConfig& config);

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double mean_ratio = 1.0;
};

/// Adaptive-moment accumulators; persist across batches within a run.
struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

/// Clipped-surrogate PPO epochs over shuffled minibatches. Throws on
/// non-finite losses, identifying the offending minibatch. Pass the same
/// AdamState across calls to keep optimizer moments between batches.
UpdateStats ppo_update(PolicyParams& params, RolloutBuffer& buffer, const TrainConfig& config,
                       Rng& rng, AdamState* adam = nullptr);

struct CurveRow {
  int batch = 0;
  long episodes_seen = 0;
  double mean_traj_reward = 0.0;
  double mean_entropy = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  std::optional<double> eval_success_rate;
};

struct TrainResult {
  PolicyParams params;
  std::vector<CurveRow> curve;
};

struct TrainHooks {
  /// Called after each batch; return value ignored.
  std::function<void(const CurveRow&)> on_batch;
  /// Checkpoint sink: called periodically with episodes_seen.
  std::function<void(const PolicyParams&, long)> on_checkpoint;
  int checkpoint_every_batches = 16;
};

/// Continuation point for resumed runs.
struct ResumeState {
  PolicyParams params;
  long episodes_seen = 0;
};

/// Full training loop per the PPO recipe: alternate rollout collection and
/// updates until total_episodes, logging one curve row per batch and
/// evaluating on held-out tasks every eval_every_batches.
TrainResult train(const TrainConfig& config, const PolicyConfig& policy_config,
                  std::span<const TaskInstance> train_tasks,
                  std::span<const TaskInstance> eval_tasks, StepGenerator& gen,
                  const EpisodeConfig& episode_config, const TreeLimits& limits,
                  const TrainHooks& hooks = {}, const std::optional<ResumeState>& resume = {});

/// Runs one evaluation episode (sampled actions) and reports success,
/// trajectory reward (mean path edge reward of the final path) and steps.
struct EvalEpisode {
  bool success = false;
  double traj_reward = 0.0;
  std::string answer;
  int steps = 0;
  std::vector<std::string> chain_contents;
};
EvalEpisode run_policy_episode(const PolicyParams& params, const TaskInstance& task,
                               StepGenerator& gen, const EpisodeConfig& episode_config,
                               const TreeLimits& limits, Rng& rng);

/// Baseline for the learning-signal comparison: uniform over valid actions.
EvalEpisode run_random_episode(const TaskInstance& task, StepGenerator& gen,
                               const EpisodeConfig& episode_config, const TreeLimits& limits,
                               Rng& rng);

/// Success rate of the policy over a task set with per-task rng streams.
double evaluate_success_rate(const PolicyParams& params, std::span<const TaskInstance> tasks,
                             StepGenerator& gen, const EpisodeConfig& episode_config,
                             const TreeLimits& limits, std::uint64_t seed);

void write_curve_csv(const std::vector<CurveRow>& curve, const std::string& path);

}  // namespace pgts
