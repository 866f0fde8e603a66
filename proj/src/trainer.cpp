#include "pgts/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace pgts {

void TrainConfig::check() const {
  if (!(clip > 0.0 && clip < 1.0)) throw std::invalid_argument("clip must be in (0,1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0,1]");
  if (!(gae_lambda > 0.0 && gae_lambda <= 1.0))
    throw std::invalid_argument("gae_lambda must be in (0,1]");
  if (epochs_per_batch < 1 || minibatch_size < 1 || episodes_per_batch < 1 || total_episodes < 0)
    throw std::invalid_argument("train config counts must be positive");
}

namespace {

// One episode of transitions appended to the buffer.
EpisodeStats run_training_episode(const PolicyParams& params, const TaskInstance& task,
                                  StepGenerator& gen, const EpisodeConfig& episode_config,
                                  const TreeLimits& limits, Rng& rng, RolloutBuffer& buffer) {
  TreeSearchEnv env(task, gen, episode_config, limits);
  EpisodeStats stats;
  buffer.episode_starts.push_back(buffer.transitions.size());
  while (!env.done()) {
    GraphBatch batch = make_graph_batch(env.tree(), params.config().k_max);
    PolicyEvaluation eval = evaluate_policy(params, batch);
    auto [action, log_prob] = sample_action(eval.dist, rng);
    StepOutcome out = env.step(action);

    Transition t;
    t.state = std::move(batch);
    t.action_index = action.to_index(limits.depth_limit);
    t.log_prob_old = log_prob;
    t.reward = out.reward;
    t.value_old = eval.value;
    t.done = out.done;
    buffer.transitions.push_back(std::move(t));

    stats.traj_reward += out.reward;
    ++stats.steps;
  }
  auto answer = env.current_answer();
  stats.success = task.ground_truth && answer && *answer == *task.ground_truth;
  return stats;
}

}  // namespace

RolloutBuffer collect_rollouts(const PolicyParams& params, std::span<const TaskInstance> tasks,
                               StepGenerator& gen, const EpisodeConfig& episode_config,
                               const TreeLimits& limits, int n_episodes, Rng& rng) {
  if (tasks.empty() && n_episodes > 0) throw std::invalid_argument("empty task pool");
  RolloutBuffer buffer;
  for (int e = 0; e < n_episodes; ++e) {
    const auto& task = tasks[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(tasks.size())))];
    Rng episode_rng = rng.fork(static_cast<std::uint64_t>(e) + 1);
    buffer.episodes.push_back(
        run_training_episode(params, task, gen, episode_config, limits, episode_rng, buffer));
  }
  return buffer;
}

void compute_returns_advantages(RolloutBuffer& buffer, const TrainConfig& config) {
  config.check();
  for (std::size_t e = 0; e < buffer.episode_starts.size(); ++e) {
    const std::size_t begin = buffer.episode_starts[e];
    const std::size_t end = buffer.episode_end(e);
    if (begin == end) continue;
    if (!buffer.transitions[end - 1].done)
      throw std::invalid_argument("incomplete episode in buffer (no terminal transition)");

    if (config.plain_returns) {
      double g = 0.0;
      for (std::size_t i = end; i-- > begin;) {
        auto& t = buffer.transitions[i];
        g = t.reward + config.gamma * g;
        t.ret = g;
        t.advantage = g - t.value_old;
      }
    } else {
      double gae = 0.0;
      for (std::size_t i = end; i-- > begin;) {
        auto& t = buffer.transitions[i];
        const double next_value = t.done ? 0.0 : buffer.transitions[i + 1].value_old;
        const double delta = t.reward + config.gamma * next_value - t.value_old;
        gae = delta + config.gamma * config.gae_lambda * (t.done ? 0.0 : gae);
        t.advantage = gae;
        t.ret = gae + t.value_old;
      }
    }
  }

  if (config.normalize_advantages && !buffer.transitions.empty()) {
    double mean = 0.0;
    for (const auto& t : buffer.transitions) mean += t.advantage;
    mean /= static_cast<double>(buffer.transitions.size());
    double var = 0.0;
    for (const auto& t : buffer.transitions) var += (t.advantage - mean) * (t.advantage - mean);
    var /= static_cast<double>(buffer.transitions.size());
    const double inv = 1.0 / (std::sqrt(var) + 1e-8);
    for (auto& t : buffer.transitions) t.advantage = (t.advantage - mean) * inv;
  }
}

namespace {

void apply_step(PolicyParams& params, const std::vector<double>& grad, double lr,
                const TrainConfig& config, AdamState& adam) {
  auto& theta = params.data();
  if (!config.use_adam) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (adam.m.empty()) {
    adam.m.assign(theta.size(), 0.0);
    adam.v.assign(theta.size(), 0.0);
  }
  ++adam.t;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * grad[i];
    adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * grad[i] * grad[i];
    theta[i] -= lr * (adam.m[i] / c1) / (std::sqrt(adam.v[i] / c2) + eps);
  }
}

}  // namespace

UpdateStats ppo_update(PolicyParams& params, RolloutBuffer& buffer, const TrainConfig& config,
                       Rng& rng, AdamState* adam_in) {
  config.check();
  UpdateStats stats;
  const std::size_t n = buffer.transitions.size();
  if (n == 0) return stats;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  AdamState local_adam;
  AdamState& adam = adam_in ? *adam_in : local_adam;
  double sum_policy = 0.0, sum_value = 0.0, sum_entropy = 0.0, sum_ratio = 0.0;
  long count = 0;

  // One combined backward realizes both learning rates: the gradient carries
  // weight lr_value/lr_policy on the value term and the step runs at
  // lr_policy. Degenerate rates fall back to the surviving term.
  double step_lr = config.lr_policy, policy_w = 1.0, value_w = 0.0;
  if (config.lr_policy > 0.0) {
    value_w = config.lr_value / config.lr_policy;
  } else if (config.lr_value > 0.0) {
    step_lr = config.lr_value;
    policy_w = 0.0;
    value_w = 1.0;
  }

  const int total_epochs = config.epochs_per_batch + std::max(0, config.value_epochs);
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    // Trailing epochs fit the value alone, per the separate value-update
    // step of the training recipe.
    const bool value_only = epoch >= config.epochs_per_batch;
    // Fisher-Yates with the training rng keeps updates reproducible.
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)));
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.minibatch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(config.minibatch_size));
      const double inv_mb = 1.0 / static_cast<double>(stop - start);

      std::vector<double> grad(params.size(), 0.0);
      double mb_policy = 0.0, mb_value = 0.0, mb_entropy = 0.0;
      for (std::size_t idx = start; idx < stop; ++idx) {
        const Transition& t = buffer.transitions[order[idx]];

        LossSpec spec;
        spec.policy_weight = value_only ? 0.0 : policy_w;
        spec.action_index = t.action_index;
        spec.log_prob_old = t.log_prob_old;
        spec.advantage = t.advantage;
        spec.clip = config.clip;
        spec.entropy_weight = value_only ? 0.0 : policy_w * config.entropy_weight;
        spec.value_weight = value_only ? 1.0 : value_w;
        spec.value_target = t.ret;

        GradResult g = loss_grad(params, t.state, spec);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.grad[i] * inv_mb;
        mb_policy += g.policy_term;
        mb_value += g.value_term;
        mb_entropy += g.entropy;
        if (!value_only) sum_ratio += g.ratio;
      }
      if (!std::isfinite(mb_policy) || !std::isfinite(mb_value))
        throw std::runtime_error("non-finite loss in minibatch starting at sample " +
                                 std::to_string(start) + " of epoch " + std::to_string(epoch));

      if (!value_only) {
        sum_policy += mb_policy;
        sum_value += mb_value;
        sum_entropy += mb_entropy;
        count += static_cast<long>(stop - start);
      }

      apply_step(params, grad, value_only ? config.lr_value : step_lr, config, adam);
    }
  }

  // Exact value-function update: the value head is linear in the shared
  // representation, so the regression onto the batch returns solves in
  // closed form (ridge-stabilized normal equations).
  if (config.value_ridge) {
    const ParamLayout& lay = params.layout();
    const PolicyConfig& pcfg = params.config();
    const int H = pcfg.hidden;
    const int A = pcfg.num_actions();
    const int d = H + A + 1;
    std::vector<double> normal(static_cast<std::size_t>(d) * d, 0.0);
    std::vector<double> rhs(static_cast<std::size_t>(d), 0.0);
    std::vector<double> u(static_cast<std::size_t>(d), 0.0);
    for (const Transition& t : buffer.transitions) {
      const std::vector<double> emb = encode(params, t.state);
      std::copy(emb.begin() + static_cast<std::ptrdiff_t>(t.state.current_index) * H,
                emb.begin() + static_cast<std::ptrdiff_t>(t.state.current_index + 1) * H, u.begin());
      for (int i = 0; i < A; ++i)
        u[static_cast<std::size_t>(H + i)] = t.state.constraints.valid(i) ? 1.0 : 0.0;
      u[static_cast<std::size_t>(d - 1)] = 1.0;
      for (int r = 0; r < d; ++r) {
        rhs[static_cast<std::size_t>(r)] += u[static_cast<std::size_t>(r)] * t.ret;
        for (int c = 0; c < d; ++c)
          normal[static_cast<std::size_t>(r) * d + c] +=
              u[static_cast<std::size_t>(r)] * u[static_cast<std::size_t>(c)];
      }
    }
    const double reg = 1e-4 * static_cast<double>(n) + 1e-8;
    for (int r = 0; r < d; ++r) normal[static_cast<std::size_t>(r) * d + r] += reg;

    // Gaussian elimination with partial pivoting.
    std::vector<double>& m = normal;
    std::vector<double> sol = rhs;
    for (int col = 0; col < d; ++col) {
      int pivot = col;
      for (int r = col + 1; r < d; ++r)
        if (std::abs(m[static_cast<std::size_t>(r) * d + col]) >
            std::abs(m[static_cast<std::size_t>(pivot) * d + col]))
          pivot = r;
      for (int c = 0; c < d; ++c)
        std::swap(m[static_cast<std::size_t>(col) * d + c], m[static_cast<std::size_t>(pivot) * d + c]);
      std::swap(sol[static_cast<std::size_t>(col)], sol[static_cast<std::size_t>(pivot)]);
      const double diag = m[static_cast<std::size_t>(col) * d + col];
      for (int r = col + 1; r < d; ++r) {
        const double f = m[static_cast<std::size_t>(r) * d + col] / diag;
        if (f == 0.0) continue;
        for (int c = col; c < d; ++c)
          m[static_cast<std::size_t>(r) * d + c] -= f * m[static_cast<std::size_t>(col) * d + c];
        sol[static_cast<std::size_t>(r)] -= f * sol[static_cast<std::size_t>(col)];
      }
    }
    for (int col = d - 1; col >= 0; --col) {
      double acc = sol[static_cast<std::size_t>(col)];
      for (int c = col + 1; c < d; ++c)
        acc -= m[static_cast<std::size_t>(col) * d + c] * sol[static_cast<std::size_t>(c)];
      sol[static_cast<std::size_t>(col)] = acc / m[static_cast<std::size_t>(col) * d + col];
    }
    for (int c = 0; c < H + A; ++c) params.data()[lay.w_val + static_cast<std::size_t>(c)] = sol[static_cast<std::size_t>(c)];
    params.data()[lay.b_val] = sol[static_cast<std::size_t>(d - 1)];
  }

  if (count > 0) {
    stats.policy_loss = sum_policy / static_cast<double>(count);
    stats.value_loss = sum_value / static_cast<double>(count);
    stats.entropy = sum_entropy / static_cast<double>(count);
    stats.mean_ratio = sum_ratio / static_cast<double>(count);
  }
  return stats;
}

EvalEpisode run_policy_episode(const PolicyParams& params, const TaskInstance& task,
                               StepGenerator& gen, const EpisodeConfig& episode_config,
                               const TreeLimits& limits, Rng& rng) {
  EpisodeConfig cfg = episode_config;
  cfg.terminal_mode = TerminalRewardMode::path_mean;
  TreeSearchEnv env(task, gen, cfg, limits);
  EvalEpisode out;
  while (!env.done()) {
    GraphBatch batch = make_graph_batch(env.tree(), params.config().k_max);
    PolicyEvaluation eval = evaluate_policy(params, batch);
    auto [action, log_prob] = sample_action(eval.dist, rng);
    (void)log_prob;
    env.step(action);
    ++out.steps;
  }
  const auto& tree = env.tree();
  const NodeId leaf = tree.current();
  const int depth = tree.node(leaf).depth;
  out.traj_reward = depth > 0 ? tree.path_edge_reward_sum(leaf) / depth : 0.0;
  auto answer = env.current_answer();
  out.answer = answer.value_or("");
  out.success = task.ground_truth && answer && *answer == *task.ground_truth;
  for (NodeId v : tree.path_to_root(leaf)) out.chain_contents.push_back(tree.node(v).content);
  return out;
}

EvalEpisode run_random_episode(const TaskInstance& task, StepGenerator& gen,
                               const EpisodeConfig& episode_config, const TreeLimits& limits,
                               Rng& rng) {
  EpisodeConfig cfg = episode_config;
  cfg.terminal_mode = TerminalRewardMode::path_mean;
  TreeSearchEnv env(task, gen, cfg, limits);
  EvalEpisode out;
  while (!env.done()) {
    const ConstraintVector c = env.tree().compute_constraints();
    std::vector<int> valid;
    for (int i = 0; i < c.size(); ++i)
      if (c.valid(i)) valid.push_back(i);
    const int idx = valid[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(valid.size())))];
    env.step(SearchAction::from_index(idx, limits.depth_limit));
    ++out.steps;
  }
  const auto& tree = env.tree();
  const NodeId leaf = tree.current();
  const int depth = tree.node(leaf).depth;
  out.traj_reward = depth > 0 ? tree.path_edge_reward_sum(leaf) / depth : 0.0;
  auto answer = env.current_answer();
  out.answer = answer.value_or("");
  out.success = task.ground_truth && answer && *answer == *task.ground_truth;
  for (NodeId v : tree.path_to_root(leaf)) out.chain_contents.push_back(tree.node(v).content);
  return out;
}

double evaluate_success_rate(const PolicyParams& params, std::span<const TaskInstance> tasks,
                             StepGenerator& gen, const EpisodeConfig& episode_config,
                             const TreeLimits& limits, std::uint64_t seed) {
  if (tasks.empty()) return 0.0;
  long hits = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    Rng rng(hash_combine(mix64(seed), i + 1));
    if (run_policy_episode(params, tasks[i], gen, episode_config, limits, rng).success) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(tasks.size());
}

TrainResult train(const TrainConfig& config, const PolicyConfig& policy_config,
                  std::span<const TaskInstance> train_tasks,
                  std::span<const TaskInstance> eval_tasks, StepGenerator& gen,
                  const EpisodeConfig& episode_config, const TreeLimits& limits,
                  const TrainHooks& hooks, const std::optional<ResumeState>& resume) {
  config.check();
  policy_config.check();
  TrainResult result;
  result.params =
      resume ? resume->params : PolicyParams::random_init(policy_config, config.seed);

  Rng rollout_rng(hash_combine(mix64(config.seed), hash_str("rollouts")));
  Rng update_rng(hash_combine(mix64(config.seed), hash_str("updates")));
  AdamState adam;

  long episodes_seen = resume ? resume->episodes_seen : 0;
  int batch_index = static_cast<int>(episodes_seen / std::max(1, config.episodes_per_batch));
  while (episodes_seen < config.total_episodes) {
    const int n = static_cast<int>(
        std::min<long>(config.episodes_per_batch, config.total_episodes - episodes_seen));
    Rng batch_rng = rollout_rng.fork(static_cast<std::uint64_t>(batch_index) + 1);
    RolloutBuffer buffer =
        collect_rollouts(result.params, train_tasks, gen, episode_config, limits, n, batch_rng);
    compute_returns_advantages(buffer, config);

    double mean_traj = 0.0;
    for (const auto& e : buffer.episodes) mean_traj += e.traj_reward;
    if (!buffer.episodes.empty()) mean_traj /= static_cast<double>(buffer.episodes.size());

    Rng epoch_rng = update_rng.fork(static_cast<std::uint64_t>(batch_index) + 1);
    UpdateStats stats = ppo_update(result.params, buffer, config, epoch_rng, &adam);

    episodes_seen += n;
    ++batch_index;

    CurveRow row;
    row.batch = batch_index;
    row.episodes_seen = episodes_seen;
    row.mean_traj_reward = mean_traj;
    row.mean_entropy = stats.entropy;
    row.policy_loss = stats.policy_loss;
    row.value_loss = stats.value_loss;
    if (!eval_tasks.empty() &&
        (batch_index % config.eval_every_batches == 0 || episodes_seen >= config.total_episodes)) {
      const std::size_t n_eval =
          std::min<std::size_t>(eval_tasks.size(), static_cast<std::size_t>(config.eval_episodes));
      row.eval_success_rate = evaluate_success_rate(
          result.params, eval_tasks.subspan(0, n_eval), gen, episode_config, limits,
          hash_combine(config.seed, static_cast<std::uint64_t>(batch_index)));
    }
    result.curve.push_back(row);
    if (hooks.on_batch) hooks.on_batch(row);
    if (hooks.on_checkpoint &&
        (batch_index % hooks.checkpoint_every_batches == 0 || episodes_seen >= config.total_episodes))
      hooks.on_checkpoint(result.params, episodes_seen);
  }
  return result;
}

void write_curve_csv(const std::vector<CurveRow>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open curve csv " + path + " for writing");
  out << "batch,episodes_seen,mean_traj_reward,mean_entropy,policy_loss,value_loss,eval_success_rate\n";
  out.precision(10);
  for (const auto& r : curve) {
    out << r.batch << ',' << r.episodes_seen << ',' << r.mean_traj_reward << ',' << r.mean_entropy
        << ',' << r.policy_loss << ',' << r.value_loss << ',';
    if (r.eval_success_rate) out << *r.eval_success_rate;
    out << '\n';
  }
}

}  // namespace pgts
