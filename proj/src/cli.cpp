#include "pgts/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <thread>

namespace pgts::cli {

namespace fs = std::filesystem;

namespace {

std::unique_ptr<StepGenerator> make_generator(const RunConfig& config) {
  if (config.generator.type == "llm") return std::make_unique<LlmGenerator>(config.generator.llm);
  return std::make_unique<SyntheticGenerator>(config.generator.synthetic);
}

const std::vector<std::string> kMethods = {"greedy",    "pgts",     "pgts-sc",
                                           "mcts-best", "mcts-agg", "mcts-oracle"};

EvalRow run_one_task(const std::string& method, const RunConfig& config, const TaskInstance& task,
                     std::size_t task_index, const std::optional<PolicyParams>& params,
                     StepGenerator& gen) {
  EvalRow row;
  row.method = method;
  row.task_id = task.task_id;
  Rng rng(hash_combine(hash_combine(mix64(config.seed), hash_str(method)), task_index + 1));
  const GenerationCost before = gen.cost();
  const auto t0 = std::chrono::steady_clock::now();

  std::string answer;
  if (method == "greedy") {
    ChainResult c = greedy_chain(task, gen, config.tree, rng);
    answer = c.answer;
    row.traj_reward = c.traj_reward;
  } else if (method == "pgts") {
    EvalEpisode ep = run_policy_episode(*params, task, gen, config.episode, config.tree, rng);
    answer = ep.answer;
    row.traj_reward = ep.traj_reward;
  } else if (method == "pgts-sc") {
    SelfConsistencyResult sc = pgts_self_consistency(*params, task, gen, config.episode,
                                                     config.tree, config.sc_chains, rng);
    answer = sc.answer;
    double best = 0.0;
    for (const auto& c : sc.chains)
      if (c.answer == sc.answer) best = std::max(best, c.traj_reward);
    row.traj_reward = best;
  } else if (method == "mcts-best" || method == "mcts-agg" || method == "mcts-oracle") {
    MCTSConfig mcfg = config.mcts;
    mcfg.oracle = method == "mcts-oracle";
    MCTSResult res = mcts_search(task, gen, mcfg, config.tree, rng);
    answer = aggregate(res.chains, method == "mcts-agg" ? AggregateMode::weighted
                                                        : AggregateMode::best);
    double best = 0.0;
    for (const auto& c : res.chains)
      if (c.answer == answer) best = std::max(best, c.traj_reward);
    row.traj_reward = best;
  } else {
    throw std::invalid_argument("unknown method " + method);
  }

  const auto t1 = std::chrono::steady_clock::now();
  const GenerationCost after = gen.cost();
  row.correct = task.ground_truth && answer == *task.ground_truth;
  row.proposals = after.proposals - before.proposals;
  row.tokens = after.tokens - before.tokens;
  row.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return row;
}

void write_rows_csv(const std::vector<EvalRow>& rows, const std::vector<MethodSummary>& summaries,
                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "method,task_id,correct,traj_reward,proposals,tokens,wall_ms\n";
  out.precision(10);
  for (const auto& r : rows)
    out << r.method << ',' << r.task_id << ',' << (r.correct ? 1 : 0) << ',' << r.traj_reward << ','
        << r.proposals << ',' << r.tokens << ',' << r.wall_ms << '\n';
  for (const auto& s : summaries)
    out << s.method << ",ALL," << s.success_rate << ',' << s.mean_traj_reward << ','
        << s.mean_proposals << ',' << s.mean_tokens << ',' << s.mean_wall_ms << '\n';
}

std::optional<PolicyParams> load_params_if(const std::optional<std::string>& checkpoint) {
  if (!checkpoint) return std::nullopt;
  return PolicyParams::load_checkpoint(*checkpoint).first;
}

bool needs_checkpoint(const std::string& method) {
  return method == "pgts" || method == "pgts-sc";
}

}  // namespace

bool is_known_method(const std::string& method) {
  return std::find(kMethods.begin(), kMethods.end(), method) != kMethods.end();
}

std::vector<EvalRow> evaluate_method(const std::string& method, const RunConfig& config,
                                     const std::vector<TaskInstance>& tasks,
                                     const std::optional<PolicyParams>& params) {
  if (!is_known_method(method)) throw std::invalid_argument("unknown method " + method);
  if (needs_checkpoint(method) && !params)
    throw std::invalid_argument("method " + method + " requires a checkpoint");

  std::vector<EvalRow> rows(tasks.size());
  const int jobs = std::max(1, std::min<int>(config.jobs, static_cast<int>(tasks.size())));
  std::vector<std::thread> workers;
  std::exception_ptr first_error;
  std::mutex error_mutex;

  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w]() {
      try {
        auto gen = make_generator(config);  // one session per worker
        for (std::size_t i = static_cast<std::size_t>(w); i < tasks.size();
             i += static_cast<std::size_t>(jobs))
          rows[i] = run_one_task(method, config, tasks[i], i, params, *gen);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return rows;
}

MethodSummary summarize(const std::string& method, const std::vector<EvalRow>& rows) {
  MethodSummary s;
  s.method = method;
  long n = 0;
  for (const auto& r : rows) {
    if (r.method != method) continue;
    ++n;
    s.success_rate += r.correct ? 1.0 : 0.0;
    s.mean_traj_reward += r.traj_reward;
    s.mean_proposals += static_cast<double>(r.proposals);
    s.mean_tokens += static_cast<double>(r.tokens);
    s.mean_wall_ms += r.wall_ms;
  }
  if (n > 0) {
    const double inv = 1.0 / static_cast<double>(n);
    s.success_rate *= inv;
    s.mean_traj_reward *= inv;
    s.mean_proposals *= inv;
    s.mean_tokens *= inv;
    s.mean_wall_ms *= inv;
  }
  return s;
}

int cmd_train(const RunConfig& config, const std::optional<std::string>& resume_checkpoint) {
  fs::create_directories(config.out_dir);
  write_run_config(config, config.out_dir + "/config.json");
  TaskSets tasks = build_tasks(config);
  auto gen = make_generator(config);

  EpisodeConfig episode = config.episode;
  episode.terminal_mode = TerminalRewardMode::ground_truth;

  TrainHooks hooks;
  hooks.on_batch = [](const CurveRow& row) {
    std::cout << "batch " << row.batch << " episodes " << row.episodes_seen << " reward "
              << row.mean_traj_reward << " entropy " << row.mean_entropy;
    if (row.eval_success_rate) std::cout << " eval " << *row.eval_success_rate;
    std::cout << "\n";
  };
  hooks.on_checkpoint = [&config](const PolicyParams& params, long episodes_seen) {
    PolicyParams::CheckpointMeta meta{config.seed, episodes_seen};
    params.save_checkpoint(
        config.out_dir + "/" + config.run_id + "-" + std::to_string(episodes_seen) + ".ckpt", meta);
  };

  std::optional<ResumeState> resume;
  if (resume_checkpoint) {
    auto [params, meta] = PolicyParams::load_checkpoint(*resume_checkpoint);
    if (!(params.config() == config.policy))
      throw std::invalid_argument("checkpoint config does not match run config");
    resume = ResumeState{std::move(params), meta.episodes_seen};
  }

  TrainResult result = train(config.train, config.policy, tasks.train, tasks.eval, *gen, episode,
                             config.tree, hooks, resume);
  write_curve_csv(result.curve, config.out_dir + "/curve.csv");
  return 0;
}

int cmd_eval(const RunConfig& config, const std::string& method,
             const std::optional<std::string>& checkpoint) {
  fs::create_directories(config.out_dir);
  write_run_config(config, config.out_dir + "/config.json");
  TaskSets tasks = build_tasks(config);
  auto params = load_params_if(checkpoint);
  if (needs_checkpoint(method) && !params) {
    std::cerr << "method " << method << " requires --checkpoint\n";
    return 2;
  }
  std::vector<EvalRow> rows = evaluate_method(method, config, tasks.eval, params);
  MethodSummary s = summarize(method, rows);
  write_rows_csv(rows, {s}, config.out_dir + "/eval.csv");
  std::cout << "method=" << method << " success_rate=" << s.success_rate
            << " mean_proposals=" << s.mean_proposals << " mean_tokens=" << s.mean_tokens << "\n";
  return 0;
}

int cmd_compare(const RunConfig& config, std::vector<std::string> methods,
                const std::optional<std::string>& checkpoint) {
  if (methods.size() < 2) {
    std::cerr << "compare needs at least two --method flags\n";
    return 2;
  }
  // Greedy is the normalization baseline; pull it in when absent.
  if (std::find(methods.begin(), methods.end(), "greedy") == methods.end())
    methods.insert(methods.begin(), "greedy");

  fs::create_directories(config.out_dir);
  write_run_config(config, config.out_dir + "/config.json");
  TaskSets tasks = build_tasks(config);
  auto params = load_params_if(checkpoint);

  std::vector<EvalRow> all_rows;
  std::vector<MethodSummary> summaries;
  for (const auto& m : methods) {
    if (needs_checkpoint(m) && !params) {
      std::cerr << "method " << m << " requires --checkpoint\n";
      return 2;
    }
    std::vector<EvalRow> rows = evaluate_method(m, config, tasks.eval, params);
    summaries.push_back(summarize(m, rows));
    all_rows.insert(all_rows.end(), rows.begin(), rows.end());
  }
  write_rows_csv(all_rows, summaries, config.out_dir + "/compare.csv");

  const MethodSummary* base = nullptr;
  for (const auto& s : summaries)
    if (s.method == "greedy") base = &s;

  std::ofstream ratios(config.out_dir + "/ratios.csv");
  ratios << "method,success_rate,mean_proposals,mean_tokens,proposals_ratio,tokens_ratio\n";
  ratios.precision(10);
  for (const auto& s : summaries) {
    const double pr = base && base->mean_proposals > 0 ? s.mean_proposals / base->mean_proposals : 0;
    const double tr = base && base->mean_tokens > 0 ? s.mean_tokens / base->mean_tokens : 0;
    ratios << s.method << ',' << s.success_rate << ',' << s.mean_proposals << ',' << s.mean_tokens
           << ',' << pr << ',' << tr << '\n';
    std::cout << s.method << ": success=" << s.success_rate << " proposals=" << s.mean_proposals
              << " (x" << pr << " of greedy)\n";
  }
  return 0;
}

int cmd_rollout(const RunConfig& config, const std::string& checkpoint, const std::string& task_id) {
  fs::create_directories(config.out_dir);
  TaskSets tasks = build_tasks(config);
  const TaskInstance* task = nullptr;
  for (const auto& t : tasks.eval)
    if (t.task_id == task_id) task = &t;
  for (const auto& t : tasks.train)
    if (t.task_id == task_id) task = &t;
  if (!task) {
    std::cerr << "unknown task " << task_id << "\n";
    return 2;
  }

  auto [params, meta] = PolicyParams::load_checkpoint(checkpoint);
  auto gen = make_generator(config);
  EpisodeConfig episode = config.episode;
  episode.terminal_mode = TerminalRewardMode::path_mean;

  TreeSearchEnv env(*task, *gen, episode, config.tree);
  TrajectoryLog log(config.out_dir + "/trajectory.jsonl");
  log.begin_episode(*task, episode);
  Rng rng(hash_combine(mix64(config.seed), hash_str(task_id)));

  int step = 0;
  while (!env.done()) {
    GraphBatch batch = make_graph_batch(env.tree(), params.config().k_max);
    PolicyEvaluation eval = evaluate_policy(params, batch);
    auto [action, log_prob] = sample_action(eval.dist, rng);
    (void)log_prob;
    StepOutcome out = env.step(action);
    log.record(step, action, action.to_index(config.tree.depth_limit), out, env.tree().current());
    std::cout << "step " << step << ": " << action.name() << " reward " << out.reward << " node "
              << env.tree().current() << " \"" << env.tree().node(env.tree().current()).content
              << "\"\n";
    ++step;
  }
  if (env.steps_taken() >= config.episode.max_steps)
    std::cout << "episode ended by exploration budget (T_max)\n";
  save_tree_nodes(env.tree(), config.out_dir + "/tree.jsonl");
  save_tree_features(env.tree(), config.out_dir + "/tree_features.bin");
  std::cout << "final answer: " << env.current_answer().value_or("<none>") << "\n";
  return 0;
}

}  // namespace pgts::cli
