#include "pgts/run_config.hpp"

#include <fstream>
#include <algorithm>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace pgts {

using nlohmann::json;

void RunConfig::finalize() {
  if (tree.depth_limit < 1 || tree.breadth_limit < 1 || tree.feature_dim < 1)
    throw std::invalid_argument("tree limits must be >= 1");
  generator.synthetic.depth = tree.depth_limit;
  generator.synthetic.breadth = tree.breadth_limit;
  generator.synthetic.feature_dim = tree.feature_dim;
  generator.llm.feature_dim = tree.feature_dim;
  policy.depth_limit = tree.depth_limit;
  policy.feature_dim = tree.feature_dim;
  if (generator.type == "synthetic") {
    generator.synthetic.check();
    // The synthetic family cannot propose beyond the tree's breadth.
    mcts.breadth = std::min(mcts.breadth, tree.breadth_limit);
  }
  policy.check();
  train.check();
  mcts.check();
  if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
  if (sc_chains < 1) throw std::invalid_argument("sc_chains must be >= 1");
  if (tasks.type != "synthetic" && tasks.type != "file")
    throw std::invalid_argument("task source type must be synthetic or file");
  if (generator.type != "synthetic" && generator.type != "llm")
    throw std::invalid_argument("generator type must be synthetic or llm");
  if (tasks.type == "file" && tasks.path.empty())
    throw std::invalid_argument("file task source requires a path");
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

void parse_tasks(const json& j, TaskSourceConfig& t) {
  maybe(j, "type", t.type);
  maybe(j, "path", t.path);
  maybe(j, "eval_path", t.eval_path);
  maybe(j, "num_train", t.num_train);
  maybe(j, "num_eval", t.num_eval);
  maybe(j, "seed_base", t.seed_base);
}

void parse_synthetic(const json& j, SyntheticTaskConfig& s) {
  maybe(j, "on_path_mean", s.on_path_mean);
  maybe(j, "off_path_mean", s.off_path_mean);
  maybe(j, "noise_std", s.noise_std);
  maybe(j, "feature_shift", s.feature_shift);
}

void parse_llm(const json& j, LlmConfig& l) {
  maybe(j, "base_url", l.base_url);
  maybe(j, "model", l.model);
  maybe(j, "embed_model", l.embed_model);
  maybe(j, "temperature", l.temperature);
  maybe(j, "top_p", l.top_p);
  maybe(j, "max_tokens", l.max_tokens);
  maybe(j, "timeout_ms", l.timeout_ms);
  maybe(j, "max_retries", l.max_retries);
  maybe(j, "backoff_ms", l.backoff_ms);
  maybe(j, "answer_marker", l.answer_marker);
  maybe(j, "projection_seed", l.projection_seed);
}

void parse_episode(const json& j, EpisodeConfig& e) {
  maybe(j, "max_steps", e.max_steps);
  maybe(j, "discount", e.discount);
  maybe(j, "answer_marker", e.answer_marker);
  if (j.contains("costs")) {
    const auto& c = j["costs"];
    maybe(c, "expand", e.cost.expand_cost);
    maybe(c, "branch", e.cost.branch_cost);
    maybe(c, "backtrack", e.cost.backtrack_cost);
    maybe(c, "terminate", e.cost.terminate_cost);
  }
}

void parse_train(const json& j, TrainConfig& t) {
  maybe(j, "gamma", t.gamma);
  maybe(j, "gae_lambda", t.gae_lambda);
  maybe(j, "clip", t.clip);
  maybe(j, "entropy_weight", t.entropy_weight);
  maybe(j, "lr_policy", t.lr_policy);
  maybe(j, "lr_value", t.lr_value);
  maybe(j, "epochs_per_batch", t.epochs_per_batch);
  maybe(j, "value_epochs", t.value_epochs);
  maybe(j, "value_ridge", t.value_ridge);
  maybe(j, "minibatch_size", t.minibatch_size);
  maybe(j, "episodes_per_batch", t.episodes_per_batch);
  maybe(j, "total_episodes", t.total_episodes);
  maybe(j, "normalize_advantages", t.normalize_advantages);
  maybe(j, "plain_returns", t.plain_returns);
  maybe(j, "use_adam", t.use_adam);
  maybe(j, "eval_every_batches", t.eval_every_batches);
  maybe(j, "eval_episodes", t.eval_episodes);
}

void parse_policy(const json& j, PolicyConfig& p) {
  maybe(j, "k_max", p.k_max);
  maybe(j, "hidden", p.hidden);
  maybe(j, "layers", p.layers);
  maybe(j, "use_local_mpnn", p.use_local_mpnn);
  maybe(j, "use_global_attention", p.use_global_attention);
  maybe(j, "use_edge_features", p.use_edge_features);
}

void parse_mcts(const json& j, MCTSConfig& m) {
  maybe(j, "iterations", m.iterations);
  maybe(j, "uct_c", m.uct_c);
  maybe(j, "breadth", m.breadth);
  maybe(j, "oracle", m.oracle);
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  RunConfig c;
  maybe(j, "seed", c.seed);
  maybe(j, "out_dir", c.out_dir);
  maybe(j, "run_id", c.run_id);
  maybe(j, "jobs", c.jobs);
  maybe(j, "sc_chains", c.sc_chains);
  if (j.contains("tree")) {
    const auto& t = j["tree"];
    maybe(t, "depth_limit", c.tree.depth_limit);
    maybe(t, "breadth_limit", c.tree.breadth_limit);
    maybe(t, "feature_dim", c.tree.feature_dim);
  }
  // The MCTS breadth defaults to the tree's unless given explicitly.
  c.mcts.breadth = c.tree.breadth_limit;
  if (j.contains("tasks")) parse_tasks(j["tasks"], c.tasks);
  if (j.contains("generator")) {
    const auto& g = j["generator"];
    maybe(g, "type", c.generator.type);
    if (g.contains("synthetic")) parse_synthetic(g["synthetic"], c.generator.synthetic);
    if (g.contains("llm")) parse_llm(g["llm"], c.generator.llm);
  }
  if (j.contains("episode")) parse_episode(j["episode"], c.episode);
  if (j.contains("train")) parse_train(j["train"], c.train);
  if (j.contains("policy")) parse_policy(j["policy"], c.policy);
  if (j.contains("mcts")) parse_mcts(j["mcts"], c.mcts);
  c.finalize();
  return c;
}

RunConfig run_config_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_config_from_json_text(buf.str());
}

void write_run_config(const RunConfig& c, const std::string& path) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["run_id"] = c.run_id;
  j["jobs"] = c.jobs;
  j["sc_chains"] = c.sc_chains;
  j["tree"] = {{"depth_limit", c.tree.depth_limit},
               {"breadth_limit", c.tree.breadth_limit},
               {"feature_dim", c.tree.feature_dim}};
  j["tasks"] = {{"type", c.tasks.type},       {"path", c.tasks.path},
                {"eval_path", c.tasks.eval_path}, {"num_train", c.tasks.num_train},
                {"num_eval", c.tasks.num_eval},   {"seed_base", c.tasks.seed_base}};
  j["generator"] = {{"type", c.generator.type},
                    {"synthetic",
                     {{"on_path_mean", c.generator.synthetic.on_path_mean},
                      {"off_path_mean", c.generator.synthetic.off_path_mean},
                      {"noise_std", c.generator.synthetic.noise_std},
                      {"feature_shift", c.generator.synthetic.feature_shift}}},
                    {"llm",
                     {{"base_url", c.generator.llm.base_url},
                      {"model", c.generator.llm.model},
                      {"embed_model", c.generator.llm.embed_model},
                      {"temperature", c.generator.llm.temperature},
                      {"top_p", c.generator.llm.top_p},
                      {"max_tokens", c.generator.llm.max_tokens},
                      {"timeout_ms", c.generator.llm.timeout_ms},
                      {"max_retries", c.generator.llm.max_retries},
                      {"backoff_ms", c.generator.llm.backoff_ms},
                      {"answer_marker", c.generator.llm.answer_marker},
                      {"projection_seed", c.generator.llm.projection_seed}}}};
  j["episode"] = {{"max_steps", c.episode.max_steps},
                  {"discount", c.episode.discount},
                  {"answer_marker", c.episode.answer_marker},
                  {"costs",
                   {{"expand", c.episode.cost.expand_cost},
                    {"branch", c.episode.cost.branch_cost},
                    {"backtrack", c.episode.cost.backtrack_cost},
                    {"terminate", c.episode.cost.terminate_cost}}}};
  j["train"] = {{"gamma", c.train.gamma},
                {"gae_lambda", c.train.gae_lambda},
                {"clip", c.train.clip},
                {"entropy_weight", c.train.entropy_weight},
                {"lr_policy", c.train.lr_policy},
                {"lr_value", c.train.lr_value},
                {"epochs_per_batch", c.train.epochs_per_batch},
                {"value_epochs", c.train.value_epochs},
                {"value_ridge", c.train.value_ridge},
                {"minibatch_size", c.train.minibatch_size},
                {"episodes_per_batch", c.train.episodes_per_batch},
                {"total_episodes", c.train.total_episodes},
                {"normalize_advantages", c.train.normalize_advantages},
                {"plain_returns", c.train.plain_returns},
                {"use_adam", c.train.use_adam},
                {"eval_every_batches", c.train.eval_every_batches},
                {"eval_episodes", c.train.eval_episodes}};
  j["policy"] = {{"k_max", c.policy.k_max},
                 {"hidden", c.policy.hidden},
                 {"layers", c.policy.layers},
                 {"use_local_mpnn", c.policy.use_local_mpnn},
                 {"use_global_attention", c.policy.use_global_attention},
                 {"use_edge_features", c.policy.use_edge_features}};
  j["mcts"] = {{"iterations", c.mcts.iterations},
               {"uct_c", c.mcts.uct_c},
               {"breadth", c.mcts.breadth},
               {"oracle", c.mcts.oracle}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path);
  out << j.dump(2) << "\n";
}

TaskSets build_tasks(const RunConfig& config) {
  TaskSets sets;
  if (config.tasks.type == "file") {
    sets.train = load_tasks(config.tasks.path);
    if (!config.tasks.eval_path.empty()) {
      sets.eval = load_tasks(config.tasks.eval_path);
    } else {
      // Hold out the last fifth when no separate eval file is given.
      const std::size_t holdout = std::max<std::size_t>(1, sets.train.size() / 5);
      sets.eval.assign(sets.train.end() - static_cast<std::ptrdiff_t>(holdout), sets.train.end());
      sets.train.resize(sets.train.size() - holdout);
    }
    return sets;
  }
  char buf[32];
  for (int i = 0; i < config.tasks.num_train; ++i) {
    std::snprintf(buf, sizeof buf, "train-%04d", i);
    sets.train.push_back(
        make_synthetic_task(config.generator.synthetic, config.tasks.seed_base + i, buf));
  }
  for (int i = 0; i < config.tasks.num_eval; ++i) {
    std::snprintf(buf, sizeof buf, "eval-%04d", i);
    sets.eval.push_back(make_synthetic_task(
        config.generator.synthetic,
        config.tasks.seed_base + static_cast<std::uint64_t>(config.tasks.num_train) + i, buf));
  }
  return sets;
}

}  // namespace pgts
