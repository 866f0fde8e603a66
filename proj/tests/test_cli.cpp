#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pgts/cli.hpp"

using namespace pgts;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "pgts_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

RunConfig tiny_config(const std::string& out) {
  RunConfig c;
  c.seed = 5;
  c.out_dir = out;
  c.tree = TreeLimits{2, 2, 6};
  c.tasks.num_train = 8;
  c.tasks.num_eval = 8;
  c.episode.max_steps = 12;
  c.train.total_episodes = 32;
  c.train.episodes_per_batch = 8;
  c.train.epochs_per_batch = 2;
  c.train.minibatch_size = 32;
  c.train.use_adam = true;
  c.train.eval_every_batches = 2;
  c.train.eval_episodes = 8;
  c.policy.hidden = 8;
  c.policy.k_max = 4;
  c.mcts.iterations = 6;
  c.finalize();
  return c;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::string make_zero_chain_task_file(const std::string& dir) {
  SyntheticTaskConfig synth;
  synth.depth = 2;
  synth.breadth = 2;
  synth.feature_dim = 6;
  SyntheticGenerator gen(synth);
  std::vector<TaskInstance> picked;
  for (std::uint64_t seed = 0; picked.size() < 6 && seed < 5000; ++seed) {
    TaskInstance t = make_synthetic_task(synth, seed, "z" + std::to_string(seed));
    if (*t.ground_truth == "0.0") picked.push_back(t);
  }
  REQUIRE(picked.size() == 6);
  const std::string path = dir + "/zero_tasks.jsonl";
  save_tasks(picked, path);
  return path;
}

}  // namespace

TEST_CASE("config json parsing, overrides and validation") {
  RunConfig c = run_config_from_json_text(R"({
    "seed": 11,
    "tree": {"depth_limit": 3, "breadth_limit": 2, "feature_dim": 8},
    "episode": {"costs": {"expand": 0.15}},
    "train": {"total_episodes": 64},
    "policy": {"hidden": 16}
  })");
  CHECK(c.seed == 11);
  CHECK(c.tree.depth_limit == 3);
  CHECK(c.episode.cost.expand_cost == doctest::Approx(0.15));
  CHECK(c.train.total_episodes == 64);
  CHECK(c.policy.hidden == 16);
  CHECK(c.policy.depth_limit == 3);   // propagated from tree
  CHECK(c.policy.feature_dim == 8);   // propagated from tree
  CHECK(c.generator.synthetic.depth == 3);
  CHECK(c.mcts.breadth == 2);         // defaults to the tree's breadth

  CHECK_THROWS_AS(run_config_from_json_text(R"({"tree": {"breadth_limit": 0}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"train": {"clip": 1.5}})"), std::invalid_argument);

  const std::string dir = tmp_dir("cfg");
  write_run_config(c, dir + "/config.json");
  RunConfig loaded = run_config_from_json_file(dir + "/config.json");
  CHECK(loaded.seed == c.seed);
  CHECK(loaded.tree.depth_limit == c.tree.depth_limit);
  CHECK(loaded.episode.cost.expand_cost == doctest::Approx(c.episode.cost.expand_cost));
}

TEST_CASE("cmd_train writes the curve csv and checkpoints; resume continues the count") {
  const std::string out = tmp_dir("train");
  RunConfig config = tiny_config(out);
  REQUIRE(cli::cmd_train(config, std::nullopt) == 0);

  auto lines = read_lines(out + "/curve.csv");
  REQUIRE(lines.size() >= 2);
  CHECK(lines[0] ==
        "batch,episodes_seen,mean_traj_reward,mean_entropy,policy_loss,value_loss,eval_success_rate");

  const std::string ckpt = out + "/run-32.ckpt";
  REQUIRE(fs::exists(ckpt));
  auto [params, meta] = PolicyParams::load_checkpoint(ckpt);
  CHECK(meta.episodes_seen == 32);

  // Resume: double the budget and continue from the saved state.
  RunConfig more = config;
  more.out_dir = tmp_dir("train-resume");
  more.train.total_episodes = 64;
  REQUIRE(cli::cmd_train(more, ckpt) == 0);
  auto resumed = read_lines(more.out_dir + "/curve.csv");
  // Rows only cover the resumed half; episode counters continue upward.
  std::istringstream first_row(resumed[1]);
  std::string batch_field, episodes_field;
  std::getline(first_row, batch_field, ',');
  std::getline(first_row, episodes_field, ',');
  CHECK(std::stol(episodes_field) > 32);
  REQUIRE(fs::exists(more.out_dir + "/run-64.ckpt"));
}

TEST_CASE("cmd_eval greedy scores a planted-index-zero suite perfectly") {
  const std::string out = tmp_dir("eval-greedy");
  RunConfig config = tiny_config(out);
  config.generator.synthetic.noise_std = 0.0;
  const std::string task_file = make_zero_chain_task_file(out);
  config.tasks.type = "file";
  config.tasks.path = task_file;
  config.tasks.eval_path = task_file;
  config.finalize();

  REQUIRE(cli::cmd_eval(config, "greedy", std::nullopt) == 0);
  auto lines = read_lines(out + "/eval.csv");
  REQUIRE(lines.size() == 1 + 6 + 1);  // header + rows + summary

  // Summary success_rate equals the mean of per-row correct flags.
  double correct_sum = 0.0;
  for (size_t i = 1; i + 1 < lines.size(); ++i) {
    std::istringstream row(lines[i]);
    std::string method, task_id, correct;
    std::getline(row, method, ',');
    std::getline(row, task_id, ',');
    std::getline(row, correct, ',');
    correct_sum += std::stod(correct);
  }
  std::istringstream summary(lines.back());
  std::string method, task_id, rate;
  std::getline(summary, method, ',');
  std::getline(summary, task_id, ',');
  std::getline(summary, rate, ',');
  CHECK(task_id == "ALL");
  CHECK(std::stod(rate) == doctest::Approx(correct_sum / 6.0));
  CHECK(std::stod(rate) == doctest::Approx(1.0));
}

TEST_CASE("cmd_eval pgts runs with a random-init checkpoint") {
  const std::string out = tmp_dir("eval-pgts");
  RunConfig config = tiny_config(out);
  PolicyParams params = PolicyParams::random_init(config.policy, 3);
  const std::string ckpt = out + "/init.ckpt";
  params.save_checkpoint(ckpt, {config.seed, 0});
  REQUIRE(cli::cmd_eval(config, "pgts", ckpt) == 0);
  auto lines = read_lines(out + "/eval.csv");
  CHECK(lines.size() == 1 + 8 + 1);

  // Missing checkpoint is an error for pgts methods.
  CHECK(cli::cmd_eval(config, "pgts", std::nullopt) != 0);
}

TEST_CASE("cmd_compare emits method-by-task rows plus summaries and unit greedy ratio") {
  const std::string out = tmp_dir("compare");
  RunConfig config = tiny_config(out);
  config.tasks.num_eval = 5;
  REQUIRE(cli::cmd_compare(config, {"greedy", "mcts-best"}, std::nullopt) == 0);

  auto lines = read_lines(out + "/compare.csv");
  CHECK(lines.size() == 1 + 2 * 5 + 2);  // header + methods x tasks + summary per method

  auto ratios = read_lines(out + "/ratios.csv");
  REQUIRE(ratios.size() == 3);
  std::istringstream greedy_row(ratios[1]);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(greedy_row, field, ',')) fields.push_back(field);
  REQUIRE(fields.size() == 6);
  CHECK(fields[0] == "greedy");
  CHECK(std::stod(fields[4]) == doctest::Approx(1.0));  // greedy normalized to itself

  // Fewer than two methods is refused.
  CHECK(cli::cmd_compare(config, {"greedy"}, std::nullopt) != 0);
}

TEST_CASE("evaluate_method is independent of the jobs count") {
  RunConfig config = tiny_config(tmp_dir("jobs"));
  TaskSets tasks = build_tasks(config);
  config.jobs = 1;
  auto rows1 = cli::evaluate_method("greedy", config, tasks.eval, std::nullopt);
  config.jobs = 3;
  auto rows2 = cli::evaluate_method("greedy", config, tasks.eval, std::nullopt);
  REQUIRE(rows1.size() == rows2.size());
  for (size_t i = 0; i < rows1.size(); ++i) {
    CHECK(rows1[i].task_id == rows2[i].task_id);
    CHECK(rows1[i].correct == rows2[i].correct);
    CHECK(rows1[i].traj_reward == rows2[i].traj_reward);
    CHECK(rows1[i].proposals == rows2[i].proposals);
  }
}

TEST_CASE("cmd_rollout prints a terminated trajectory and writes a valid tree") {
  const std::string out = tmp_dir("rollout");
  RunConfig config = tiny_config(out);
  PolicyParams params = PolicyParams::random_init(config.policy, 3);
  const std::string ckpt = out + "/init.ckpt";
  params.save_checkpoint(ckpt, {config.seed, 0});

  REQUIRE(cli::cmd_rollout(config, ckpt, "eval-0003") == 0);
  REQUIRE(fs::exists(out + "/trajectory.jsonl"));
  REQUIRE(fs::exists(out + "/tree.jsonl"));
  auto tree = load_tree(out + "/tree.jsonl", out + "/tree_features.bin", config.tree);
  tree.validate();

  // Re-running with the same seed reproduces the identical trajectory.
  auto first = read_lines(out + "/trajectory.jsonl");
  REQUIRE(cli::cmd_rollout(config, ckpt, "eval-0003") == 0);
  CHECK(read_lines(out + "/trajectory.jsonl") == first);

  CHECK(cli::cmd_rollout(config, ckpt, "no-such-task") != 0);
}
