#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "pgts/rng.hpp"
#include "pgts/stepgen.hpp"

using namespace pgts;

namespace {

SyntheticTaskConfig small_config(int depth = 2, int breadth = 2, double noise = 0.0) {
  SyntheticTaskConfig c;
  c.depth = depth;
  c.breadth = breadth;
  c.noise_std = noise;
  c.feature_dim = 4;
  return c;
}

std::uint64_t find_seed_with_chain(const SyntheticTaskConfig& config, const std::vector<int>& want) {
  SyntheticGenerator gen(config);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    TaskInstance t = make_synthetic_task(config, seed, "probe");
    if (gen.planted_chain(t) == want) return seed;
  }
  FAIL("no seed with the requested planted chain");
  return 0;
}

}  // namespace

TEST_CASE("synthetic proposals follow the planted chain") {
  auto config = small_config();
  SyntheticGenerator gen(config);
  const std::uint64_t seed = find_seed_with_chain(config, {0, 1});
  TaskInstance task = make_synthetic_task(config, seed, "t");
  CHECK(*task.ground_truth == "0.1");

  // Walk the planted chain: index 0 from the root, then index 1.
  StepProposal s1 = gen.propose_step(task, {task.prompt}, 0);
  CHECK_FALSE(s1.is_final);
  CHECK(s1.step_reward == doctest::Approx(0.8));  // on-path, zero noise
  StepProposal s2 = gen.propose_step(task, {task.prompt, s1.content}, 1);
  CHECK(s2.is_final);
  CHECK(s2.step_reward == doctest::Approx(0.8));
  CHECK(detect_final(s2.content).value() == "0.1");

  // Any deviation is off-path from that point on.
  StepProposal off = gen.propose_step(task, {task.prompt}, 1);
  CHECK(off.step_reward == doctest::Approx(0.3));
  StepProposal off2 = gen.propose_step(task, {task.prompt, off.content}, 1);
  CHECK(off2.step_reward == doctest::Approx(0.3));  // broken prefix stays broken
}

TEST_CASE("synthetic proposals are bit-identical across calls and generators") {
  auto config = small_config(3, 2, 0.1);
  SyntheticGenerator g1(config), g2(config);
  TaskInstance task = make_synthetic_task(config, 12345, "t");
  for (int idx = 0; idx < 2; ++idx) {
    StepProposal a = g1.propose_step(task, {task.prompt}, idx);
    StepProposal b = g2.propose_step(task, {task.prompt}, idx);
    CHECK(a.content == b.content);
    CHECK(a.step_reward == b.step_reward);
    CHECK(a.is_final == b.is_final);
    REQUIRE(a.features.size() == b.features.size());
    for (size_t i = 0; i < a.features.size(); ++i) CHECK(a.features[i] == b.features[i]);
  }
  // Root features are reset-stable too.
  auto r1 = g1.root_features(task);
  auto r2 = g2.root_features(task);
  CHECK(r1 == r2);
}

TEST_CASE("on-path features carry the shift on the first coordinate") {
  auto config = small_config(2, 2, 0.0);
  config.feature_shift = 10.0;  // large enough to dominate the unit noise
  SyntheticGenerator gen(config);
  const std::uint64_t seed = find_seed_with_chain(config, {1, 0});
  TaskInstance task = make_synthetic_task(config, seed, "t");
  StepProposal on = gen.propose_step(task, {task.prompt}, 1);
  StepProposal off = gen.propose_step(task, {task.prompt}, 0);
  CHECK(on.features[0] > off.features[0] + 5.0);
}

TEST_CASE("step rewards are clamped to [0,1]") {
  auto config = small_config(2, 2, 5.0);  // huge noise forces clamping
  SyntheticGenerator gen(config);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    TaskInstance task = make_synthetic_task(config, seed, "t");
    for (int idx = 0; idx < 2; ++idx) {
      StepProposal p = gen.propose_step(task, {task.prompt}, idx);
      CHECK(p.step_reward >= 0.0);
      CHECK(p.step_reward <= 1.0);
    }
  }
}

TEST_CASE("split_steps segments sentences") {
  CHECK(split_steps("Step one. Step two.") == std::vector<std::string>{"Step one.", "Step two."});
  CHECK(split_steps("a\nb") == std::vector<std::string>{"a", "b"});
  CHECK(split_steps("").empty());
  CHECK(split_steps("Is it 3.14? Yes!") == std::vector<std::string>{"Is it 3.14?", "Yes!"});
  CHECK(split_steps("no terminal punct") == std::vector<std::string>{"no terminal punct"});
}

TEST_CASE("split_steps round-trips non-whitespace characters") {
  Rng rng(4);
  const std::string alphabet = "ab .!?\nx3.1";
  for (int trial = 0; trial < 200; ++trial) {
    std::string input;
    const int len = rng.uniform_int(60);
    for (int i = 0; i < len; ++i)
      input += alphabet[static_cast<size_t>(rng.uniform_int(static_cast<int>(alphabet.size())))];
    std::string joined;
    for (const auto& s : split_steps(input)) joined += s;
    auto strip = [](const std::string& s) {
      std::string out;
      for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) out += c;
      return out;
    };
    CHECK(strip(joined) == strip(input));
  }
}

TEST_CASE("detect_final extracts answers") {
  CHECK(detect_final("The answer is 42.").value() == "42");
  CHECK_FALSE(detect_final("Therefore x=3").has_value());
  CHECK(detect_final("the answer is  7").value() == "7");
  CHECK(detect_final("so THE ANSWER IS 0.1.").value() == "0.1");
  CHECK(detect_final("The answer is x!?").value() == "x");
}

TEST_CASE("exhaustive oracle finds the planted chain without noise") {
  auto config = small_config(2, 2, 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    TaskInstance task = make_synthetic_task(config, seed, "t");
    auto best = exhaustive_best_leaf(task, config);
    CHECK(best.matches_ground_truth);
    CHECK(best.path_reward_sum == doctest::Approx(1.6));
    CHECK(chain_to_string(best.chain) == *task.ground_truth);
  }
}

TEST_CASE("single-deviation leaves cap at 1.1 without noise") {
  auto config = small_config(2, 2, 0.0);
  SyntheticGenerator gen(config);
  const std::uint64_t seed = find_seed_with_chain(config, {0, 0});
  TaskInstance task = make_synthetic_task(config, seed, "t");
  // Deviate at the second step only: first on-path (0.8), second off (0.3).
  StepProposal s1 = gen.propose_step(task, {task.prompt}, 0);
  StepProposal s2 = gen.propose_step(task, {task.prompt, s1.content}, 1);
  CHECK(s1.step_reward + s2.step_reward == doctest::Approx(1.1));
}

TEST_CASE("noisy oracle value upper-bounds random chains") {
  auto config = small_config(3, 2, 0.1);
  Rng rng(88);
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    TaskInstance task = make_synthetic_task(config, seed, "t");
    auto best = exhaustive_best_leaf(task, config);
    SyntheticGenerator gen(config);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<std::string> path{task.prompt};
      double sum = 0.0;
      for (int d = 0; d < config.depth; ++d) {
        StepProposal p = gen.propose_step(task, path, rng.uniform_int(config.breadth));
        sum += p.step_reward;
        path.push_back(p.content);
      }
      CHECK(sum <= best.path_reward_sum + 1e-12);
    }
  }
}

TEST_CASE("exactly one on-path chain exists") {
  auto config = small_config(2, 2, 0.0);
  SyntheticGenerator gen(config);
  TaskInstance task = make_synthetic_task(config, 7, "t");
  int full_reward_leaves = 0;
  for (int c1 = 0; c1 < 2; ++c1)
    for (int c2 = 0; c2 < 2; ++c2) {
      StepProposal s1 = gen.propose_step(task, {task.prompt}, c1);
      StepProposal s2 = gen.propose_step(task, {task.prompt, s1.content}, c2);
      const double sum = s1.step_reward + s2.step_reward;
      if (sum == doctest::Approx(1.6)) ++full_reward_leaves;
    }
  CHECK(full_reward_leaves == 1);
}

TEST_CASE("generation cost counts proposals and never decreases") {
  auto config = small_config();
  SyntheticGenerator gen(config);
  TaskInstance task = make_synthetic_task(config, 3, "t");
  CHECK(gen.cost().proposals == 0);
  CHECK(gen.cost().tokens == 0);
  long last = 0;
  for (int i = 0; i < 3; ++i) {
    gen.propose_step(task, {task.prompt}, i % 2);
    CHECK(gen.cost().proposals >= last);
    last = gen.cost().proposals;
  }
  CHECK(gen.cost().proposals == 3);
  CHECK(gen.cost().tokens == 0);
}

TEST_CASE("synthetic config validation") {
  SyntheticTaskConfig bad = small_config();
  bad.on_path_mean = 0.2;  // below off_path_mean
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);
  SyntheticTaskConfig huge = small_config(30, 4, 0.1);
  CHECK_THROWS_AS(huge.check(), std::invalid_argument);  // B^D guard
  SyntheticTaskConfig ok = small_config();
  CHECK_NOTHROW(ok.check());
}

TEST_CASE("task file round-trip") {
  auto config = small_config();
  std::vector<TaskInstance> tasks;
  for (int i = 0; i < 5; ++i)
    tasks.push_back(make_synthetic_task(config, 100 + static_cast<std::uint64_t>(i),
                                        "file-" + std::to_string(i)));
  tasks[2].ground_truth.reset();
  const std::string path = "/tmp/pgts_tasks_test.jsonl";
  save_tasks(tasks, path);
  auto loaded = load_tasks(path);
  REQUIRE(loaded.size() == tasks.size());
  for (size_t i = 0; i < tasks.size(); ++i) {
    CHECK(loaded[i].task_id == tasks[i].task_id);
    CHECK(loaded[i].prompt == tasks[i].prompt);
    CHECK(loaded[i].ground_truth == tasks[i].ground_truth);
    CHECK(loaded[i].seed == tasks[i].seed);
  }
}
