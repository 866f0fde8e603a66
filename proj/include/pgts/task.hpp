#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace pgts {

/// One reasoning problem. `ground_truth` is required for training (the
/// terminal reward compares against it); evaluation can run without it.
/// `seed` drives the synthetic task family.
struct TaskInstance {
  std::string task_id;
  std::string prompt;
  std::optional<std::string> ground_truth;
  std::uint64_t seed = 0;
};

/// One generated reasoning step, ready to be attached to the tree.
struct StepProposal {
  std::string content;
  std::vector<double> features;  // dimension F, all finite
  double step_reward = 0.0;      // R(s,a), clamped to [0,1]
  bool is_final = false;
};

struct GenerationCost {
  long proposals = 0;
  long tokens = 0;
};

/// Task file IO: line-delimited JSON, one object per line
/// {task_id, prompt, ground_truth?, seed?}.
std::vector<TaskInstance> load_tasks(const std::string& path);
void save_tasks(const std::vector<TaskInstance>& tasks, const std::string& path);

}  // namespace pgts
