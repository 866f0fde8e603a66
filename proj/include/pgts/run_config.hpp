#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pgts/baselines.hpp"
#include "pgts/llm_client.hpp"
#include "pgts/mdp.hpp"
#include "pgts/policy.hpp"
#include "pgts/stepgen.hpp"
#include "pgts/trainer.hpp"
#include "pgts/tree.hpp"

namespace pgts {

struct TaskSourceConfig {
  std::string type = "synthetic";  // "synthetic" | "file"
  std::string path;                // file mode: training tasks
  std::string eval_path;           // file mode: held-out tasks (optional)
  int num_train = 1000;
  int num_eval = 200;
  std::uint64_t seed_base = 1000;  // synthetic task seeds are seed_base + index
};

struct GeneratorConfig {
  std::string type = "synthetic";  // "synthetic" | "llm"
  SyntheticTaskConfig synthetic;
  LlmConfig llm;
};

/// Everything a run needs; fully serializable so a synthetic run is
/// reproducible from this plus the seed alone.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::string run_id = "run";
  int jobs = 1;
  int sc_chains = 4;

  TaskSourceConfig tasks;
  GeneratorConfig generator;
  TreeLimits tree;  // D, B, F are authoritative here
  EpisodeConfig episode;
  TrainConfig train;
  PolicyConfig policy;
  MCTSConfig mcts;

  /// Propagates tree limits into the dependent blocks and validates.
  void finalize();
};

RunConfig run_config_from_json_file(const std::string& path);
RunConfig run_config_from_json_text(const std::string& text);
void write_run_config(const RunConfig& config, const std::string& path);

/// Task materialization per the source config.
struct TaskSets {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval;
};
TaskSets build_tasks(const RunConfig& config);

}  // namespace pgts
