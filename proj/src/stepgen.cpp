#include "pgts/stepgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string_view>

#include <json.hpp>

#include "pgts/rng.hpp"

namespace pgts {

// ---------------------------------------------------------------------------
// Task file IO (declared in task.hpp)
// ---------------------------------------------------------------------------

std::vector<TaskInstance> load_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task file " + path);
  std::vector<TaskInstance> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    TaskInstance t;
    t.task_id = j.at("task_id").get<std::string>();
    t.prompt = j.at("prompt").get<std::string>();
    if (j.contains("ground_truth") && !j["ground_truth"].is_null())
      t.ground_truth = j["ground_truth"].get<std::string>();
    if (j.contains("seed") && !j["seed"].is_null()) t.seed = j["seed"].get<std::uint64_t>();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

void save_tasks(const std::vector<TaskInstance>& tasks, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open task file " + path + " for writing");
  for (const auto& t : tasks) {
    nlohmann::json j;
    j["task_id"] = t.task_id;
    j["prompt"] = t.prompt;
    if (t.ground_truth) j["ground_truth"] = *t.ground_truth;
    j["seed"] = t.seed;
    out << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Chain helpers
// ---------------------------------------------------------------------------

std::string chain_to_string(const std::vector<int>& chain) {
  std::string s;
  for (size_t i = 0; i < chain.size(); ++i) {
    if (i) s += '.';
    s += std::to_string(chain[i]);
  }
  return s;
}

std::vector<int> parse_chain(const std::string& text) {
  std::vector<int> chain;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, '.')) {
    if (token.empty()) continue;
    chain.push_back(std::stoi(token));
  }
  return chain;
}

namespace {

// Non-root synthetic contents look like "step 0.1" or, at the final depth,
// "step 0.1; The answer is 0.1." The chain sits between "step " and the
// first ';' or end of string.
std::vector<int> chain_of_content(const std::string& content) {
  constexpr std::string_view kPrefix = "step ";
  if (content.rfind(kPrefix, 0) != 0) return {};  // root (prompt) -> empty chain
  size_t end = content.find(';');
  std::string body = content.substr(kPrefix.size(),
                                    end == std::string::npos ? std::string::npos : end - kPrefix.size());
  return parse_chain(body);
}

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

std::uint64_t hash_path(std::uint64_t task_seed, const std::vector<std::string>& path,
                        int sibling_index) {
  std::uint64_t h = mix64(task_seed);
  for (const auto& s : path) h = hash_combine(h, hash_str(s));
  return hash_combine(h, static_cast<std::uint64_t>(sibling_index) + 0x51edULL);
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

void SyntheticTaskConfig::check() const {
  if (depth < 1 || breadth < 1) throw std::invalid_argument("synthetic depth/breadth must be >= 1");
  if (!(on_path_mean > off_path_mean))
    throw std::invalid_argument("on_path_mean must exceed off_path_mean");
  if (!std::isfinite(on_path_mean) || !std::isfinite(off_path_mean) || !std::isfinite(noise_std) ||
      !std::isfinite(feature_shift) || noise_std < 0)
    throw std::invalid_argument("synthetic config values must be finite");
  if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
  double leaves = std::pow(static_cast<double>(breadth), static_cast<double>(depth));
  if (leaves > 1e6) throw std::invalid_argument("B^D exceeds the exhaustive-oracle guard (10^6)");
}

SyntheticGenerator::SyntheticGenerator(SyntheticTaskConfig config) : config_(config) {
  config_.check();
}

std::vector<int> SyntheticGenerator::planted_chain(const TaskInstance& task) const {
  Rng rng(hash_combine(mix64(task.seed), hash_str("planted-chain")));
  std::vector<int> chain(static_cast<size_t>(config_.depth));
  for (auto& c : chain) c = rng.uniform_int(config_.breadth);
  return chain;
}

std::vector<double> SyntheticGenerator::root_features(const TaskInstance& task) {
  Rng rng(hash_combine(mix64(task.seed), hash_str("root-features")));
  std::vector<double> f(static_cast<size_t>(config_.feature_dim));
  for (auto& x : f) x = rng.normal();
  f[0] += config_.feature_shift;  // the root trivially sits on the planted path
  return f;
}

StepProposal SyntheticGenerator::propose_step(const TaskInstance& task,
                                              const std::vector<std::string>& path,
                                              int sibling_index) {
  if (path.empty()) throw std::invalid_argument("path must start with the prompt");
  if (sibling_index < 0 || sibling_index >= config_.breadth)
    throw std::invalid_argument("sibling_index out of range");

  const std::vector<int> planted = planted_chain(task);
  std::vector<int> parent_chain = chain_of_content(path.back());
  const int parent_depth = static_cast<int>(parent_chain.size());
  if (static_cast<int>(path.size()) != parent_depth + 1)
    throw std::invalid_argument("path length does not match encoded chain depth");
  if (parent_depth >= config_.depth) throw std::invalid_argument("parent already at depth limit");

  bool on_path = true;
  for (int i = 0; i < parent_depth; ++i)
    if (parent_chain[static_cast<size_t>(i)] != planted[static_cast<size_t>(i)]) on_path = false;
  if (sibling_index != planted[static_cast<size_t>(parent_depth)]) on_path = false;

  Rng rng(hash_path(task.seed, path, sibling_index));
  const double mean = on_path ? config_.on_path_mean : config_.off_path_mean;
  const double reward = clamp01(rng.normal(mean, config_.noise_std));

  std::vector<double> features(static_cast<size_t>(config_.feature_dim));
  for (auto& x : features) x = rng.normal();
  if (on_path) features[0] += config_.feature_shift;

  std::vector<int> chain = parent_chain;
  chain.push_back(sibling_index);
  const bool is_final = static_cast<int>(chain.size()) == config_.depth;
  std::string chain_str = chain_to_string(chain);
  std::string content = "step " + chain_str;
  if (is_final) content += "; The answer is " + chain_str + ".";

  count_generation(0);

  StepProposal p;
  p.content = std::move(content);
  p.features = std::move(features);
  p.step_reward = reward;
  p.is_final = is_final;
  return p;
}

TaskInstance make_synthetic_task(const SyntheticTaskConfig& config, std::uint64_t seed,
                                 const std::string& task_id) {
  SyntheticGenerator gen(config);
  TaskInstance t;
  t.task_id = task_id;
  t.seed = seed;
  t.prompt = "Find the hidden index chain for task " + task_id + ".";
  t.ground_truth = chain_to_string(gen.planted_chain(t));
  return t;
}

// ---------------------------------------------------------------------------
// Text utilities
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

bool is_terminal_punct(char c) { return c == '.' || c == '!' || c == '?'; }

}  // namespace

std::vector<std::string> split_steps(const std::string& completion) {
  std::vector<std::string> steps;
  std::string current;
  for (size_t i = 0; i < completion.size(); ++i) {
    char c = completion[i];
    if (c == '\n') {
      std::string seg = trim(current);
      if (!seg.empty()) steps.push_back(std::move(seg));
      current.clear();
      continue;
    }
    current += c;
    if (is_terminal_punct(c)) {
      const bool at_end = i + 1 == completion.size();
      const bool before_ws = !at_end && std::isspace(static_cast<unsigned char>(completion[i + 1]));
      if (at_end || before_ws) {
        std::string seg = trim(current);
        if (!seg.empty()) steps.push_back(std::move(seg));
        current.clear();
      }
    }
  }
  std::string seg = trim(current);
  if (!seg.empty()) steps.push_back(std::move(seg));
  return steps;
}

std::optional<std::string> detect_final(const std::string& content, const std::string& marker) {
  if (marker.empty()) return std::nullopt;
  auto lower = [](const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
  };
  const std::string hay = lower(content);
  const std::string needle = lower(marker);
  size_t pos = hay.find(needle);
  if (pos == std::string::npos) return std::nullopt;
  std::string answer = trim(content.substr(pos + needle.size()));
  while (!answer.empty()) {
    char last = answer.back();
    if (last == '.' || last == '!' || last == '?' || last == ',' || last == ';' || last == ':') {
      answer.pop_back();
    } else {
      break;
    }
  }
  answer = trim(answer);
  return answer;
}

// ---------------------------------------------------------------------------
// Exhaustive oracle
// ---------------------------------------------------------------------------

LeafSearchResult exhaustive_best_leaf(const TaskInstance& task, const SyntheticTaskConfig& config) {
  config.check();
  SyntheticGenerator gen(config);

  LeafSearchResult best;
  best.path_reward_sum = -std::numeric_limits<double>::infinity();

  // Depth-first over all B^D chains, reusing the reward prefix.
  std::vector<int> chain;
  std::vector<std::string> path{task.prompt};

  auto recurse = [&](auto&& self, int depth, double sum) -> void {
    if (depth == config.depth) {
      if (sum > best.path_reward_sum) {
        best.path_reward_sum = sum;
        best.chain = chain;
      }
      return;
    }
    for (int idx = 0; idx < config.breadth; ++idx) {
      StepProposal p = gen.propose_step(task, path, idx);
      chain.push_back(idx);
      path.push_back(p.content);
      self(self, depth + 1, sum + p.step_reward);
      chain.pop_back();
      path.pop_back();
    }
  };
  recurse(recurse, 0, 0.0);

  if (task.ground_truth)
    best.matches_ground_truth = chain_to_string(best.chain) == *task.ground_truth;
  return best;
}

}  // namespace pgts
