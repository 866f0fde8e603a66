#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pgts/stepgen.hpp"

namespace pgts {

/// OpenAI-compatible endpoint settings. The credential comes from the
/// PGTS_API_KEY environment variable, never from config files.
struct LlmConfig {
  std::string base_url = "http://127.0.0.1:8080";
  std::string model = "default";
  std::string embed_model = "default-embed";
  double temperature = 0.6;
  double top_p = 0.9;
  int max_tokens = 256;
  int timeout_ms = 30000;
  int max_retries = 3;
  int backoff_ms = 100;
  std::string answer_marker = "The answer is";
  int feature_dim = 32;  // F after the seeded random projection
  std::uint64_t projection_seed = 0;
};

class LlmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Step generator backed by a chat-completions endpoint with logprobs plus
/// an embeddings endpoint for node features. One sentence per step; the
/// step reward is the geometric-mean token probability of that sentence.
class LlmGenerator final : public StepGenerator {
 public:
  explicit LlmGenerator(LlmConfig config);
  ~LlmGenerator() override;

  StepProposal propose_step(const TaskInstance& task, const std::vector<std::string>& path,
                            int sibling_index) override;
  std::vector<double> root_features(const TaskInstance& task) override;
  int feature_dim() const override { return config_.feature_dim; }

  const LlmConfig& config() const { return config_; }

 private:
  struct Impl;
  LlmConfig config_;
  std::unique_ptr<Impl> impl_;
};

/// Mean log-probability of the tokens covering the first `sentence_end`
/// characters of the completion. Exposed for tests.
double mean_logprob_for_span(const std::vector<std::string>& token_texts,
                             const std::vector<double>& token_logprobs, std::size_t sentence_end);

/// Fixed seeded Gaussian projection of an embedding to `out_dim` entries.
std::vector<double> project_embedding(const std::vector<double>& embedding, int out_dim,
                                      std::uint64_t seed);

}  // namespace pgts
