#include "pgts/llm_client.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pgts/rng.hpp"

namespace pgts {

using nlohmann::json;

struct LlmGenerator::Impl {
  httplib::Client client;
  std::string api_key;

  explicit Impl(const LlmConfig& cfg) : client(cfg.base_url) {
    client.set_connection_timeout(0, cfg.timeout_ms * 1000LL);
    client.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
    client.set_write_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
    if (const char* key = std::getenv("PGTS_API_KEY")) api_key = key;
  }

  httplib::Headers headers() const {
    httplib::Headers h{{"Content-Type", "application/json"}};
    if (!api_key.empty()) h.emplace("Authorization", "Bearer " + api_key);
    return h;
  }

  /// POST with exponential-backoff retries; every failure mode (transport,
  /// HTTP status, parse) is retried and then surfaced.
  json post_json(const std::string& path, const json& body, const LlmConfig& cfg) {
    std::string last_error;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(
            std::chrono::milliseconds(static_cast<long>(cfg.backoff_ms) << (attempt - 1)));
      auto res = client.Post(path, headers(), body.dump(), "application/json");
      if (!res) {
        last_error = "transport failure: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status < 200 || res->status >= 300) {
        last_error = "HTTP " + std::to_string(res->status) + " from " + path;
        continue;
      }
      try {
        return json::parse(res->body);
      } catch (const std::exception& e) {
        last_error = std::string("malformed response body: ") + e.what();
        continue;
      }
    }
    throw LlmError(path + " failed after " + std::to_string(cfg.max_retries + 1) +
                   " attempts; last error: " + last_error);
  }
};

LlmGenerator::LlmGenerator(LlmConfig config)
    : config_(std::move(config)), impl_(std::make_unique<Impl>(config_)) {
  if (config_.feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
}

LlmGenerator::~LlmGenerator() = default;

double mean_logprob_for_span(const std::vector<std::string>& token_texts,
                             const std::vector<double>& token_logprobs, std::size_t sentence_end) {
  if (token_texts.size() != token_logprobs.size())
    throw LlmError("token/logprob array length mismatch");
  double sum = 0.0;
  std::size_t covered = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < token_texts.size() && covered < sentence_end; ++i) {
    sum += token_logprobs[i];
    covered += token_texts[i].size();
    ++n;
  }
  if (n == 0) throw LlmError("no tokens cover the reasoning step");
  return sum / static_cast<double>(n);
}

std::vector<double> project_embedding(const std::vector<double>& embedding, int out_dim,
                                      std::uint64_t seed) {
  if (embedding.empty()) throw LlmError("empty embedding vector");
  std::vector<double> out(static_cast<std::size_t>(out_dim), 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(embedding.size()));
  for (int r = 0; r < out_dim; ++r) {
    // Row-seeded so the projection is identical regardless of call order.
    Rng rng(hash_combine(mix64(seed), static_cast<std::uint64_t>(r) + 1));
    double acc = 0.0;
    for (double x : embedding) acc += rng.normal() * x;
    out[static_cast<std::size_t>(r)] = acc * scale;
  }
  return out;
}

namespace {

json build_chat_request(const LlmConfig& cfg, const TaskInstance& task,
                        const std::vector<std::string>& path) {
  json messages = json::array();
  messages.push_back(
      {{"role", "system"},
       {"content", "Solve the problem step by step. Reply with exactly one new sentence "
                   "continuing the reasoning. When the reasoning is complete, state the result "
                   "as '" +
                       cfg.answer_marker + " X.'"}});
  std::string user = task.prompt;
  for (std::size_t i = 1; i < path.size(); ++i) {
    user += "\n";
    user += path[i];
  }
  messages.push_back({{"role", "user"}, {"content", user}});
  json req;
  req["model"] = cfg.model;
  req["messages"] = messages;
  req["temperature"] = cfg.temperature;
  req["top_p"] = cfg.top_p;
  req["max_tokens"] = cfg.max_tokens;
  req["logprobs"] = true;
  return req;
}

}  // namespace

std::vector<double> LlmGenerator::root_features(const TaskInstance& task) {
  json req;
  req["model"] = config_.embed_model;
  req["input"] = task.prompt;
  json res = impl_->post_json("/v1/embeddings", req, config_);
  try {
    auto emb = res.at("data").at(0).at("embedding").get<std::vector<double>>();
    return project_embedding(emb, config_.feature_dim, config_.projection_seed);
  } catch (const json::exception& e) {
    throw LlmError(std::string("embeddings response missing fields: ") + e.what());
  }
}

StepProposal LlmGenerator::propose_step(const TaskInstance& task,
                                        const std::vector<std::string>& path, int sibling_index) {
  (void)sibling_index;  // siblings are independent samples at temperature > 0
  json res = impl_->post_json("/v1/chat/completions", build_chat_request(config_, task, path),
                              config_);

  std::string content;
  std::vector<std::string> token_texts;
  std::vector<double> token_logprobs;
  long completion_tokens = 0;
  try {
    const auto& choice = res.at("choices").at(0);
    content = choice.at("message").at("content").get<std::string>();
    if (!choice.contains("logprobs") || choice["logprobs"].is_null())
      throw LlmError("response is missing logprobs");
    for (const auto& tok : choice.at("logprobs").at("content")) {
      token_texts.push_back(tok.at("token").get<std::string>());
      token_logprobs.push_back(tok.at("logprob").get<double>());
    }
    if (res.contains("usage") && res["usage"].contains("completion_tokens"))
      completion_tokens = res["usage"]["completion_tokens"].get<long>();
  } catch (const json::exception& e) {
    throw LlmError(std::string("chat response missing fields: ") + e.what());
  }

  const auto steps = split_steps(content);
  if (steps.empty()) throw LlmError("empty completion");
  const std::string& sentence = steps.front();

  // The tokens reconstruct the completion; average log-probability over the
  // tokens covering the first sentence's span in the raw text.
  std::size_t sentence_end = content.find(sentence);
  if (sentence_end == std::string::npos) sentence_end = 0;
  sentence_end += sentence.size();
  const double mean_lp = mean_logprob_for_span(token_texts, token_logprobs, sentence_end);

  json ereq;
  ereq["model"] = config_.embed_model;
  ereq["input"] = sentence;
  json eres = impl_->post_json("/v1/embeddings", ereq, config_);
  std::vector<double> features;
  try {
    auto emb = eres.at("data").at(0).at("embedding").get<std::vector<double>>();
    features = project_embedding(emb, config_.feature_dim, config_.projection_seed);
  } catch (const json::exception& e) {
    throw LlmError(std::string("embeddings response missing fields: ") + e.what());
  }

  count_generation(completion_tokens);

  StepProposal p;
  p.content = sentence;
  p.features = std::move(features);
  p.step_reward = std::min(1.0, std::max(0.0, std::exp(mean_lp)));
  p.is_final = detect_final(sentence, config_.answer_marker).has_value();
  return p;
}

}  // namespace pgts
