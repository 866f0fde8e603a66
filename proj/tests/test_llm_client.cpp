#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pgts/llm_client.hpp"

using namespace pgts;
using nlohmann::json;

namespace {

json chat_response(const std::string& content, const std::vector<std::string>& tokens,
                   const std::vector<double>& logprobs, long completion_tokens) {
  json toks = json::array();
  for (size_t i = 0; i < tokens.size(); ++i)
    toks.push_back({{"token", tokens[i]}, {"logprob", logprobs[i]}});
  return json{{"choices",
               {{{"message", {{"role", "assistant"}, {"content", content}}},
                 {"logprobs", {{"content", toks}}}}}},
              {"usage", {{"completion_tokens", completion_tokens}}}};
}

json embedding_response(int dim) {
  std::vector<double> emb(static_cast<size_t>(dim));
  for (int i = 0; i < dim; ++i) emb[static_cast<size_t>(i)] = 0.01 * (i + 1);
  return json{{"data", {{{"embedding", emb}}}}};
}

struct TestServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  TestServer() {
    port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~TestServer() {
    server.stop();
    thread.join();
  }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

TaskInstance task() {
  TaskInstance t;
  t.task_id = "q1";
  t.prompt = "What is 6*7?";
  t.ground_truth = "42";
  return t;
}

LlmConfig config_for(const TestServer& server) {
  LlmConfig c;
  c.base_url = server.base_url();
  c.feature_dim = 4;
  c.max_retries = 2;
  c.backoff_ms = 1;
  c.timeout_ms = 5000;
  return c;
}

}  // namespace

TEST_CASE("mean logprob covers exactly the first sentence's tokens") {
  // Tokens reconstruct "Step one. Step two."; the first sentence spans the
  // first three tokens.
  std::vector<std::string> toks{"Step", " one", ".", " Step", " two", "."};
  std::vector<double> lps{-0.1, -0.2, -0.3, -5.0, -5.0, -5.0};
  const double got = mean_logprob_for_span(toks, lps, 9);
  CHECK(got == doctest::Approx((-0.1 - 0.2 - 0.3) / 3.0));
  CHECK_THROWS_AS(mean_logprob_for_span({}, {}, 4), LlmError);
}

TEST_CASE("embedding projection is deterministic with the right shape") {
  std::vector<double> emb{0.5, -0.25, 1.0, 0.75, -0.1};
  auto a = project_embedding(emb, 3, 9);
  auto b = project_embedding(emb, 3, 9);
  CHECK(a == b);
  CHECK(a.size() == 3);
  auto c = project_embedding(emb, 3, 10);
  CHECK(a != c);
  CHECK_THROWS_AS(project_embedding({}, 3, 9), LlmError);
}

TEST_CASE("llm step proposal: reward, finality, features and token accounting") {
  TestServer server;
  server.server.Post("/v1/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
    auto body = json::parse(req.body);
    CHECK(body.at("logprobs").get<bool>());
    CHECK(body.at("temperature").get<double>() == doctest::Approx(0.6));
    CHECK(body.at("top_p").get<double>() == doctest::Approx(0.9));
    res.set_content(
        chat_response("The answer is 42.", {"The answer is", " 42."}, {-0.5, -0.3}, 17).dump(),
        "application/json");
  });
  server.server.Post("/v1/embeddings", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(embedding_response(6).dump(), "application/json");
  });

  LlmGenerator gen(config_for(server));
  StepProposal p = gen.propose_step(task(), {task().prompt}, 0);
  CHECK(p.step_reward == doctest::Approx(std::exp(-0.4)).epsilon(1e-6));
  CHECK(p.step_reward == doctest::Approx(0.6703).epsilon(1e-3));
  CHECK(p.is_final);
  CHECK(p.content == "The answer is 42.");
  CHECK(p.features.size() == 4);
  CHECK(gen.cost().proposals == 1);
  CHECK(gen.cost().tokens == 17);
}

TEST_CASE("only the first sentence becomes the step") {
  TestServer server;
  server.server.Post("/v1/chat/completions", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(chat_response("First part. Second part.",
                                  {"First", " part", ".", " Second", " part", "."},
                                  {-0.2, -0.2, -0.2, -9.0, -9.0, -9.0}, 6)
                        .dump(),
                    "application/json");
  });
  server.server.Post("/v1/embeddings", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(embedding_response(6).dump(), "application/json");
  });
  LlmGenerator gen(config_for(server));
  StepProposal p = gen.propose_step(task(), {task().prompt}, 0);
  CHECK(p.content == "First part.");
  CHECK_FALSE(p.is_final);
  CHECK(p.step_reward == doctest::Approx(std::exp(-0.2)).epsilon(1e-6));
}

TEST_CASE("transient server errors are retried") {
  TestServer server;
  std::atomic<int> calls{0};
  server.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    if (calls.fetch_add(1) == 0) {
      res.status = 500;
      res.set_content("busy", "text/plain");
      return;
    }
    res.set_content(chat_response("Fine.", {"Fine", "."}, {-0.1, -0.1}, 2).dump(),
                    "application/json");
  });
  server.server.Post("/v1/embeddings", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(embedding_response(6).dump(), "application/json");
  });
  LlmGenerator gen(config_for(server));
  StepProposal p = gen.propose_step(task(), {task().prompt}, 0);
  CHECK(p.content == "Fine.");
  CHECK(calls.load() == 2);
}

TEST_CASE("persistent failures surface after the retry budget") {
  TestServer server;
  std::atomic<int> calls{0};
  server.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    calls.fetch_add(1);
    res.status = 503;
  });
  LlmGenerator gen(config_for(server));
  CHECK_THROWS_AS(gen.propose_step(task(), {task().prompt}, 0), LlmError);
  CHECK(calls.load() == 3);  // initial attempt + max_retries
}

TEST_CASE("missing logprobs are reported") {
  TestServer server;
  server.server.Post("/v1/chat/completions", [](const httplib::Request&, httplib::Response& res) {
    json r{{"choices", {{{"message", {{"role", "assistant"}, {"content", "Hi."}}}}}}};
    res.set_content(r.dump(), "application/json");
  });
  LlmGenerator gen(config_for(server));
  CHECK_THROWS_AS(gen.propose_step(task(), {task().prompt}, 0), LlmError);
}

TEST_CASE("api key from the environment rides the Authorization header") {
  TestServer server;
  std::string seen_auth;
  server.server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
    if (req.has_header("Authorization")) seen_auth = req.get_header_value("Authorization");
    res.set_content(embedding_response(6).dump(), "application/json");
  });
  setenv("PGTS_API_KEY", "sk-test-key", 1);
  LlmGenerator gen(config_for(server));
  unsetenv("PGTS_API_KEY");
  gen.root_features(task());
  CHECK(seen_auth == "Bearer sk-test-key");
}

TEST_CASE("root features come from the embeddings endpoint") {
  TestServer server;
  server.server.Post("/v1/embeddings", [](const httplib::Request& req, httplib::Response& res) {
    auto body = json::parse(req.body);
    CHECK(body.at("input").get<std::string>() == "What is 6*7?");
    res.set_content(embedding_response(8).dump(), "application/json");
  });
  LlmGenerator gen(config_for(server));
  auto f = gen.root_features(task());
  CHECK(f.size() == 4);
  for (double x : f) CHECK(std::isfinite(x));
}
