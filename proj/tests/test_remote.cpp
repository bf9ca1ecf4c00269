#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>

#include <httplib.h>

#include "demark/remote_oracle.hpp"

using namespace demark;

namespace {

/// Local stand-in for a completions endpoint; `handler` decides each reply.
class MockServer {
 public:
  using Handler = std::function<void(const nlohmann::json&, httplib::Response&)>;

  explicit MockServer(Handler handler) : handler_(std::move(handler)) {
    auto serve = [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      last_auth_ = req.get_header_value("Authorization");
      last_body_ = nlohmann::json::parse(req.body);
      handler_(last_body_, res);
    };
    server_.Post("/v1/completions", serve);
    server_.Post("/v1/chat/completions", serve);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int hits() const { return hits_.load(); }
  const std::string& last_auth() const { return last_auth_; }
  const nlohmann::json& last_body() const { return last_body_; }

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> hits_{0};
  std::string last_auth_;
  nlohmann::json last_body_;
};

nlohmann::json completion_with(const nlohmann::json& top) {
  return {{"choices", {{{"text", " x"}, {"logprobs", {{"top_logprobs", {top}}}}}}}};
}

RemoteConfig config_for(const MockServer& s) {
  ::setenv("DEMARK_TEST_KEY", "sk-test", 1);
  return RemoteConfig::from_json({{"base_url", s.url()},
                                  {"model", "mock"},
                                  {"api_key_env", "DEMARK_TEST_KEY"},
                                  {"vocab_size", 50},
                                  {"initial_backoff_ms", 1},
                                  {"max_backoff_ms", 2},
                                  {"timeout_ms", 2000}});
}

}  // namespace

TEST(RemoteOracle, WellFormedResponse) {
  MockServer s([](const nlohmann::json&, httplib::Response& res) {
    res.set_content(completion_with({{" 7", std::log(0.6)}, {" 9", std::log(0.3)}, {" 4", std::log(0.1)}}).dump(),
                    "application/json");
  });
  const RemoteOracle o(config_for(s));
  const auto p = o.probe_exact({TokenSeq{3, 4}, 7, 9, ProbeOrder::ij});
  EXPECT_NEAR(p.p_first, 0.6, 1e-12);
  EXPECT_NEAR(p.p_second, 0.3, 1e-12);
  EXPECT_FALSE(p.low_confidence);
  EXPECT_EQ(s.hits(), 1);
  EXPECT_EQ(o.query_count(), 1u);
  EXPECT_EQ(s.last_auth(), "Bearer sk-test");
  EXPECT_EQ(s.last_body()["logprobs"], 20);
  const std::string prompt = s.last_body()["prompt"];
  EXPECT_NE(prompt.find("\"3 4 7\" or \"3 4 9\""), std::string::npos);
}

TEST(RemoteOracle, MissingCandidateIsFlooredAndFlagged) {
  MockServer s([](const nlohmann::json&, httplib::Response& res) {
    res.set_content(completion_with({{" 7", std::log(0.8)}, {" 4", std::log(0.1)}}).dump(), "application/json");
  });
  const RemoteOracle o(config_for(s));
  const auto p = o.probe_exact({TokenSeq{3}, 7, 9, ProbeOrder::ij});
  EXPECT_NEAR(p.p_first, 0.8, 1e-12);
  EXPECT_EQ(p.p_second, 1e-6);
  EXPECT_TRUE(p.low_confidence);
  EXPECT_EQ(o.low_confidence_count(), 1u);
}

TEST(RemoteOracle, RetriesOnceAfter429) {
  std::atomic<int> calls{0};
  MockServer s([&](const nlohmann::json&, httplib::Response& res) {
    if (calls++ == 0) {
      res.status = 429;
      res.set_content("slow down", "text/plain");
      return;
    }
    res.set_content(completion_with({{" 7", std::log(0.5)}, {" 9", std::log(0.5)}}).dump(), "application/json");
  });
  const RemoteOracle o(config_for(s));
  const auto p = o.probe_exact({TokenSeq{3}, 7, 9, ProbeOrder::ij});
  EXPECT_NEAR(p.p_first, 0.5, 1e-12);
  EXPECT_EQ(s.hits(), 2);
}

TEST(RemoteOracle, AuthFailureIsNotRetried) {
  MockServer s([](const nlohmann::json&, httplib::Response& res) { res.status = 401; });
  const RemoteOracle o(config_for(s));
  EXPECT_THROW(o.probe_exact({TokenSeq{3}, 7, 9, ProbeOrder::ij}), AuthError);
  EXPECT_EQ(s.hits(), 1);
}

TEST(RemoteOracle, PersistentServerErrorGivesUp) {
  MockServer s([](const nlohmann::json&, httplib::Response& res) { res.status = 503; });
  auto cfg = config_for(s);
  cfg.max_retries = 2;
  const RemoteOracle o(cfg);
  EXPECT_THROW(o.probe_exact({TokenSeq{3}, 7, 9, ProbeOrder::ij}), TransientError);
  EXPECT_EQ(s.hits(), 3);
}

TEST(RemoteOracle, NoLogprobsIsCapabilityError) {
  MockServer s([](const nlohmann::json&, httplib::Response& res) {
    res.set_content(R"({"choices":[{"text":" 7"}]})", "application/json");
  });
  const RemoteOracle o(config_for(s));
  EXPECT_THROW(o.top_k(TokenSeq{3}, 5), CapabilityError);
}

TEST(RemoteOracle, TopKParsesChatLogprobs) {
  MockServer s([](const nlohmann::json&, httplib::Response& res) {
    nlohmann::json top = nlohmann::json::array();
    top.push_back({{"token", "12"}, {"logprob", std::log(0.2)}});
    top.push_back({{"token", "11"}, {"logprob", std::log(0.5)}});
    top.push_back({{"token", "zz"}, {"logprob", std::log(0.1)}});
    res.set_content(nlohmann::json{{"choices", {{{"logprobs", {{"content", {{{"top_logprobs", top}}}}}}}}}}.dump(),
                    "application/json");
  });
  auto cfg = config_for(s);
  cfg.api = ApiStyle::chat;
  const RemoteOracle o(cfg);
  const auto d = o.top_k(TokenSeq{3}, 5);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_TRUE(d.truncated());
  EXPECT_EQ(d.entries()[0].token, 11u);
  EXPECT_NEAR(d.prob(12), 0.2, 1e-12);
  EXPECT_EQ(s.last_body()["top_logprobs"], 5);
  EXPECT_EQ(s.last_body()["logprobs"], true);
}

TEST(RemoteOracle, SampledModeCountsFirstWords) {
  MockServer s([](const nlohmann::json& body, httplib::Response& res) {
    nlohmann::json choices = nlohmann::json::array();
    const int n = body.value("n", 1);
    for (int i = 0; i < n; ++i) choices.push_back({{"text", i < 7 ? " 7 blah" : (i < 9 ? " 9" : " other")}});
    res.set_content(nlohmann::json{{"choices", choices}}.dump(), "application/json");
  });
  auto cfg = config_for(s);
  cfg.mode = ProbeMode::sampled;
  const RemoteOracle o(cfg);
  const auto c = o.probe_sample({TokenSeq{3}, 7, 9, ProbeOrder::ij});
  EXPECT_EQ(c.first, 7);
  EXPECT_EQ(c.second, 2);
  EXPECT_EQ(c.n_samples, 10);
  EXPECT_THROW(o.probe_exact({TokenSeq{3}, 7, 9, ProbeOrder::ij}), CapabilityError);
}

TEST(RemoteOracle, ConcurrentCallersAreSafe) {
  MockServer s([](const nlohmann::json&, httplib::Response& res) {
    res.set_content(completion_with({{" 7", std::log(0.5)}, {" 9", std::log(0.25)}}).dump(), "application/json");
  });
  const RemoteOracle o(config_for(s));
  std::vector<std::jthread> threads;
  std::atomic<int> ok{0};
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 5; ++i) ok += o.probe_exact({TokenSeq{3}, 7, 9, ProbeOrder::ij}).p_first == 0.5;
    });
  }
  threads.clear();
  EXPECT_EQ(ok.load(), 20);
  EXPECT_EQ(o.query_count(), 20u);
}

TEST(RemoteConfig, MissingCredentialAndFields) {
  ::unsetenv("DEMARK_MISSING_KEY");
  auto cfg = RemoteConfig::from_json(
      {{"base_url", "http://127.0.0.1:1"}, {"model", "m"}, {"api_key_env", "DEMARK_MISSING_KEY"}, {"vocab_size", 10}});
  try {
    RemoteOracle o(cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "api_key_env");
  }
  try {
    RemoteConfig::from_json({{"model", "m"}, {"vocab_size", 10}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "base_url");
  }
  EXPECT_THROW(RemoteConfig::from_json({{"base_url", "x"}, {"model", "m"}, {"vocab_size", 10}, {"max_concurrency", 0}}),
               ConfigError);
}
