#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "pexplore/client.hpp"

using namespace pexplore;

TEST_CASE("mock client: matchers first, then the scripted sequence, then error") {
  MockScript script;
  script.matchers.push_back({"weather", "It is sunny."});
  script.sequence = {"first", "second"};
  auto client = install_mock(script);

  CHECK(client->chat({{"user", "How is the weather today?"}}) == "It is sunny.");
  CHECK(client->chat({{"user", "anything"}}) == "first");
  CHECK(client->chat({{"user", "weather again?"}}) == "It is sunny.");  // matchers are reusable
  CHECK(client->chat({{"user", "more"}}) == "second");
  CHECK_THROWS_WITH_AS(client->chat({{"user", "exhausted"}}),
                       doctest::Contains("no scripted reply"), std::runtime_error);
  CHECK(client->calls() == 5);

  auto* mock = dynamic_cast<MockChatClient*>(client.get());
  REQUIRE(mock != nullptr);
  CHECK(mock->request_log().size() == 5);
  CHECK(mock->request_log()[0].find("weather") != std::string::npos);
}

TEST_CASE("mock client matches the concatenated message contents") {
  MockScript script;
  script.matchers.push_back({"system text", "matched"});
  auto client = install_mock(script);
  CHECK(client->chat({{"system", "system text"}, {"user", "hello"}}) == "matched");
}

TEST_CASE("chat rejects malformed message lists") {
  auto client = install_mock(MockScript{});
  CHECK_THROWS_AS(client->chat({}), std::invalid_argument);
  CHECK_THROWS_AS(client->chat({{"wizard", "hi"}}), std::invalid_argument);
}

namespace {

struct TestServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  explicit TestServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server.Post("/chat/completions", std::move(handler));
    port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~TestServer() {
    server.stop();
    thread.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

std::string ok_body(const std::string& content) {
  nlohmann::json j = {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
  return j.dump();
}

}  // namespace

TEST_CASE("http client posts the chat schema and parses the reply") {
  nlohmann::json seen_body;
  std::string seen_auth;
  TestServer ts([&](const httplib::Request& req, httplib::Response& res) {
    seen_body = nlohmann::json::parse(req.body);
    seen_auth = req.get_header_value("Authorization");
    res.set_content(ok_body("Hello back!"), "application/json");
  });

  setenv("PEXPLORE_API_KEY", "test-key-123", 1);
  ClientConfig cfg;
  cfg.base_url = ts.url();
  cfg.model = "test-model";
  cfg.temperature = 0.7;
  cfg.max_tokens = 99;
  HttpChatClient client(cfg);
  const std::string reply = client.chat({{"system", "be brief"}, {"user", "hi"}});
  unsetenv("PEXPLORE_API_KEY");

  CHECK(reply == "Hello back!");
  CHECK(seen_body.at("model") == "test-model");
  CHECK(seen_body.at("temperature") == doctest::Approx(0.7));
  CHECK(seen_body.at("max_tokens") == 99);
  REQUIRE(seen_body.at("messages").size() == 2);
  CHECK(seen_body.at("messages")[0].at("role") == "system");
  CHECK(seen_body.at("messages")[1].at("content") == "hi");
  CHECK(seen_auth == "Bearer test-key-123");
  CHECK(client.calls() == 1);
}

TEST_CASE("http client retries 5xx with backoff and succeeds") {
  std::atomic<int> hits{0};
  TestServer ts([&](const httplib::Request&, httplib::Response& res) {
    const int n = ++hits;
    if (n <= 2) {
      res.status = 500;
      res.set_content("boom", "text/plain");
    } else {
      res.set_content(ok_body("recovered"), "application/json");
    }
  });
  ClientConfig cfg;
  cfg.base_url = ts.url();
  cfg.max_retries = 3;
  cfg.backoff_base_sec = 0.01;
  HttpChatClient client(cfg);
  CHECK(client.chat({{"user", "hi"}}) == "recovered");
  CHECK(hits.load() == 3);
}

TEST_CASE("http client gives up after max_retries transient failures") {
  std::atomic<int> hits{0};
  TestServer ts([&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 503;
  });
  ClientConfig cfg;
  cfg.base_url = ts.url();
  cfg.max_retries = 2;
  cfg.backoff_base_sec = 0.01;
  HttpChatClient client(cfg);
  CHECK_THROWS_AS(client.chat({{"user", "hi"}}), std::runtime_error);
  CHECK(hits.load() == 3);  // initial attempt + 2 retries
}

TEST_CASE("http client does not retry 4xx errors") {
  std::atomic<int> hits{0};
  TestServer ts([&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 404;
    res.set_content("nope", "text/plain");
  });
  ClientConfig cfg;
  cfg.base_url = ts.url();
  cfg.max_retries = 3;
  cfg.backoff_base_sec = 0.01;
  HttpChatClient client(cfg);
  CHECK_THROWS_WITH_AS(client.chat({{"user", "hi"}}), doctest::Contains("404"),
                       std::runtime_error);
  CHECK(hits.load() == 1);
}

TEST_CASE("http client rejects a malformed success body") {
  TestServer ts([&](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"unexpected\":true}", "application/json");
  });
  ClientConfig cfg;
  cfg.base_url = ts.url();
  cfg.max_retries = 0;
  HttpChatClient client(cfg);
  CHECK_THROWS_AS(client.chat({{"user", "hi"}}), std::runtime_error);
}

TEST_CASE("base url falls back to the environment variable") {
  TestServer ts([&](const httplib::Request&, httplib::Response& res) {
    res.set_content(ok_body("env works"), "application/json");
  });
  setenv("PEXPLORE_BASE_URL", ts.url().c_str(), 1);
  ClientConfig cfg;  // base_url left empty
  HttpChatClient client(cfg);
  CHECK(client.chat({{"user", "hi"}}) == "env works");
  unsetenv("PEXPLORE_BASE_URL");

  ClientConfig none;
  CHECK_THROWS_AS((HttpChatClient{none}), std::invalid_argument);
}

TEST_CASE("in-flight requests are bounded by max_in_flight") {
  std::atomic<int> active{0};
  std::atomic<int> high_water{0};
  TestServer ts([&](const httplib::Request&, httplib::Response& res) {
    const int now = ++active;
    int prev = high_water.load();
    while (now > prev && !high_water.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    --active;
    res.set_content(ok_body("ok"), "application/json");
  });
  ClientConfig cfg;
  cfg.base_url = ts.url();
  cfg.max_in_flight = 2;
  HttpChatClient client(cfg);
  std::vector<std::thread> workers;
  std::atomic<int> done{0};
  for (int i = 0; i < 6; ++i)
    workers.emplace_back([&] {
      client.chat({{"user", "parallel"}});
      ++done;
    });
  for (auto& w : workers) w.join();
  CHECK(done.load() == 6);
  CHECK(high_water.load() <= 2);
}
