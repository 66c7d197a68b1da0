#include "pexplore/client.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace pexplore {

namespace {

std::string concat_contents(const std::vector<ChatMessage>& messages) {
  std::string all;
  for (const auto& m : messages) {
    if (!all.empty()) all += "\n";
    all += m.content;
  }
  return all;
}

void validate_messages(const std::vector<ChatMessage>& messages) {
  if (messages.empty()) throw std::invalid_argument("chat: messages must be nonempty");
  for (const auto& m : messages)
    if (m.role != "system" && m.role != "user" && m.role != "assistant")
      throw std::invalid_argument("chat: invalid role \"" + m.role + "\"");
}

}  // namespace

std::string MockChatClient::chat(const std::vector<ChatMessage>& messages) {
  validate_messages(messages);
  const std::string all = concat_contents(messages);
  std::lock_guard<std::mutex> lock(mu_);
  request_log_.push_back(all);
  for (const auto& [needle, reply] : script_.matchers)
    if (all.find(needle) != std::string::npos) return reply;
  if (next_sequential_ < script_.sequence.size()) return script_.sequence[next_sequential_++];
  throw std::runtime_error("mock client: no scripted reply for request #" +
                           std::to_string(request_log_.size()));
}

long MockChatClient::calls() const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<long>(request_log_.size());
}

std::unique_ptr<ChatClient> install_mock(MockScript script) {
  return std::make_unique<MockChatClient>(std::move(script));
}

// ----------------------------------- HTTP -----------------------------------

struct HttpChatClient::Impl {
  ClientConfig config;
  std::string api_key;          // from $PEXPLORE_API_KEY; never logged
  std::string host_and_scheme;  // e.g. http://localhost:8089
  std::string path_prefix;      // remainder of base_url, e.g. /v1

  std::mutex mu;
  std::condition_variable cv;
  int in_flight = 0;
  long calls = 0;
};

HttpChatClient::HttpChatClient(ClientConfig config) : impl_(std::make_unique<Impl>()) {
  if (config.base_url.empty()) {
    if (const char* env = std::getenv("PEXPLORE_BASE_URL")) config.base_url = env;
  }
  if (config.base_url.empty())
    throw std::invalid_argument("http client: no base_url (set PEXPLORE_BASE_URL)");
  if (config.max_in_flight < 1)
    throw std::invalid_argument("http client: max_in_flight must be >= 1");
  while (!config.base_url.empty() && config.base_url.back() == '/') config.base_url.pop_back();

  // Split "scheme://host[:port]" from any path suffix.
  const std::size_t scheme = config.base_url.find("://");
  if (scheme == std::string::npos)
    throw std::invalid_argument("http client: base_url must include a scheme");
  const std::size_t path = config.base_url.find('/', scheme + 3);
  impl_->host_and_scheme =
      path == std::string::npos ? config.base_url : config.base_url.substr(0, path);
  impl_->path_prefix = path == std::string::npos ? "" : config.base_url.substr(path);
  impl_->config = std::move(config);
  if (const char* key = std::getenv("PEXPLORE_API_KEY")) impl_->api_key = key;
}

HttpChatClient::~HttpChatClient() = default;

long HttpChatClient::calls() const {
  std::lock_guard<std::mutex> lock(impl_->mu);
  return impl_->calls;
}

std::string HttpChatClient::chat(const std::vector<ChatMessage>& messages) {
  validate_messages(messages);
  const ClientConfig& cfg = impl_->config;

  nlohmann::json body;
  body["model"] = cfg.model;
  body["temperature"] = cfg.temperature;
  body["max_tokens"] = cfg.max_tokens;
  body["messages"] = nlohmann::json::array();
  for (const auto& m : messages)
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  const std::string payload = body.dump();

  {
    std::unique_lock<std::mutex> lock(impl_->mu);
    impl_->cv.wait(lock, [&] { return impl_->in_flight < cfg.max_in_flight; });
    ++impl_->in_flight;
    ++impl_->calls;
  }
  struct Release {
    Impl* impl;
    ~Release() {
      {
        std::lock_guard<std::mutex> lock(impl->mu);
        --impl->in_flight;
      }
      impl->cv.notify_one();
    }
  } release{impl_.get()};

  httplib::Client http(impl_->host_and_scheme);
  http.set_connection_timeout(std::chrono::duration<double>(cfg.timeout_sec));
  http.set_read_timeout(std::chrono::duration<double>(cfg.timeout_sec));
  http.set_write_timeout(std::chrono::duration<double>(cfg.timeout_sec));
  httplib::Headers headers;
  if (!impl_->api_key.empty()) headers.emplace("Authorization", "Bearer " + impl_->api_key);

  std::string last_error;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay = cfg.backoff_base_sec * static_cast<double>(1 << (attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    httplib::Result res = http.Post(impl_->path_prefix + "/chat/completions", headers, payload,
                                    "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;  // connect failure / timeout: transient
    }
    if (res->status >= 400 && res->status < 500)
      throw std::runtime_error("http client: status " + std::to_string(res->status) + ": " +
                               res->body);
    if (res->status != 200) {
      last_error = "status " + std::to_string(res->status);
      continue;  // 5xx: transient
    }
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("http client: malformed response body: ") + e.what());
    }
  }
  throw std::runtime_error("http client: retries exhausted (" + last_error + ")");
}

}  // namespace pexplore
