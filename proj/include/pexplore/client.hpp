#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace pexplore {

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;
};

struct ClientConfig {
  std::string base_url;          // falls back to $PEXPLORE_BASE_URL
  std::string model = "gpt-4o";
  double temperature = 1.0;
  int max_tokens = 512;
  double timeout_sec = 30.0;
  int max_retries = 3;           // transient failures only
  double backoff_base_sec = 0.5; // exponential: base * 2^attempt
  int max_in_flight = 4;
};

// Minimal chat-completion interface. Implementations must be safe to call
// from multiple threads.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string chat(const std::vector<ChatMessage>& messages) = 0;

  // Number of chat calls served so far (for zero-network assertions).
  virtual long calls() const = 0;
};

// Scripted offline stand-in. Substring matchers are reusable and checked in
// order against the concatenated message contents; when none match, the next
// sequential reply is consumed. An exhausted script raises an error rather
// than silently falling back.
struct MockScript {
  std::vector<std::pair<std::string, std::string>> matchers;  // (substring, reply)
  std::vector<std::string> sequence;                          // consumed in call order
};

class MockChatClient : public ChatClient {
 public:
  explicit MockChatClient(MockScript script) : script_(std::move(script)) {}

  std::string chat(const std::vector<ChatMessage>& messages) override;
  long calls() const override;

  const std::vector<std::string>& request_log() const { return request_log_; }

 private:
  MockScript script_;
  std::size_t next_sequential_ = 0;
  std::vector<std::string> request_log_;
  mutable std::mutex mu_;
};

// OpenAI-compatible HTTP client (POST {base_url}/chat/completions). The API
// key is read from $PEXPLORE_API_KEY only; it is never logged.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(ClientConfig config);
  ~HttpChatClient() override;

  std::string chat(const std::vector<ChatMessage>& messages) override;
  long calls() const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// install_mock semantics: build the scripted client once and hand it to every
// consumer; `chat` resolves exclusively from the script.
std::unique_ptr<ChatClient> install_mock(MockScript script);

}  // namespace pexplore
