#pragma once

#include <string>

#include "cotd/reasoning.hpp"

namespace cotd {

struct ChatBackendConfig {
  /// Full URL of an OpenAI-compatible chat completions endpoint, e.g.
  /// http://localhost:8080/v1/chat/completions
  std::string endpoint;
  std::string model;
  /// Name of the environment variable holding the bearer token; may be empty.
  std::string token_env = "COTD_API_TOKEN";
  int timeout_seconds = 60;
};

/// Sends each prompt as a single user message with temperature 0 and returns
/// choices[0].message.content. Network errors, 408, 429 and 5xx responses
/// raise BackendTransportError; other non-2xx statuses raise
/// BackendUnavailable.
class ChatCompletionBackend final : public GeneratorBackend {
 public:
  explicit ChatCompletionBackend(ChatBackendConfig config);

  std::string id() const override { return "chat:" + config_.model; }
  std::string generate(const Prompt& prompt) override;

  /// Request body for `prompt`; exposed for tests.
  std::string request_body(const Prompt& prompt) const;
  /// Extracts the completion text from a response body.
  static std::string parse_response(const std::string& body);

 private:
  ChatBackendConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  std::string token_;
};

}  // namespace cotd
