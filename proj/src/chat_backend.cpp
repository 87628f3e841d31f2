#include "cotd/chat_backend.hpp"

#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

#include "cotd/errors.hpp"

namespace cotd {

ChatCompletionBackend::ChatCompletionBackend(ChatBackendConfig config) : config_(std::move(config)) {
  if (config_.model.empty()) throw ConfigError("chat backend requires a model name");
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint must be an http(s) URL");
  const auto scheme = config_.endpoint.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported scheme '" + scheme + "'");
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  scheme_host_port_ = config_.endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
  if (!config_.token_env.empty()) {
    if (const char* tok = std::getenv(config_.token_env.c_str())) token_ = tok;
  }
}

std::string ChatCompletionBackend::request_body(const Prompt& prompt) const {
  const nlohmann::json body{
      {"model", config_.model},
      {"temperature", 0},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt.text}}})}};
  return body.dump();
}

std::string ChatCompletionBackend::parse_response(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    throw BackendTransportError("response is not JSON");
  }
  const auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array() || choices->empty())
    throw InvalidReasoning("response has no choices");
  const auto& msg = (*choices)[0].value("message", nlohmann::json::object());
  const auto content = msg.find("content");
  if (content == msg.end() || !content->is_string()) return {};
  return content->get<std::string>();
}

std::string ChatCompletionBackend::generate(const Prompt& prompt) {
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(config_.timeout_seconds, 0);
  client.set_read_timeout(config_.timeout_seconds, 0);
  client.set_write_timeout(config_.timeout_seconds, 0);
  httplib::Headers headers;
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

  auto res = client.Post(path_, headers, request_body(prompt), "application/json");
  if (!res) throw BackendTransportError("request failed: " + httplib::to_string(res.error()));
  const int status = res->status;
  if (status == 408 || status == 429 || status >= 500)
    throw BackendTransportError("HTTP " + std::to_string(status));
  if (status < 200 || status >= 300)
    throw BackendUnavailable("HTTP " + std::to_string(status) + ": " + res->body.substr(0, 200));
  return parse_response(res->body);
}

}  // namespace cotd
