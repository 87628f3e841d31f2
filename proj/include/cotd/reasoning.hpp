#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cotd/corpus.hpp"

namespace cotd {

/// Bumped whenever the prompt wording changes; part of every cache key.
inline constexpr std::string_view kPromptTemplateVersion = "prompt-v1";
/// Bumped whenever template_reasoning() changes its output.
inline constexpr std::string_view kTemplateReasoningVersion = "template-v2";
/// Conditioning label used when no gold label exists.
inline constexpr std::string_view kInferenceLabel = "unknown origin";

struct Prompt {
  std::string text;
  std::string doc_id;
  std::string conditioning_label;
};

struct Reasoning {
  std::string text;
  std::string doc_id;
  std::string conditioning_label;
  std::string backend_id;
  std::string template_version;
  std::string created_at;
};

/// Gold conditioning label for a labeled document: "human" for label_a = 0,
/// the Task B class when known, otherwise "AI". Throws ConfigError if the
/// document is unlabeled.
std::string training_label(const Document& doc);

/// Backslash-escapes quotes, backslashes and control characters so the
/// result fits on one line between double quotes.
std::string escape_prompt_text(std::string_view text);
std::string unescape_prompt_text(std::string_view escaped);

/// `Why is this particular "<text>" generated by <label>?`
Prompt build_prompt(const Document& doc, std::string_view label);
/// Inverse of build_prompt: recovers (text, label), or nullopt if `prompt`
/// is not of that shape.
std::optional<std::pair<std::string, std::string>> split_prompt(std::string_view prompt);

struct TextStats {
  std::size_t words = 0;
  std::size_t distinct_words = 0;
  double type_token_ratio = 0.0;
  std::size_t first_person = 0;
  std::size_t sentences = 0;
  double punctuation_variance = 0.0;
};

TextStats text_stats(std::string_view text);

/// Deterministic offline reasoning built from shallow text statistics and the
/// conditioning label.
Reasoning template_reasoning(const Document& doc, std::string_view label);

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  /// Identifies the backend instance in cache keys and Reasoning records.
  virtual std::string id() const = 0;
  virtual std::string template_version() const { return std::string(kPromptTemplateVersion); }
  /// Must be safe to call concurrently. Throws BackendTransportError for
  /// retryable failures.
  virtual std::string generate(const Prompt& prompt) = 0;
};

/// Adapts template_reasoning() to the backend interface.
class TemplateBackend final : public GeneratorBackend {
 public:
  std::string id() const override { return "template"; }
  std::string template_version() const override;
  std::string generate(const Prompt& prompt) override;
};

/// Backend kinds accepted by make_backend / the CLI.
const std::vector<std::string>& registered_backends();
bool is_registered_backend_id(std::string_view backend_id);

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds base_delay{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_delay{30000};
  /// Injection point for tests; defaults to std::this_thread::sleep_for.
  std::function<void(std::chrono::milliseconds)> sleep;

  std::chrono::milliseconds delay_for(int attempt) const;
};

/// Content-addressed reasoning store. Reads may run concurrently; writes are
/// serialized and, when backed by a file, appended as JSONL immediately.
class ReasoningCache {
 public:
  ReasoningCache() = default;
  enum class Mode { read_write, read_only };

  /// Loads `path` if it exists. In read_write mode new entries are appended
  /// to it; in read_only mode the file is never created or modified.
  explicit ReasoningCache(std::filesystem::path path, Mode mode = Mode::read_write);
  ReasoningCache(const ReasoningCache&) = delete;
  ReasoningCache& operator=(const ReasoningCache&) = delete;

  static std::string key(std::string_view doc_text, std::string_view label,
                         std::string_view backend_id, std::string_view template_version);

  std::optional<Reasoning> lookup(const std::string& key) const;
  void store(const std::string& key, const Reasoning& reasoning);
  std::size_t size() const;
  /// Snapshot of all entries keyed by cache key.
  std::map<std::string, Reasoning> entries() const;

  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, Reasoning> entries_;
  std::optional<std::filesystem::path> path_;
  std::ofstream sink_;
};

nlohmann::json reasoning_to_json(const std::string& key, const Reasoning& r);

struct GenerationCounters {
  std::atomic<std::size_t> generated{0};
  std::atomic<std::size_t> cached{0};
  std::atomic<std::size_t> retries{0};
  std::atomic<std::size_t> backend_calls{0};
};

/// Cache hit returns the stored entry without calling the backend. A miss
/// calls the backend (retrying transport failures per `retry`), stores a
/// non-empty result, and returns it.
Reasoning generate_reasoning(const Document& doc, std::string_view label, GeneratorBackend& backend,
                             ReasoningCache& cache, const RetryPolicy& retry = {},
                             GenerationCounters* counters = nullptr);

struct GenerationRequest {
  const Document* doc;
  std::string label;
};

struct GenerationFailure {
  std::string doc_id;
  std::string label;
  std::string message;
};

struct GenerationReport {
  std::size_t generated = 0;
  std::size_t cached = 0;
  std::size_t failed = 0;
  std::size_t retries = 0;
  std::vector<GenerationFailure> failures;

  nlohmann::json to_json() const;
};

/// Runs generate_reasoning over `requests` with at most `max_inflight`
/// concurrent backend calls. Failures are collected, never thrown.
GenerationReport generate_all(const std::vector<GenerationRequest>& requests,
                              GeneratorBackend& backend, ReasoningCache& cache,
                              const RetryPolicy& retry = {}, std::size_t max_inflight = 1);

/// Reasoning by (doc_id, conditioning label).
using ReasoningIndex = std::map<std::pair<std::string, std::string>, Reasoning>;

/// Collects the cached entries for `docs` under the given labels and backend.
ReasoningIndex index_from_cache(const ReasoningCache& cache, const std::vector<Document>& docs,
                                const std::function<std::vector<std::string>(const Document&)>& labels,
                                std::string_view backend_id, std::string_view template_version);

}  // namespace cotd
