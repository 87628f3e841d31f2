#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cotd/corpus.hpp"
#include "cotd/reasoning.hpp"
#include "cotd/training.hpp"
#include "cotd/transformer.hpp"

namespace cotd::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kInvalidInput = 2,
  kPartialFailure = 3,
};

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::optional<DataFormat> format;
  std::filesystem::path out_dir = ".";
};

/// Written to <out-dir>/<command>.manifest.json before a command does any work and
/// rewritten with the outcome when it finishes.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> input_hashes;  // path -> sha256
  std::string tool_version;
  std::string started_at;
  std::optional<std::string> finished_at;
  std::optional<int> exit_code;
  nlohmann::json outputs = nlohmann::json::array();
  /// Error document of a failed run; null on success.
  nlohmann::json error;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& out_dir) const;
};

struct BackendOptions {
  std::string kind = "template";  // template | chat
  std::string endpoint;
  std::string model;
  std::string token_env = "COTD_API_TOKEN";
  int timeout_seconds = 60;
  int max_retries = 3;

  nlohmann::json to_json() const;
};

std::unique_ptr<GeneratorBackend> make_backend(const BackendOptions& options);

struct IngestOptions {
  std::vector<std::string> inputs;  // merged into corpus.jsonl
  std::optional<std::string> train;
  std::optional<std::string> val;
  std::optional<std::string> test;
  /// Split the merged inputs into train/val/test.
  bool split = false;
  SplitSpec split_spec;
};

enum class Conditioning { gold, inference, both };

struct ReasonOptions {
  std::vector<std::string> corpora;
  std::string cache;
  BackendOptions backend;
  Conditioning conditioning = Conditioning::both;
  std::size_t max_inflight = 4;
};

struct TrainOptions {
  std::string train;
  std::string val;
  std::optional<std::string> cache;
  BackendOptions backend;
  TrainConfig config;
  bool resume = false;
};

struct PredictOptions {
  std::string checkpoint;
  std::string corpus;
  std::optional<std::string> cache;
  BackendOptions backend;
  std::string output = "predictions.jsonl";
};

struct EvaluateOptions {
  std::string predictions;
  std::string gold;
  std::string method;
};

struct ReportOptions {
  /// method name -> metrics.json written by evaluate
  std::vector<std::pair<std::string, std::string>> inputs;
};

/// Writes a randomly initialized transformer encoder checkpoint.
struct InitEncoderOptions {
  std::string output;
  TransformerArch arch;
  std::uint64_t hash_seed = 0;
};

// Each command writes its manifest first, throws on error, and returns an
// ExitCode for outcomes that are not exceptions (partial failures).
int cmd_ingest(const GlobalOptions& g, const IngestOptions& o, std::ostream& out);
int cmd_reason(const GlobalOptions& g, const ReasonOptions& o, std::ostream& out);
int cmd_train(const GlobalOptions& g, const TrainOptions& o, std::ostream& out);
int cmd_predict(const GlobalOptions& g, const PredictOptions& o, std::ostream& out);
int cmd_evaluate(const GlobalOptions& g, const EvaluateOptions& o, std::ostream& out);
int cmd_report(const GlobalOptions& g, const ReportOptions& o, std::ostream& out);
int cmd_init_encoder(const GlobalOptions& g, const InitEncoderOptions& o, std::ostream& out);

/// Structured error document for `e`, as printed on stderr.
nlohmann::json error_json(const std::exception& e);
int exit_code_for(const std::exception& e);

/// Parses argv and dispatches; never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cotd::cli
