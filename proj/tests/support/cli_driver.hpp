#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cotd/corpus.hpp"

namespace cotd::testing {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

/// Runs the command line in-process; args exclude the program name.
CliResult cli(const std::vector<std::string>& args);

void write_text(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);

struct CliPipeline {
  std::filesystem::path root;
  std::filesystem::path data;   // ingest output: train/val/test.jsonl
  std::filesystem::path cache;  // reasoning cache
  std::filesystem::path run;    // train run directory
  std::filesystem::path predictions;
  std::filesystem::path metrics;
  std::vector<CliResult> steps;
  bool ok() const;
};

/// ingest --split, reason, train, predict and evaluate under `root`.
CliPipeline run_cli_pipeline(const std::filesystem::path& root, const std::vector<Document>& corpus,
                             int epochs, bool use_cot, std::uint64_t seed = 0);

}  // namespace cotd::testing
