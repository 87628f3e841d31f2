#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace cotd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input record. `line()` is 1-based; 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& message)
      : Error("line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct ValidationIssue {
  std::string id;
  std::size_t line = 0;
  std::string message;
};

/// One or more records violate a domain invariant.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<ValidationIssue> issues);
  const std::vector<ValidationIssue>& issues() const { return issues_; }
  /// {"error": "validation", "issues": [{id, line, message}, ...]}
  nlohmann::json to_json() const;

 private:
  std::vector<ValidationIssue> issues_;
};

class EmptyCorpusError : public Error {
 public:
  EmptyCorpusError() : Error("empty corpus") {}
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// A single backend call failed in a way that may succeed on retry.
class BackendTransportError : public Error {
 public:
  using Error::Error;
};

/// The backend could not produce a result within the retry budget.
class BackendUnavailable : public Error {
 public:
  using Error::Error;
};

class InvalidReasoning : public Error {
 public:
  using Error::Error;
};

}  // namespace cotd
