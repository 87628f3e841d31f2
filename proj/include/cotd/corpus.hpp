#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cotd/errors.hpp"

namespace cotd {

inline constexpr std::string_view kHumanClass = "Human";

enum class DataFormat { csv, jsonl };

/// Parses "csv" / "jsonl" (case-insensitive). Throws ConfigError otherwise.
DataFormat parse_format(std::string_view name);
/// Format implied by a file extension, if any.
std::optional<DataFormat> format_from_extension(std::string_view path);

struct Document {
  std::string id;
  std::string text;
  std::optional<int> label_a;  // 0 = human, 1 = AI
  std::optional<std::string> label_b;

  bool labeled() const { return label_a.has_value(); }
  bool is_ai() const { return label_a == 1; }
  /// Task B class name implied by the labels: "Human" for label_a = 0.
  std::optional<std::string> gold_class() const;

  friend bool operator==(const Document&, const Document&) = default;
};

/// Ordered Task B class names. "Human" is always first; the remaining
/// generator classes are sorted bytewise.
class LabelVocabulary {
 public:
  LabelVocabulary();
  /// Builds from arbitrary names; duplicates and "Human" are folded in.
  explicit LabelVocabulary(const std::vector<std::string>& names);

  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t human_index() const { return 0; }
  std::size_t size() const { return classes_.size(); }
  /// Number of non-Human classes, i.e. the Task B head width.
  std::size_t generator_count() const { return classes_.size() - 1; }
  const std::string& generator(std::size_t j) const { return classes_.at(j + 1); }
  std::optional<std::size_t> index_of(std::string_view name) const;
  /// Head index of a generator class; nullopt for "Human" or unknown names.
  std::optional<std::size_t> generator_index(std::string_view name) const;

  nlohmann::json to_json() const;
  static LabelVocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const LabelVocabulary&, const LabelVocabulary&) = default;

 private:
  std::vector<std::string> classes_;
};

struct SplitSpec {
  double train_fraction = 0.7;
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless every fraction is in (0,1) and they sum to 1.
  void validate() const;
};

struct SplitResult {
  std::vector<Document> train;
  std::vector<Document> val;
  std::vector<Document> test;
  std::vector<std::string> warnings;
};

/// Trims, removes line-wrap breaks (any whitespace run containing a newline)
/// and collapses other whitespace runs to one space. "human" in any case
/// maps to "Human".
std::string normalize_label_b(std::string_view raw);

/// Throws ParseError for malformed records and ValidationError (listing every
/// offending record) for label violations.
std::vector<Document> parse_dataset(std::istream& in, DataFormat format);
std::vector<Document> parse_dataset(std::string_view data, DataFormat format);
std::vector<Document> load_dataset(const std::string& path, std::optional<DataFormat> format = {});

std::string serialize_jsonl(const std::vector<Document>& docs);
std::string serialize_csv(const std::vector<Document>& docs);
nlohmann::json document_to_json(const Document& doc);

/// Checks the label co-constraints; returns one issue per offending document.
std::vector<ValidationIssue> check_labels(const std::vector<Document>& docs);

LabelVocabulary build_vocabulary(const std::vector<Document>& docs);

SplitResult split_stratified(const std::vector<Document>& docs, const SplitSpec& spec);

struct CorpusStats {
  std::size_t rows = 0;
  std::size_t unlabeled = 0;
  std::size_t human = 0;
  std::size_t ai = 0;
  std::size_t ai_without_label_b = 0;
  std::map<std::string, std::size_t> per_class;
  bool labels_consistent = true;

  nlohmann::json to_json() const;
};

CorpusStats compute_stats(const std::vector<Document>& docs);

}  // namespace cotd
