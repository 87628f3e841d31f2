#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cotd/classifier.hpp"
#include "cotd/corpus.hpp"

namespace cotd {

enum class Averaging { binary_positive_ai, macro };

std::string to_string(Averaging a);

/// Rows are gold classes, columns predicted classes.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::vector<std::string> classes);

  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t count(std::size_t gold, std::size_t pred) const { return counts_[gold][pred]; }
  void add(std::size_t gold, std::size_t pred) { ++counts_[gold][pred]; }
  std::size_t total() const;
  std::size_t row_sum(std::size_t gold) const;
  std::size_t col_sum(std::size_t pred) const;

  nlohmann::json to_json() const;

 private:
  std::vector<std::string> classes_;
  std::vector<std::vector<std::size_t>> counts_;
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

/// Per-class scores with zero-denominator precision/recall/F1 taken as 0.
ClassScores class_scores(const ConfusionMatrix& cm, std::size_t cls);
/// binary_positive_ai: F1 of `positive`; macro: unweighted mean over classes.
double f1_score(const ConfusionMatrix& cm, Averaging averaging, std::size_t positive = 1);

struct MetricsReport {
  double task_a_f1 = 0.0;
  double task_a_macro_f1 = 0.0;
  double task_b_f1 = 0.0;
  Averaging task_a_averaging = Averaging::binary_positive_ai;
  Averaging task_b_averaging = Averaging::macro;
  std::map<std::string, ClassScores> per_class;  // Task B
  ConfusionMatrix confusion_a;
  ConfusionMatrix confusion_b;
  std::size_t n_scored = 0;
  std::size_t n_scored_b = 0;
  std::size_t n_unlabeled_excluded = 0;
  std::size_t n_missing_label_b = 0;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Scores cascade predictions. Task A F1 is the F1 of the AI class; Task B F1
/// is macro-F1 over every gold or predicted class including "Human".
/// Unlabeled golds are excluded and counted. Throws ValidationError on
/// unmatched or duplicate ids, or predictions violating the cascade rule.
MetricsReport score(const std::vector<Prediction>& preds, const std::vector<Document>& golds);

struct MethodRow {
  std::string method;
  double task_a = 0.0;
  double task_b = 0.0;
};

struct MethodTable {
  std::vector<MethodRow> rows;

  std::string to_text() const;
  /// Ranked rows with an S.No column, as in a shared-task leaderboard.
  std::string to_leaderboard_text() const;
  nlohmann::json to_json() const;
};

/// Rows sorted by Task A F1 descending, ties by method name.
MethodTable method_table(const std::map<std::string, MetricsReport>& reports);

// Prediction file: one JSON object per line, {id, label_a, p_ai, label_b}.
std::string serialize_predictions(const std::vector<Prediction>& preds);
std::vector<Prediction> parse_predictions(std::string_view data);

}  // namespace cotd
