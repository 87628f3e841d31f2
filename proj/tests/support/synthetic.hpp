#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cotd/classifier.hpp"
#include "cotd/corpus.hpp"

namespace cotd::testing {

struct SyntheticSpec {
  std::size_t documents = 1200;
  std::size_t generators = 6;
  double human_fraction = 0.5;
  std::uint64_t seed = 7;
};

/// Generator names used by synthetic_corpus: "gen-a", "gen-b", ...
std::vector<std::string> synthetic_generators(std::size_t n);

/// Each class draws from its own syllable inventory, so classes differ in
/// their character n-grams. Human documents use first-person pronouns,
/// varied vocabulary and irregular punctuation; generator documents reuse a
/// small vocabulary in evenly sized sentences.
std::vector<Document> synthetic_corpus(const SyntheticSpec& spec);

/// Rows shaped like the shared-task release: labeled train/dev/test files.
std::vector<Document> shaped_split(std::size_t rows, std::size_t generators, std::uint64_t seed,
                                   const std::string& id_prefix);

struct SeparabilityCertificate {
  bool separable = false;
  std::size_t epochs = 0;
  std::size_t mistakes_last_epoch = 0;
  double f1 = 0.0;
};

/// Multiclass perceptron. Zero mistakes over a full pass proves the points
/// are linearly separable (with a bias) in the given feature space.
SeparabilityCertificate perceptron_certificate(const std::vector<Eigen::VectorXd>& x,
                                               const std::vector<std::size_t>& y, std::size_t classes,
                                               std::size_t max_epochs);

struct NaiveScores {
  double task_a_f1 = 0.0;
  double task_a_macro = 0.0;
  double task_b_macro = 0.0;
};

/// Scores by counting over every class directly; shares no code with the
/// evaluation module.
NaiveScores naive_score(const std::vector<Prediction>& preds, const std::vector<Document>& golds);

/// Loss references in long double.
long double reference_bce(long double p, int y);
long double reference_ce(const std::vector<long double>& dist, std::size_t y);

}  // namespace cotd::testing
