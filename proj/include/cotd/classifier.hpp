#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cotd/corpus.hpp"
#include "cotd/encoding.hpp"

namespace cotd {

/// Probabilities are clamped into [kProbEps, 1 - kProbEps] before taking logs.
inline constexpr double kProbEps = 1e-7;

double sigmoid(double z);
/// Numerically stable softmax.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// -(y log p + (1-y) log(1-p)) with p clamped. Throws ConfigError for y not in {0,1}.
double bce_loss(double p, int y);
/// -log dist[y] with entries clamped below at kProbEps.
double ce_loss(std::span<const double> dist, std::size_t y);
/// bce_loss(p_a, y_a) plus, only when is_ai, ce_loss(dist_b, y_b).
double total_loss(double p_a, int y_a, std::span<const double> dist_b, std::optional<std::size_t> y_b,
                  bool is_ai);

/// Sigmoid output over the embedding.
struct TaskAHead {
  Eigen::VectorXd weight;
  double bias = 0.0;

  double logit(const Eigen::VectorXd& x) const { return weight.dot(x) + bias; }
  double probability(const Eigen::VectorXd& x) const { return sigmoid(logit(x)); }
};

/// Softmax over the non-Human classes; row j scores vocabulary generator j.
struct TaskBHead {
  Eigen::MatrixXd weight;  // generators x embedding_dim
  Eigen::VectorXd bias;

  Eigen::VectorXd logits(const Eigen::VectorXd& x) const { return weight * x + bias; }
  Eigen::VectorXd distribution(const Eigen::VectorXd& x) const { return softmax(logits(x)); }
};

struct DualHeads {
  TaskAHead a;
  TaskBHead b;

  /// Weights ~ N(0, 0.02) from a platform-independent generator; zero biases.
  static DualHeads init(std::size_t embedding_dim, std::size_t generators, std::uint64_t seed);
  std::size_t embedding_dim() const { return static_cast<std::size_t>(a.weight.size()); }
  std::size_t generators() const { return static_cast<std::size_t>(b.bias.size()); }
  /// Trainable parameters: a.weight, a.bias, b.weight, b.bias.
  std::vector<ParamView> parameters();
};

struct Prediction {
  std::string doc_id;
  double p_ai = 0.0;
  int label_a = 0;
  /// Present only when label_a = 1.
  std::optional<std::vector<double>> dist_b;
  std::string label_b;
  double threshold = 0.5;
};

/// Index of the maximum; exact ties go to the lexicographically smallest
/// generator name.
std::size_t argmax_tiebreak(std::span<const double> dist, const LabelVocabulary& vocab);

/// The cascade rule on already computed scores. `dist_b` is consulted only
/// when p_ai >= threshold.
Prediction cascade_decide(std::string doc_id, double p_ai, const Eigen::VectorXd* dist_b,
                          const LabelVocabulary& vocab, double threshold);

/// Scores `embedding` with both heads; the Task B head is evaluated only for
/// documents predicted AI. Throws ConfigError on dimension mismatch.
Prediction cascade_predict(const Eigen::VectorXd& embedding, const DualHeads& heads,
                           const LabelVocabulary& vocab, double threshold,
                           std::string doc_id = {});

/// Gradients of one example's total loss, parallel to DualHeads::parameters().
struct HeadGradients {
  Eigen::VectorXd a_weight;
  double a_bias = 0.0;
  Eigen::MatrixXd b_weight;
  Eigen::VectorXd b_bias;
  /// d loss / d embedding
  Eigen::VectorXd input;

  static HeadGradients zeros(const DualHeads& heads);
};

/// Total loss for one example. When `grad` is given the gradients are added
/// to it. The derivative is that of the unclamped loss (p - y and
/// softmax - onehot), which coincides with the clamped one inside the clamp.
double example_loss(const DualHeads& heads, const Eigen::VectorXd& x, int y_a,
                    std::optional<std::size_t> y_b, HeadGradients* grad);

}  // namespace cotd
