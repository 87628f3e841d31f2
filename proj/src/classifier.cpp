#include "cotd/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cotd/errors.hpp"

namespace cotd {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  if (logits.size() == 0) return logits;
  const Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

double bce_loss(double p, int y) {
  if (y != 0 && y != 1) throw ConfigError("bce_loss: label must be 0 or 1");
  // Clamp the probability of the gold outcome. 1 - p is exact for p >= 0.5,
  // and the upper clamp uses log1p so 1 - eps is never rounded.
  const double gold = y == 1 ? p : 1.0 - p;
  if (gold <= kProbEps) return -std::log(kProbEps);
  if (gold >= 1.0 - kProbEps) return -std::log1p(-kProbEps);
  if (y == 0 && p < 0.5) return -std::log1p(-p);
  return -std::log(gold);
}

double ce_loss(std::span<const double> dist, std::size_t y) {
  if (y >= dist.size()) throw ConfigError("ce_loss: class index out of range");
  double sum = 0.0;
  for (const double d : dist) sum += d;
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("ce_loss: distribution does not sum to 1");
  return -std::log(std::max(dist[y], kProbEps));
}

double total_loss(double p_a, int y_a, std::span<const double> dist_b, std::optional<std::size_t> y_b,
                  bool is_ai) {
  double loss = bce_loss(p_a, y_a);
  if (is_ai) {
    if (!y_b) throw ConfigError("total_loss: AI example without a Task B label");
    loss += ce_loss(dist_b, *y_b);
  }
  return loss;
}

// ---------------------------------------------------------------------------

DualHeads DualHeads::init(std::size_t embedding_dim, std::size_t generators, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto normal = [&rng]() {
    const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return 0.02 * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  };
  const auto d = static_cast<Eigen::Index>(embedding_dim);
  const auto g = static_cast<Eigen::Index>(generators);
  DualHeads h;
  h.a.weight = Eigen::VectorXd::NullaryExpr(d, [&]() { return normal(); });
  h.a.bias = 0.0;
  h.b.weight = Eigen::MatrixXd(g, d);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index r = 0; r < g; ++r) h.b.weight(r, c) = normal();
  h.b.bias = Eigen::VectorXd::Zero(g);
  return h;
}

std::vector<ParamView> DualHeads::parameters() {
  return {{"task_a.weight", a.weight.data(), static_cast<std::size_t>(a.weight.size()), true},
          {"task_a.bias", &a.bias, 1, false},
          {"task_b.weight", b.weight.data(), static_cast<std::size_t>(b.weight.size()), true},
          {"task_b.bias", b.bias.data(), static_cast<std::size_t>(b.bias.size()), false}};
}

std::size_t argmax_tiebreak(std::span<const double> dist, const LabelVocabulary& vocab) {
  if (dist.empty()) throw ConfigError("empty Task B distribution");
  std::size_t best = 0;
  for (std::size_t j = 1; j < dist.size(); ++j) {
    if (dist[j] > dist[best] || (dist[j] == dist[best] && vocab.generator(j) < vocab.generator(best)))
      best = j;
  }
  return best;
}

Prediction cascade_decide(std::string doc_id, double p_ai, const Eigen::VectorXd* dist_b,
                          const LabelVocabulary& vocab, double threshold) {
  Prediction p;
  p.doc_id = std::move(doc_id);
  p.p_ai = p_ai;
  p.threshold = threshold;
  p.label_a = p_ai >= threshold ? 1 : 0;
  if (p.label_a == 0) {
    p.label_b = std::string(kHumanClass);
    return p;
  }
  if (!dist_b || static_cast<std::size_t>(dist_b->size()) != vocab.generator_count())
    throw ConfigError("Task B distribution does not match the vocabulary");
  p.dist_b = std::vector<double>(dist_b->data(), dist_b->data() + dist_b->size());
  p.label_b = vocab.generator(argmax_tiebreak(*p.dist_b, vocab));
  return p;
}

Prediction cascade_predict(const Eigen::VectorXd& embedding, const DualHeads& heads,
                           const LabelVocabulary& vocab, double threshold, std::string doc_id) {
  if (heads.embedding_dim() != static_cast<std::size_t>(embedding.size()) ||
      static_cast<std::size_t>(heads.b.weight.cols()) != heads.embedding_dim())
    throw ConfigError("embedding dimension does not match the classifier heads");
  if (heads.generators() != vocab.generator_count() ||
      static_cast<std::size_t>(heads.b.weight.rows()) != vocab.generator_count())
    throw ConfigError("Task B head width does not match the vocabulary");
  const double p_ai = heads.a.probability(embedding);
  if (p_ai < threshold) return cascade_decide(std::move(doc_id), p_ai, nullptr, vocab, threshold);
  const Eigen::VectorXd dist = heads.b.distribution(embedding);
  return cascade_decide(std::move(doc_id), p_ai, &dist, vocab, threshold);
}

HeadGradients HeadGradients::zeros(const DualHeads& heads) {
  HeadGradients g;
  g.a_weight = Eigen::VectorXd::Zero(heads.a.weight.size());
  g.b_weight = Eigen::MatrixXd::Zero(heads.b.weight.rows(), heads.b.weight.cols());
  g.b_bias = Eigen::VectorXd::Zero(heads.b.bias.size());
  g.input = Eigen::VectorXd::Zero(heads.a.weight.size());
  return g;
}

double example_loss(const DualHeads& heads, const Eigen::VectorXd& x, int y_a,
                    std::optional<std::size_t> y_b, HeadGradients* grad) {
  const double p = heads.a.probability(x);
  double loss = bce_loss(p, y_a);
  if (grad) {
    const double dz = p - static_cast<double>(y_a);
    grad->a_weight += dz * x;
    grad->a_bias += dz;
    grad->input += dz * heads.a.weight;
  }
  if (y_a == 1) {
    if (!y_b) throw ConfigError("AI example without a Task B label");
    if (*y_b >= heads.generators()) throw ConfigError("Task B label out of range");
    const Eigen::VectorXd dist = heads.b.distribution(x);
    loss += ce_loss(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size())), *y_b);
    if (grad) {
      Eigen::VectorXd dz = dist;
      dz[static_cast<Eigen::Index>(*y_b)] -= 1.0;
      grad->b_weight += dz * x.transpose();
      grad->b_bias += dz;
      grad->input += heads.b.weight.transpose() * dz;
    }
  }
  return loss;
}

}  // namespace cotd
