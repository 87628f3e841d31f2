#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cotd/classifier.hpp"
#include "cotd/corpus.hpp"
#include "cotd/encoding.hpp"
#include "cotd/reasoning.hpp"

namespace cotd {

enum class OptimizerKind { adam };

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 2e-5;
  double weight_decay = 0.01;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  bool use_cot = true;
  /// Stop after this many epochs without a validation improvement; 0 disables.
  int early_stop_patience = 0;
  /// Weight of an auxiliary Task A loss on the reasoning text alone; 0 disables.
  double reasoning_loss_weight = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  EncoderConfig encoder;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_f1_a = 0.0;
  double val_f1_b = 0.0;

  nlohmann::json to_json() const;
  static EpochMetrics from_json(const nlohmann::json& j);
  /// Task A F1 first, Task B F1 as tiebreak.
  bool better_than(const EpochMetrics& other) const;
};

/// Encoder, heads and vocabulary; copies deep-copy the encoder.
class DetectorModel {
 public:
  DetectorModel(LabelVocabulary vocab, std::unique_ptr<Encoder> encoder, DualHeads heads,
                double threshold, bool use_cot);
  DetectorModel(const DetectorModel& other);
  DetectorModel& operator=(const DetectorModel& other);
  DetectorModel(DetectorModel&&) noexcept = default;
  DetectorModel& operator=(DetectorModel&&) noexcept = default;

  const LabelVocabulary& vocab() const { return vocab_; }
  const Encoder& encoder() const { return *encoder_; }
  Encoder& encoder() { return *encoder_; }
  const DualHeads& heads() const { return heads_; }
  DualHeads& heads() { return heads_; }
  double threshold() const { return threshold_; }
  bool use_cot() const { return use_cot_; }

  CompositeInput compose(const Document& doc, const Reasoning* reasoning) const;
  /// `reasoning` is required when use_cot is set and ignored otherwise.
  Prediction predict(const Document& doc, const Reasoning* reasoning) const;
  /// Heads first, then any trainable encoder parameters.
  std::vector<ParamView> parameters();

 private:
  LabelVocabulary vocab_;
  std::unique_ptr<Encoder> encoder_;
  DualHeads heads_;
  double threshold_;
  bool use_cot_;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  DetectorModel model;
  int epoch = 0;
  EpochMetrics metrics;
  /// Best validation metrics seen in the run up to this checkpoint.
  EpochMetrics best_metrics;
  std::string config_hash;
  TrainConfig config;
  AdamState optimizer;

  /// Layout: checkpoint.json, vocab.json, task_a_head.bin, task_b_head.bin,
  /// optimizer.bin, encoder/.
  void save(const std::filesystem::path& dir) const;
  /// Throws CheckpointError on a format version mismatch.
  static Checkpoint load(const std::filesystem::path& dir);
};

/// Hash of everything a checkpoint must agree on to be resumed.
std::string config_hash(const EncoderConfig& encoder, const LabelVocabulary& vocab, bool use_cot);

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochMetrics> history;
  bool stopped_early = false;
};

/// Called after every epoch with its metrics, the end-of-epoch state, and
/// whether it became the new best.
using EpochCallback = std::function<void(const EpochMetrics&, const Checkpoint&, bool)>;

/// Mini-batch Adam on the masked joint loss. Training inputs use reasoning
/// conditioned on the gold label (training_label); validation inputs use
/// kInferenceLabel. Returns the best checkpoint by validation F1 along with
/// the final one.
TrainResult train(const std::vector<Document>& train_docs, const std::vector<Document>& val_docs,
                  const ReasoningIndex& reasonings, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Runs config.epochs more epochs from `last`, continuing its epoch counter
/// and optimizer state. With no training documents the inputs are returned
/// unchanged.
TrainResult resume(const Checkpoint& last, const std::optional<Checkpoint>& best,
                   const TrainConfig& config, const std::vector<Document>& train_docs,
                   const std::vector<Document>& val_docs, const ReasoningIndex& reasonings,
                   const EpochCallback& on_epoch = {});

}  // namespace cotd
