#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cotd/corpus.hpp"
#include "cotd/reasoning.hpp"

namespace cotd {

/// Joins document and reasoning in the rendered encoder input.
inline constexpr std::string_view kReasonSeparator = "\n###REASON###\n";
/// Token form of the separator; occurrences inside either part are escaped.
inline constexpr std::string_view kReasonMarker = "###REASON###";

struct CompositeInput {
  std::string text;
  std::string reasoning;
  std::string rendered;
};

/// Builds the encoder input. `reasoning == nullptr` (or an empty reasoning)
/// gives the document alone. The rendered form holds at most `max_tokens`
/// whitespace tokens (the separator counts as one); document tokens are kept
/// first and reasoning only fills the remaining budget.
CompositeInput compose_input(const Document& doc, const Reasoning* reasoning,
                             std::size_t max_tokens = 512);

enum class EncoderBackend { transformer, hashed_ngram };

std::string to_string(EncoderBackend b);
EncoderBackend parse_encoder_backend(std::string_view name);

struct EncoderConfig {
  EncoderBackend backend = EncoderBackend::hashed_ngram;
  std::size_t embedding_dim = 2048;
  /// Top-k transformer layers fine-tuned; ignored by the hashed backend.
  std::size_t trainable_depth = 6;
  std::size_t max_tokens = 512;
  std::uint64_t hash_seed = 0;
  /// Transformer checkpoint directory.
  std::string checkpoint;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// A contiguous block of trainable doubles.
struct ParamView {
  std::string name;
  double* data;
  std::size_t size;
  bool decay;
};

/// Opaque per-example state recorded by a trainable forward pass.
struct EncoderTape {
  virtual ~EncoderTape() = default;
};

/// Maps a composite input to a fixed-dimension vector.
///
/// Trainable encoders split the computation: prepare() runs the frozen part
/// once per input; forward()/backward() run the trainable part. Frozen
/// encoders have no parameters and forward() is the identity.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual std::unique_ptr<Encoder> clone() const = 0;

  const EncoderConfig& config() const { return config_; }
  virtual std::size_t layer_count() const = 0;

  virtual Eigen::MatrixXd prepare(const CompositeInput& input) const = 0;
  virtual Eigen::VectorXd forward(const Eigen::MatrixXd& prepared,
                                  std::unique_ptr<EncoderTape>* tape) const;
  /// Accumulates parameter gradients (parallel to parameters()).
  virtual void backward(const EncoderTape& tape, const Eigen::VectorXd& d_out,
                        std::vector<Eigen::VectorXd>& grads) const;
  virtual std::vector<ParamView> parameters() { return {}; }
  bool trainable() { return !parameters().empty(); }

  /// Throws NumericError on a non-finite result.
  Eigen::VectorXd encode(const CompositeInput& input) const;

  /// Writes config.json (and weights for parameterized encoders).
  virtual void save(const std::filesystem::path& dir) const;

 protected:
  explicit Encoder(EncoderConfig config) : config_(std::move(config)) {}
  EncoderConfig config_;
};

/// Character 3-5-gram signed feature hashing, L2-normalized. Code points are
/// hashed with stable_hash64 so vectors are identical across processes.
class HashedNgramEncoder final : public Encoder {
 public:
  explicit HashedNgramEncoder(EncoderConfig config);
  std::unique_ptr<Encoder> clone() const override;
  std::size_t layer_count() const override { return 0; }
  Eigen::MatrixXd prepare(const CompositeInput& input) const override;

  /// Unnormalized signed bucket counts of `text`.
  Eigen::VectorXd raw_profile(std::string_view text) const;
};

/// Creates the encoder described by `config`. For the transformer backend
/// this loads config.checkpoint and throws ConfigError if it is missing.
std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config);
/// Restores an encoder written by Encoder::save.
std::unique_ptr<Encoder> load_encoder(const std::filesystem::path& dir);

/// One-shot encode with a freshly constructed encoder.
Eigen::VectorXd encode(const CompositeInput& input, const EncoderConfig& config);

}  // namespace cotd
