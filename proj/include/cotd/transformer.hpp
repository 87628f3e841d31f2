#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cotd/encoding.hpp"
#include "cotd/tensor_io.hpp"

namespace cotd {

/// Shape of a post-LayerNorm transformer encoder with mean pooling and a
/// tanh pooler projecting to output_dim.
struct TransformerArch {
  std::size_t vocab_size = 8192;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t layers = 6;
  std::size_t ffn = 128;
  std::size_t max_positions = 512;
  std::size_t output_dim = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static TransformerArch from_json(const nlohmann::json& j);
};

/// Lowercased word and punctuation pieces hashed into [0, vocab_size).
std::vector<std::size_t> transformer_token_ids(std::string_view text, std::size_t vocab_size,
                                               std::uint64_t seed, std::size_t max_tokens);

struct TransformerLayer {
  Eigen::MatrixXd wq, wk, wv, wo;  // hidden x hidden
  Eigen::RowVectorXd bq, bk, bv, bo;
  Eigen::RowVectorXd ln1_gain, ln1_bias;
  Eigen::MatrixXd w1;  // hidden x ffn
  Eigen::RowVectorXd b1;
  Eigen::MatrixXd w2;  // ffn x hidden
  Eigen::RowVectorXd b2;
  Eigen::RowVectorXd ln2_gain, ln2_bias;
};

/// The top `trainable_depth` layers and the pooler are trainable; token and
/// position embeddings and the lower layers stay frozen, so prepare() caches
/// the hidden states entering the first trainable layer.
class TransformerEncoder final : public Encoder {
 public:
  TransformerEncoder(EncoderConfig config, TransformerArch arch);

  /// Reads config.json and weights.bin from config.checkpoint.
  static TransformerEncoder load(const EncoderConfig& config);
  /// Writes a randomly initialized checkpoint (N(0, 0.02) weights).
  static void init_checkpoint(const std::filesystem::path& dir, const TransformerArch& arch,
                              std::uint64_t seed, std::uint64_t hash_seed = 0);

  std::unique_ptr<Encoder> clone() const override;
  std::size_t layer_count() const override { return arch_.layers; }
  const TransformerArch& arch() const { return arch_; }

  Eigen::MatrixXd prepare(const CompositeInput& input) const override;
  Eigen::VectorXd forward(const Eigen::MatrixXd& prepared,
                          std::unique_ptr<EncoderTape>* tape) const override;
  void backward(const EncoderTape& tape, const Eigen::VectorXd& d_out,
                std::vector<Eigen::VectorXd>& grads) const override;
  std::vector<ParamView> parameters() override;

  void save(const std::filesystem::path& dir) const override;

 private:
  void randomize(std::uint64_t seed);
  NamedTensors to_tensors() const;
  void from_tensors(const NamedTensors& t);
  std::size_t first_trainable() const { return arch_.layers - config_.trainable_depth; }

  TransformerArch arch_;
  Eigen::MatrixXd token_embedding_;     // vocab x hidden
  Eigen::MatrixXd position_embedding_;  // max_positions x hidden
  Eigen::RowVectorXd emb_ln_gain_, emb_ln_bias_;
  std::vector<TransformerLayer> layers_;
  Eigen::MatrixXd pooler_w_;  // hidden x output_dim
  Eigen::RowVectorXd pooler_b_;
};

}  // namespace cotd
