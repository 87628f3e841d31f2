#include "cotd/encoding.hpp"

#include <cmath>

#include "cotd/errors.hpp"
#include "cotd/transformer.hpp"
#include "cotd/util.hpp"

namespace cotd {

namespace {

std::string escape_marker(std::string_view s) {
  std::string out;
  std::size_t pos = 0;
  for (;;) {
    const auto hit = s.find(kReasonMarker, pos);
    if (hit == std::string_view::npos) break;
    out += s.substr(pos, hit - pos);
    out += "###REASON##\\#";
    pos = hit + kReasonMarker.size();
  }
  out += s.substr(pos);
  return out;
}

// Byte length of the prefix of `text` ending after its `n`-th token.
std::size_t prefix_through_token(std::string_view text,
                                 const std::vector<std::string_view>& tokens, std::size_t n) {
  const auto& last = tokens[n - 1];
  return static_cast<std::size_t>(last.data() - text.data()) + last.size();
}

}  // namespace

CompositeInput compose_input(const Document& doc, const Reasoning* reasoning,
                             std::size_t max_tokens) {
  if (max_tokens == 0) throw ConfigError("max_tokens must be positive");
  if (reasoning && reasoning->doc_id != doc.id)
    throw ConfigError("reasoning for '" + reasoning->doc_id + "' attached to document '" + doc.id +
                      "'");
  CompositeInput in;
  in.text = doc.text;
  if (reasoning) in.reasoning = reasoning->text;

  const auto doc_tokens = whitespace_tokens(doc.text);
  if (doc_tokens.size() >= max_tokens) {
    in.rendered = doc.text.substr(0, prefix_through_token(doc.text, doc_tokens, max_tokens));
    return in;
  }
  const auto reason_tokens = whitespace_tokens(in.reasoning);
  const std::size_t budget = max_tokens - doc_tokens.size();
  if (reason_tokens.empty() || budget < 2) {
    in.rendered = doc.text;
    return in;
  }
  const std::size_t keep = std::min(reason_tokens.size(), budget - 1);
  const auto reason_prefix =
      std::string_view(in.reasoning)
          .substr(0, prefix_through_token(in.reasoning, reason_tokens, keep));
  in.rendered = escape_marker(doc.text);
  in.rendered += kReasonSeparator;
  in.rendered += escape_marker(reason_prefix);
  return in;
}

std::string to_string(EncoderBackend b) {
  return b == EncoderBackend::transformer ? "transformer" : "hashed_ngram";
}

EncoderBackend parse_encoder_backend(std::string_view name) {
  if (name == "transformer") return EncoderBackend::transformer;
  if (name == "hashed_ngram" || name == "hashed") return EncoderBackend::hashed_ngram;
  throw ConfigError("unknown encoder backend '" + std::string(name) + "'");
}

void EncoderConfig::validate() const {
  if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
  if (max_tokens == 0) throw ConfigError("max_tokens must be positive");
  if (backend == EncoderBackend::transformer && checkpoint.empty())
    throw ConfigError("transformer encoder requires a checkpoint directory");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"backend", to_string(backend)},   {"embedding_dim", embedding_dim},
          {"trainable_depth", trainable_depth}, {"max_tokens", max_tokens},
          {"hash_seed", hash_seed},          {"checkpoint", checkpoint}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.backend = parse_encoder_backend(j.at("backend").get<std::string>());
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.trainable_depth = j.value("trainable_depth", c.trainable_depth);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.hash_seed = j.value("hash_seed", c.hash_seed);
  c.checkpoint = j.value("checkpoint", std::string());
  return c;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd Encoder::forward(const Eigen::MatrixXd& prepared,
                                 std::unique_ptr<EncoderTape>* tape) const {
  if (tape) tape->reset();
  return prepared.col(0);
}

void Encoder::backward(const EncoderTape&, const Eigen::VectorXd&,
                       std::vector<Eigen::VectorXd>&) const {}

Eigen::VectorXd Encoder::encode(const CompositeInput& input) const {
  Eigen::VectorXd v = forward(prepare(input), nullptr);
  if (!v.allFinite()) throw NumericError("encoder produced a non-finite vector");
  return v;
}

void Encoder::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "config.json", config_.to_json().dump(2) + "\n");
}

HashedNgramEncoder::HashedNgramEncoder(EncoderConfig config) : Encoder(std::move(config)) {
  config_.validate();
  if (config_.backend != EncoderBackend::hashed_ngram)
    throw ConfigError("HashedNgramEncoder requires the hashed_ngram backend");
}

std::unique_ptr<Encoder> HashedNgramEncoder::clone() const {
  return std::make_unique<HashedNgramEncoder>(*this);
}

Eigen::VectorXd HashedNgramEncoder::raw_profile(std::string_view text) const {
  constexpr char32_t kBegin = 0x02, kEnd = 0x03;
  std::vector<char32_t> cps{kBegin};
  const auto decoded = decode_utf8(text);
  cps.insert(cps.end(), decoded.begin(), decoded.end());
  cps.push_back(kEnd);

  // Byte offsets of each code point in the re-encoded buffer.
  std::string bytes;
  std::vector<std::size_t> offsets;
  offsets.reserve(cps.size() + 1);
  for (const char32_t cp : cps) {
    offsets.push_back(bytes.size());
    append_utf8(bytes, cp);
  }
  offsets.push_back(bytes.size());

  const auto dim = static_cast<std::uint64_t>(config_.embedding_dim);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  const std::string_view view(bytes);
  for (std::size_t n = 3; n <= 5; ++n) {
    for (std::size_t i = 0; i + n <= cps.size(); ++i) {
      const auto gram = view.substr(offsets[i], offsets[i + n] - offsets[i]);
      const std::uint64_t h = stable_hash64(gram, config_.hash_seed);
      const double sign = (h >> 63) ? -1.0 : 1.0;
      v[static_cast<Eigen::Index>(h % dim)] += sign;
    }
  }
  return v;
}

Eigen::MatrixXd HashedNgramEncoder::prepare(const CompositeInput& input) const {
  Eigen::VectorXd v = raw_profile(input.rendered);
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config) {
  config.validate();
  if (config.backend == EncoderBackend::hashed_ngram)
    return std::make_unique<HashedNgramEncoder>(config);
  return std::make_unique<TransformerEncoder>(TransformerEncoder::load(config));
}

std::unique_ptr<Encoder> load_encoder(const std::filesystem::path& dir) {
  const auto path = dir / "config.json";
  if (!std::filesystem::exists(path)) throw ConfigError("missing encoder config " + path.string());
  auto config = EncoderConfig::from_json(nlohmann::json::parse(read_file(path)));
  if (config.backend == EncoderBackend::transformer) config.checkpoint = dir.string();
  return make_encoder(config);
}

Eigen::VectorXd encode(const CompositeInput& input, const EncoderConfig& config) {
  return make_encoder(config)->encode(input);
}

}  // namespace cotd
