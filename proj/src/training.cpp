#include "cotd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cotd/errors.hpp"
#include "cotd/evaluation.hpp"
#include "cotd/tensor_io.hpp"
#include "cotd/util.hpp"

namespace cotd {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0,1)");
  if (early_stop_patience < 0) throw ConfigError("early_stop_patience must be >= 0");
  if (!(reasoning_loss_weight >= 0.0)) throw ConfigError("reasoning_loss_weight must be >= 0");
  encoder.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"optimizer", "adam"},
          {"seed", seed},
          {"threshold", threshold},
          {"use_cot", use_cot},
          {"early_stop_patience", early_stop_patience},
          {"reasoning_loss_weight", reasoning_loss_weight},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_epsilon", adam_epsilon},
          {"encoder", encoder.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.value("optimizer", std::string("adam")) != "adam") throw ConfigError("unsupported optimizer");
  c.seed = j.value("seed", c.seed);
  c.threshold = j.value("threshold", c.threshold);
  c.use_cot = j.value("use_cot", c.use_cot);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.reasoning_loss_weight = j.value("reasoning_loss_weight", c.reasoning_loss_weight);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
  return c;
}

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch},
          {"train_loss", train_loss},
          {"val_loss", val_loss},
          {"val_f1_a", val_f1_a},
          {"val_f1_b", val_f1_b}};
}

EpochMetrics EpochMetrics::from_json(const nlohmann::json& j) {
  return {j.at("epoch").get<int>(), j.at("train_loss").get<double>(),
          j.at("val_loss").get<double>(), j.at("val_f1_a").get<double>(),
          j.at("val_f1_b").get<double>()};
}

bool EpochMetrics::better_than(const EpochMetrics& other) const {
  if (val_f1_a != other.val_f1_a) return val_f1_a > other.val_f1_a;
  return val_f1_b > other.val_f1_b;
}

// ---------------------------------------------------------------------------
// DetectorModel

DetectorModel::DetectorModel(LabelVocabulary vocab, std::unique_ptr<Encoder> encoder,
                             DualHeads heads, double threshold, bool use_cot)
    : vocab_(std::move(vocab)),
      encoder_(std::move(encoder)),
      heads_(std::move(heads)),
      threshold_(threshold),
      use_cot_(use_cot) {}

DetectorModel::DetectorModel(const DetectorModel& other)
    : vocab_(other.vocab_),
      encoder_(other.encoder_->clone()),
      heads_(other.heads_),
      threshold_(other.threshold_),
      use_cot_(other.use_cot_) {}

DetectorModel& DetectorModel::operator=(const DetectorModel& other) {
  if (this != &other) *this = DetectorModel(other);
  return *this;
}

CompositeInput DetectorModel::compose(const Document& doc, const Reasoning* reasoning) const {
  if (use_cot_ && !reasoning) throw ConfigError("model uses reasoning but none given for " + doc.id);
  return compose_input(doc, use_cot_ ? reasoning : nullptr, encoder_->config().max_tokens);
}

Prediction DetectorModel::predict(const Document& doc, const Reasoning* reasoning) const {
  const auto x = encoder_->encode(compose(doc, reasoning));
  return cascade_predict(x, heads_, vocab_, threshold_, doc.id);
}

std::vector<ParamView> DetectorModel::parameters() {
  auto p = heads_.parameters();
  for (auto& e : encoder_->parameters()) p.push_back(std::move(e));
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint

std::string config_hash(const EncoderConfig& encoder, const LabelVocabulary& vocab, bool use_cot) {
  auto enc = encoder.to_json();
  enc.erase("checkpoint");
  const nlohmann::json j{{"encoder", enc}, {"vocab", vocab.classes()}, {"use_cot", use_cot}};
  return sha256_hex(j.dump());
}

void Checkpoint::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  model.encoder().save(dir / "encoder");
  write_file_atomic(dir / "vocab.json", model.vocab().to_json().dump(2) + "\n");
  const auto& h = model.heads();
  write_tensors(dir / "task_a_head.bin",
                {{"weight", h.a.weight}, {"bias", Eigen::MatrixXd::Constant(1, 1, h.a.bias)}});
  write_tensors(dir / "task_b_head.bin", {{"weight", h.b.weight}, {"bias", h.b.bias}});
  NamedTensors opt;
  for (std::size_t i = 0; i < optimizer.m.size(); ++i) {
    opt.emplace_back("m" + std::to_string(i), optimizer.m[i]);
    opt.emplace_back("v" + std::to_string(i), optimizer.v[i]);
  }
  write_tensors(dir / "optimizer.bin", opt);
  const nlohmann::json meta{{"format_version", kFormatVersion},
                            {"epoch", epoch},
                            {"threshold", model.threshold()},
                            {"use_cot", model.use_cot()},
                            {"config_hash", config_hash},
                            {"metrics", metrics.to_json()},
                            {"best_metrics", best_metrics.to_json()},
                            {"optimizer_step", optimizer.step},
                            {"optimizer_slots", optimizer.m.size()},
                            {"encoder", "encoder"},
                            {"train_config", config.to_json()}};
  write_file_atomic(dir / "checkpoint.json", meta.dump(2) + "\n");
}

Checkpoint Checkpoint::load(const std::filesystem::path& dir) {
  const auto meta_path = dir / "checkpoint.json";
  if (!std::filesystem::exists(meta_path)) throw CheckpointError("no checkpoint in " + dir.string());
  const auto meta = nlohmann::json::parse(read_file(meta_path));
  const int version = meta.value("format_version", -1);
  if (version != kFormatVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " does not match supported version " + std::to_string(kFormatVersion));

  auto vocab = LabelVocabulary::from_json(nlohmann::json::parse(read_file(dir / "vocab.json")));
  auto encoder = load_encoder(dir / meta.value("encoder", std::string("encoder")));
  const auto d = static_cast<Eigen::Index>(encoder->config().embedding_dim);
  const auto g = static_cast<Eigen::Index>(vocab.generator_count());
  DualHeads heads;
  const auto ta = read_tensors(dir / "task_a_head.bin");
  heads.a.weight = tensor_at(ta, "weight", d, 1);
  heads.a.bias = tensor_at(ta, "bias", 1, 1)(0, 0);
  const auto tb = read_tensors(dir / "task_b_head.bin");
  heads.b.weight = tensor_at(tb, "weight", g, d);
  heads.b.bias = tensor_at(tb, "bias", g, 1);

  DetectorModel model(std::move(vocab), std::move(encoder), std::move(heads),
                      meta.at("threshold").get<double>(), meta.at("use_cot").get<bool>());
  Checkpoint ck{std::move(model),
                meta.at("epoch").get<int>(),
                EpochMetrics::from_json(meta.at("metrics")),
                EpochMetrics::from_json(meta.at("best_metrics")),
                meta.at("config_hash").get<std::string>(),
                TrainConfig::from_json(meta.at("train_config")),
                {}};
  ck.optimizer.step = meta.at("optimizer_step").get<std::uint64_t>();
  const auto slots = meta.at("optimizer_slots").get<std::size_t>();
  const auto opt = read_tensors(dir / "optimizer.bin");
  const auto params = ck.model.parameters();
  if (slots != 0 && slots != params.size())
    throw CheckpointError("optimizer state does not match the model parameters");
  for (std::size_t i = 0; i < slots; ++i) {
    const auto n = static_cast<Eigen::Index>(params[i].size);
    ck.optimizer.m.push_back(tensor_at(opt, "m" + std::to_string(i), n, 1));
    ck.optimizer.v.push_back(tensor_at(opt, "v" + std::to_string(i), n, 1));
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct Example {
  const Document* doc;
  int y_a;
  std::optional<std::size_t> y_b;
  Eigen::MatrixXd prepared;
  std::optional<Eigen::MatrixXd> reasoning_only;
};

const Reasoning* find_reasoning(const ReasoningIndex& index, const Document& doc,
                                const std::string& label) {
  const auto it = index.find({doc.id, label});
  return it == index.end() ? nullptr : &it->second;
}

class Trainer {
 public:
  Trainer(DetectorModel& model, const TrainConfig& config, AdamState& adam)
      : model_(model), config_(config), adam_(adam) {}

  void prepare(const std::vector<Document>& train_docs, const std::vector<Document>& val_docs,
               const ReasoningIndex& reasonings) {
    std::vector<ValidationIssue> issues;
    const auto& vocab = model_.vocab();
    for (const auto& doc : train_docs) {
      if (!doc.labeled()) {
        issues.push_back({doc.id, 0, "training document has no label_a"});
        continue;
      }
      Example ex{&doc, *doc.label_a, std::nullopt, {}, std::nullopt};
      if (doc.is_ai()) {
        if (!doc.label_b) {
          issues.push_back({doc.id, 0, "AI training document has no label_b"});
          continue;
        }
        ex.y_b = vocab.generator_index(*doc.label_b);
      }
      const Reasoning* r = nullptr;
      if (config_.use_cot) {
        r = find_reasoning(reasonings, doc, training_label(doc));
        if (!r) {
          issues.push_back({doc.id, 0, "missing reasoning for label '" + training_label(doc) + "'"});
          continue;
        }
      }
      ex.prepared = model_.encoder().prepare(model_.compose(doc, r));
      if (r && config_.reasoning_loss_weight > 0.0) {
        const CompositeInput only{r->text, {}, r->text};
        ex.reasoning_only = model_.encoder().prepare(only);
      }
      train_.push_back(std::move(ex));
    }
    for (const auto& doc : val_docs) {
      const Reasoning* r = nullptr;
      if (config_.use_cot) {
        r = find_reasoning(reasonings, doc, std::string(kInferenceLabel));
        if (!r) {
          issues.push_back({doc.id, 0, "missing inference reasoning for validation document"});
          continue;
        }
      }
      Example ex{&doc, doc.label_a.value_or(-1), std::nullopt, {}, std::nullopt};
      if (doc.is_ai() && doc.label_b) ex.y_b = vocab.generator_index(*doc.label_b);
      ex.prepared = model_.encoder().prepare(model_.compose(doc, r));
      val_.push_back(std::move(ex));
    }
    if (!issues.empty()) throw ValidationError(std::move(issues));
    if (val_.empty()) throw ConfigError("validation set is empty");

    params_ = model_.parameters();
    if (adam_.m.empty()) {
      for (const auto& p : params_) {
        adam_.m.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size)));
        adam_.v.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size)));
      }
    }
    if (adam_.m.size() != params_.size())
      throw CheckpointError("optimizer state does not match the model parameters");
  }

  bool empty() const { return train_.empty(); }

  EpochMetrics run_epoch(int epoch) {
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(stable_hash64("epoch-order", config_.seed) ^
                        (static_cast<std::uint64_t>(epoch) * 0x9E3779B97F4A7C15ULL));
    deterministic_shuffle(order, rng);

    const bool trainable_encoder = model_.encoder().trainable();
    double loss_sum = 0.0;
    const auto bs = static_cast<std::size_t>(config_.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      auto enc_grads = zero_encoder_grads();
      auto head_grads = HeadGradients::zeros(model_.heads());
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = train_[order[k]];
        double loss = accumulate(ex.prepared, ex.y_a, ex.y_b, 1.0, trainable_encoder, head_grads, enc_grads);
        if (ex.reasoning_only)
          loss += accumulate(*ex.reasoning_only, ex.y_a, std::nullopt, config_.reasoning_loss_weight,
                             trainable_encoder, head_grads, enc_grads);
        if (!std::isfinite(loss))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " on document " +
                             ex.doc->id);
        loss_sum += loss;
      }
      step(flatten(head_grads, std::move(enc_grads)), static_cast<double>(end - start));
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(train_.size());
    validate(m);
    return m;
  }

 private:
  std::vector<Eigen::VectorXd> zero_encoder_grads() const {
    std::vector<Eigen::VectorXd> g;
    for (std::size_t i = kHeadParams; i < params_.size(); ++i)
      g.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(params_[i].size)));
    return g;
  }

  // Adds one example's (weighted) loss gradients; returns the weighted loss.
  double accumulate(const Eigen::MatrixXd& prepared, int y_a, std::optional<std::size_t> y_b,
                    double weight, bool trainable_encoder, HeadGradients& head_grads,
                    std::vector<Eigen::VectorXd>& enc_grads) {
    std::unique_ptr<EncoderTape> tape;
    const Eigen::VectorXd x =
        model_.encoder().forward(prepared, trainable_encoder ? &tape : nullptr);
    auto ex_grads = HeadGradients::zeros(model_.heads());
    double loss;
    if (y_b || y_a == 0) {
      loss = example_loss(model_.heads(), x, y_a, y_b, &ex_grads);
    } else {
      // Task A only (auxiliary reasoning term): no Task B label.
      const double p = model_.heads().a.probability(x);
      loss = bce_loss(p, y_a);
      const double dz = p - static_cast<double>(y_a);
      ex_grads.a_weight += dz * x;
      ex_grads.a_bias += dz;
      ex_grads.input += dz * model_.heads().a.weight;
    }
    head_grads.a_weight += weight * ex_grads.a_weight;
    head_grads.a_bias += weight * ex_grads.a_bias;
    head_grads.b_weight += weight * ex_grads.b_weight;
    head_grads.b_bias += weight * ex_grads.b_bias;
    if (trainable_encoder && tape) model_.encoder().backward(*tape, weight * ex_grads.input, enc_grads);
    return weight * loss;
  }

  // Order matches DualHeads::parameters() followed by the encoder's.
  static std::vector<Eigen::VectorXd> flatten(const HeadGradients& h,
                                              std::vector<Eigen::VectorXd> enc_grads) {
    std::vector<Eigen::VectorXd> grads;
    grads.reserve(kHeadParams + enc_grads.size());
    grads.push_back(h.a_weight);
    grads.push_back(Eigen::VectorXd::Constant(1, h.a_bias));
    grads.push_back(Eigen::Map<const Eigen::VectorXd>(h.b_weight.data(), h.b_weight.size()));
    grads.push_back(h.b_bias);
    for (auto& g : enc_grads) grads.push_back(std::move(g));
    return grads;
  }

  void step(const std::vector<Eigen::VectorXd>& grads, double batch_n) {
    ++adam_.step;
    const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_.step));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Eigen::Map<Eigen::VectorXd> w(params_[i].data, static_cast<Eigen::Index>(params_[i].size));
      Eigen::VectorXd g = grads[i] / batch_n;
      if (params_[i].decay && config_.weight_decay > 0.0) g += config_.weight_decay * w;
      adam_.m[i] = b1 * adam_.m[i] + (1.0 - b1) * g;
      adam_.v[i] = b2 * adam_.v[i] + (1.0 - b2) * g.cwiseProduct(g);
      w.array() -= config_.learning_rate * (adam_.m[i].array() / c1) /
                   ((adam_.v[i].array() / c2).sqrt() + config_.adam_epsilon);
    }
  }

  void validate(EpochMetrics& m) const {
    std::vector<Prediction> preds;
    std::vector<Document> golds;
    preds.reserve(val_.size());
    golds.reserve(val_.size());
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (const auto& ex : val_) {
      const Eigen::VectorXd x = model_.encoder().forward(ex.prepared, nullptr);
      preds.push_back(cascade_predict(x, model_.heads(), model_.vocab(), config_.threshold, ex.doc->id));
      golds.push_back(*ex.doc);
      if (ex.y_a >= 0) {
        loss_sum += bce_loss(preds.back().p_ai, ex.y_a);
        if (ex.y_a == 1 && ex.y_b) {
          const Eigen::VectorXd dist = model_.heads().b.distribution(x);
          loss_sum += ce_loss(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size())),
                              *ex.y_b);
        }
        ++loss_n;
      }
    }
    const auto report = score(preds, golds);
    m.val_f1_a = report.task_a_f1;
    m.val_f1_b = report.task_b_f1;
    m.val_loss = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
    if (!std::isfinite(m.val_loss)) throw NumericError("non-finite validation loss");
  }

  static constexpr std::size_t kHeadParams = 4;

  DetectorModel& model_;
  const TrainConfig& config_;
  AdamState& adam_;
  std::vector<Example> train_;
  std::vector<Example> val_;
  std::vector<ParamView> params_;
};

TrainResult run(Checkpoint state, std::optional<Checkpoint> best, const TrainConfig& config,
                const std::vector<Document>& train_docs, const std::vector<Document>& val_docs,
                const ReasoningIndex& reasonings, const EpochCallback& on_epoch) {
  Trainer trainer(state.model, config, state.optimizer);
  trainer.prepare(train_docs, val_docs, reasonings);

  TrainResult result{best ? *best : state, state, {}, false};
  bool have_best = best.has_value();
  int since_improvement = 0;
  const int first = state.epoch + 1;
  const int last = state.epoch + config.epochs;
  for (int epoch = first; epoch <= last; ++epoch) {
    const auto m = trainer.run_epoch(epoch);
    result.history.push_back(m);
    state.epoch = epoch;
    state.metrics = m;
    const bool improved = !have_best || m.better_than(state.best_metrics);
    if (improved) {
      state.best_metrics = m;
      since_improvement = 0;
    } else {
      ++since_improvement;
    }
    if (improved) {
      result.best = state;
      have_best = true;
    }
    if (on_epoch) on_epoch(m, state, improved);
    if (config.early_stop_patience > 0 && since_improvement >= config.early_stop_patience &&
        epoch < last) {
      result.stopped_early = true;
      break;
    }
  }
  result.best.best_metrics = state.best_metrics;
  result.last = std::move(state);
  return result;
}

}  // namespace

TrainResult train(const std::vector<Document>& train_docs, const std::vector<Document>& val_docs,
                  const ReasoningIndex& reasonings, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (train_docs.empty()) throw EmptyCorpusError();
  auto vocab = build_vocabulary(train_docs);
  auto encoder = make_encoder(config.encoder);
  auto heads = DualHeads::init(encoder->config().embedding_dim, vocab.generator_count(),
                               stable_hash64("heads", config.seed));
  const auto hash = config_hash(encoder->config(), vocab, config.use_cot);
  DetectorModel model(std::move(vocab), std::move(encoder), std::move(heads), config.threshold,
                      config.use_cot);
  Checkpoint start{std::move(model), 0, {}, {}, hash, config, {}};
  return run(std::move(start), std::nullopt, config, train_docs, val_docs, reasonings, on_epoch);
}

TrainResult resume(const Checkpoint& last, const std::optional<Checkpoint>& best,
                   const TrainConfig& config, const std::vector<Document>& train_docs,
                   const std::vector<Document>& val_docs, const ReasoningIndex& reasonings,
                   const EpochCallback& on_epoch) {
  if (train_docs.empty()) return TrainResult{best ? *best : last, last, {}, false};
  config.validate();
  const auto vocab = build_vocabulary(train_docs);
  // A transformer's width comes from its checkpoint, not from the request.
  EncoderConfig requested = config.encoder;
  if (requested.backend == EncoderBackend::transformer)
    requested.embedding_dim = last.model.encoder().config().embedding_dim;
  const auto hash = config_hash(requested, vocab, config.use_cot);
  if (hash != last.config_hash)
    throw CheckpointError("cannot resume: vocabulary or model configuration differs from the checkpoint");
  if (config.threshold != last.model.threshold())
    throw CheckpointError("cannot resume with a different decision threshold");
  Checkpoint state = last;
  state.config = config;
  std::optional<Checkpoint> prev_best = best;
  if (!prev_best && last.epoch > 0) prev_best = last;
  return run(std::move(state), std::move(prev_best), config, train_docs, val_docs, reasonings, on_epoch);
}

}  // namespace cotd
