#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "cotd/errors.hpp"
#include "cotd/training.hpp"
#include "cotd/transformer.hpp"
#include "synthetic.hpp"

using namespace cotd;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  std::vector<Document> train, val;
  ReasoningIndex reasonings;
};

Fixture fixture(std::size_t n = 120, std::uint64_t seed = 3) {
  const auto corpus = cotd::testing::synthetic_corpus({n, 3, 0.5, seed});
  auto split = split_stratified(corpus, SplitSpec{0.7, 0.15, 0.15, seed});
  Fixture f{split.train, split.val, {}};
  for (const auto& d : f.train) f.reasonings.emplace(std::make_pair(d.id, training_label(d)), template_reasoning(d, training_label(d)));
  for (const auto& d : f.val)
    f.reasonings.emplace(std::make_pair(d.id, std::string(kInferenceLabel)), template_reasoning(d, kInferenceLabel));
  return f;
}

TrainConfig config(int epochs, int batch = 32) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.learning_rate = 1e-3;
  c.encoder.embedding_dim = 512;
  return c;
}

std::vector<Prediction> predict_all(const DetectorModel& m, const Fixture& f) {
  std::vector<Prediction> out;
  for (const auto& d : f.val) out.push_back(m.predict(d, &f.reasonings.at({d.id, std::string(kInferenceLabel)})));
  return out;
}

double max_param_diff(DetectorModel a, DetectorModel b) {
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  double worst = 0;
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k].size; ++i) worst = std::max(worst, std::abs(pa[k].data[i] - pb[k].data[i]));
  return worst;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("cotd-test-" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation and json round trip") {
  auto c = config(3);
  c.validate();
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(c.to_json()["optimizer"] == "adam");
  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& t) { t.epochs = 0; }, [](TrainConfig& t) { t.batch_size = 0; },
           [](TrainConfig& t) { t.learning_rate = -1; }, [](TrainConfig& t) { t.threshold = 1.5; }}) {
    auto bad = c;
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
  const TrainConfig defaults;
  CHECK(defaults.learning_rate == 2e-5);
  CHECK(defaults.batch_size == 32);
  CHECK(defaults.epochs == 50);
}

TEST_CASE("identical seeds give identical runs") {
  const auto f = fixture();
  const auto a = train(f.train, f.val, f.reasonings, config(3));
  const auto b = train(f.train, f.val, f.reasonings, config(3));
  REQUIRE(a.history.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
  }
  CHECK(max_param_diff(a.last.model, b.last.model) == 0.0);
  auto other = config(3);
  other.seed = 1;
  CHECK(max_param_diff(a.last.model, train(f.train, f.val, f.reasonings, other).last.model) > 0.0);
}

TEST_CASE("resuming 5 + 5 epochs equals 10 straight") {
  const auto f = fixture();
  const int full = static_cast<int>(f.train.size());
  for (int batch : {full, 16}) {
    CAPTURE(batch);
    const auto straight = train(f.train, f.val, f.reasonings, config(10, batch));
    const auto first = train(f.train, f.val, f.reasonings, config(5, batch));
    const auto second = resume(first.last, first.best, config(5, batch), f.train, f.val, f.reasonings);
    CHECK(second.last.epoch == 10);
    CHECK(second.last.optimizer.step == straight.last.optimizer.step);
    CHECK(max_param_diff(second.last.model, straight.last.model) <= 1e-6);
    CHECK(std::abs(second.history.back().val_loss - straight.history.back().val_loss) <= 1e-6);
    CHECK(second.best.metrics.val_f1_a == straight.best.metrics.val_f1_a);
  }
}

TEST_CASE("resume through a saved checkpoint also matches") {
  const auto f = fixture();
  TempDir dir("resume");
  const auto straight = train(f.train, f.val, f.reasonings, config(6));
  const auto first = train(f.train, f.val, f.reasonings, config(3));
  first.last.save(dir.path / "last");
  first.best.save(dir.path / "best");
  const auto second = resume(Checkpoint::load(dir.path / "last"), Checkpoint::load(dir.path / "best"), config(3),
                             f.train, f.val, f.reasonings);
  CHECK(max_param_diff(second.last.model, straight.last.model) <= 1e-6);
}

TEST_CASE("resume rejects a different configuration") {
  const auto f = fixture();
  const auto first = train(f.train, f.val, f.reasonings, config(1));
  auto changed = config(1);
  changed.encoder.embedding_dim = 256;
  CHECK_THROWS_AS(resume(first.last, first.best, changed, f.train, f.val, f.reasonings), CheckpointError);
  auto no_cot = config(1);
  no_cot.use_cot = false;
  CHECK_THROWS_AS(resume(first.last, first.best, no_cot, f.train, f.val, f.reasonings), CheckpointError);
  auto threshold = config(1);
  threshold.threshold = 0.7;
  CHECK_THROWS_AS(resume(first.last, first.best, threshold, f.train, f.val, f.reasonings), CheckpointError);
  auto seed = config(1);
  seed.encoder.hash_seed = 9;
  CHECK_THROWS_AS(resume(first.last, first.best, seed, f.train, f.val, f.reasonings), CheckpointError);
}

TEST_CASE("checkpoint round trip reproduces predictions bit for bit") {
  const auto f = fixture();
  TempDir dir("ckpt");
  const auto run = train(f.train, f.val, f.reasonings, config(3));
  run.best.save(dir.path);
  for (const char* file : {"checkpoint.json", "vocab.json", "task_a_head.bin", "task_b_head.bin", "optimizer.bin"})
    CHECK(fs::exists(dir.path / file));
  CHECK(fs::is_directory(dir.path / "encoder"));
  const auto loaded = Checkpoint::load(dir.path);
  CHECK(loaded.epoch == run.best.epoch);
  CHECK(loaded.config_hash == run.best.config_hash);
  CHECK(loaded.model.vocab() == run.best.model.vocab());
  const auto a = predict_all(run.best.model, f);
  const auto b = predict_all(loaded.model, f);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].p_ai == b[i].p_ai);
    CHECK(a[i].label_b == b[i].label_b);
    if (a[i].dist_b) CHECK(*a[i].dist_b == *b[i].dist_b);
  }
}

TEST_CASE("checkpoint format version mismatch is refused") {
  const auto f = fixture();
  TempDir dir("version");
  train(f.train, f.val, f.reasonings, config(1)).last.save(dir.path);
  const auto path = dir.path / "checkpoint.json";
  auto j = nlohmann::json::parse(std::ifstream(path));
  j["format_version"] = Checkpoint::kFormatVersion + 1;
  std::ofstream(path) << j.dump();
  CHECK_THROWS_AS(Checkpoint::load(dir.path), CheckpointError);
}

TEST_CASE("missing reasoning is reported with document ids") {
  auto f = fixture();
  const auto victim_a = f.train[0].id, victim_b = f.train[5].id;
  f.reasonings.erase({victim_a, training_label(f.train[0])});
  f.reasonings.erase({victim_b, training_label(f.train[5])});
  try {
    train(f.train, f.val, f.reasonings, config(1));
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    std::set<std::string> ids;
    for (const auto& issue : e.issues()) ids.insert(issue.id);
    CHECK(ids == std::set<std::string>{victim_a, victim_b});
  }
  // Without CoT the same index is fine.
  auto c = config(1);
  c.use_cot = false;
  CHECK_NOTHROW(train(f.train, f.val, f.reasonings, c));
}

TEST_CASE("AI training documents need a generator label") {
  auto f = fixture();
  for (auto& d : f.train)
    if (d.label_a == 1) {
      d.label_b.reset();
      break;
    }
  auto c = config(1);
  c.use_cot = false;
  CHECK_THROWS_AS(train(f.train, f.val, f.reasonings, c), ValidationError);
}

TEST_CASE("full-batch training loss does not increase early on at a small learning rate") {
  const auto f = fixture();
  auto c = config(4, static_cast<int>(f.train.size()));
  c.learning_rate = 1e-4;
  c.weight_decay = 0.0;
  const auto run = train(f.train, f.val, f.reasonings, c);
  for (std::size_t i = 1; i < 4; ++i) CHECK(run.history[i].train_loss <= run.history[i - 1].train_loss);
}

TEST_CASE("best checkpoint tracks the best validation epoch and the callback fires") {
  const auto f = fixture();
  std::vector<int> epochs;
  int improvements = 0;
  const auto run = train(f.train, f.val, f.reasonings, config(4),
                         [&](const EpochMetrics& m, const Checkpoint& state, bool improved) {
                           epochs.push_back(m.epoch);
                           CHECK(state.epoch == m.epoch);
                           improvements += improved;
                         });
  CHECK(epochs == std::vector<int>{1, 2, 3, 4});
  CHECK(improvements >= 1);
  for (const auto& m : run.history) CHECK_FALSE(m.better_than(run.best.metrics));
}

TEST_CASE("early stopping honours patience") {
  const auto f = fixture();
  auto c = config(40);
  c.early_stop_patience = 2;
  const auto run = train(f.train, f.val, f.reasonings, c);
  if (run.stopped_early) {
    CHECK(run.history.size() < 40);
    CHECK(run.history.back().epoch - run.best.epoch == 2);
  } else {
    CHECK(run.history.size() == 40);
  }
}

TEST_CASE("empty validation set is a configuration error") {
  const auto f = fixture();
  CHECK_THROWS_AS(train(f.train, {}, f.reasonings, config(1)), ConfigError);
}

TEST_CASE("predict requires reasoning when trained with it") {
  const auto f = fixture();
  const auto run = train(f.train, f.val, f.reasonings, config(1));
  CHECK_THROWS_AS(run.best.model.predict(f.val[0], nullptr), ConfigError);
  auto c = config(1);
  c.use_cot = false;
  const auto plain = train(f.train, f.val, f.reasonings, c);
  CHECK_NOTHROW(plain.best.model.predict(f.val[0], nullptr));
}

TEST_CASE("transformer encoder trains end to end") {
  const auto f = fixture(60);
  TempDir dir("tf-train");
  TransformerArch arch;
  arch.vocab_size = 257;
  arch.hidden = 8;
  arch.heads = 2;
  arch.layers = 2;
  arch.ffn = 16;
  arch.max_positions = 64;
  arch.output_dim = 8;
  TransformerEncoder::init_checkpoint(dir.path / "enc", arch, 1);
  auto c = config(2, 16);
  c.encoder.backend = EncoderBackend::transformer;
  c.encoder.checkpoint = (dir.path / "enc").string();
  c.encoder.trainable_depth = 1;
  c.encoder.max_tokens = 64;
  const auto run = train(f.train, f.val, f.reasonings, c);
  CHECK(run.history.size() == 2);
  CHECK(std::isfinite(run.history.back().train_loss));
  // Encoder parameters moved.
  EncoderConfig ec = c.encoder;
  auto fresh = make_encoder(ec);
  auto trained = run.last.model.encoder().clone();
  auto pf = fresh->parameters(), pt = trained->parameters();
  REQUIRE(pf.size() == pt.size());
  double moved = 0;
  for (std::size_t k = 0; k < pf.size(); ++k)
    for (std::size_t i = 0; i < pf[k].size; ++i) moved = std::max(moved, std::abs(pf[k].data[i] - pt[k].data[i]));
  CHECK(moved > 0.0);
  run.last.save(dir.path / "ckpt");
  const auto loaded = Checkpoint::load(dir.path / "ckpt");
  const auto& d = f.val[0];
  const auto& r = f.reasonings.at({d.id, std::string(kInferenceLabel)});
  CHECK(loaded.model.predict(d, &r).p_ai == run.last.model.predict(d, &r).p_ai);
}
