#include <doctest.h>

#include <filesystem>
#include <set>
#include <unistd.h>

#include "cli_driver.hpp"
#include "cotd/evaluation.hpp"
#include "cotd/training.hpp"
#include "synthetic.hpp"

using namespace cotd;
using namespace cotd::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("cotd-cli-" + name + "-" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<Document> small_corpus(std::size_t n = 150) { return synthetic_corpus({n, 3, 0.5, 11}); }

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

}  // namespace

TEST_CASE("empty input file fails with an empty-corpus error") {
  TempDir dir("empty");
  write_text(dir.path / "empty.jsonl", "");
  const auto r = cli({"--out-dir", (dir.path / "out").string(), "ingest", (dir.path / "empty.jsonl").string()});
  CHECK(r.code != 0);
  CHECK(r.err.find("empty corpus") != std::string::npos);
  const auto manifest = read_json(dir.path / "out" / "ingest.manifest.json");
  CHECK(manifest["exit_code"] == r.code);
  CHECK(manifest["error"]["message"].get<std::string>().find("empty corpus") != std::string::npos);
}

TEST_CASE("inconsistent labels are reported by document id") {
  TempDir dir("labels");
  auto docs = small_corpus(30);
  std::set<std::string> planted;
  for (std::size_t i = 0; i < docs.size() && planted.size() < 3; ++i)
    if (docs[i].label_a == 0) {
      docs[i].label_b = "gen-a";
      planted.insert(docs[i].id);
    }
  write_text(dir.path / "bad.jsonl", serialize_jsonl(docs));
  const auto r = cli({"--out-dir", (dir.path / "out").string(), "ingest", (dir.path / "bad.jsonl").string()});
  CHECK(r.code == 2);
  const auto err = nlohmann::json::parse(r.err);
  std::set<std::string> reported;
  for (const auto& issue : err["issues"]) reported.insert(issue["id"].get<std::string>());
  CHECK(reported == planted);
}

TEST_CASE("unparseable arguments and unknown files are invalid input") {
  TempDir dir("args");
  CHECK(cli({"--out-dir", dir.path.string(), "ingest", (dir.path / "missing.jsonl").string()}).code != 0);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"train", "--epochs", "many"}).code == 2);
  CHECK(cli({"--version"}).code == 0);
}

TEST_CASE("full pipeline, warm cache and manifests") {
  TempDir dir("pipeline");
  const auto p = run_cli_pipeline(dir.path, small_corpus(), 3, true);
  for (const auto& s : p.steps) INFO(s.err);
  REQUIRE(p.ok());
  CHECK(fs::exists(p.data / "train.jsonl"));
  CHECK(fs::exists(p.data / "stats.json"));
  CHECK(fs::exists(p.run / "checkpoints" / "best" / "checkpoint.json"));
  CHECK(fs::exists(p.run / "checkpoints" / "last" / "checkpoint.json"));
  CHECK(fs::exists(p.metrics.parent_path() / "metrics.txt"));

  const auto train_manifest = read_json(p.run / "train.manifest.json");
  CHECK(train_manifest["exit_code"] == 0);
  CHECK(train_manifest["config"]["command"]["use_cot"] == true);
  CHECK(train_manifest["input_hashes"].size() >= 3);
  CHECK_FALSE(fs::exists(p.run / "run.lock"));

  SUBCASE("rerunning reason is served from the cache") {
    const auto data = p.data.string();
    const auto r = cli({"--out-dir", (dir.path / "reason2").string(), "reason", "--cache", p.cache.string(),
                        data + "/train.jsonl", data + "/val.jsonl", data + "/test.jsonl"});
    CHECK(r.code == 0);
    CHECK(r.out.find("generated: 0") != std::string::npos);
    const auto report = read_json(dir.path / "reason2" / "reason_report.json");
    CHECK(report["generated"] == 0);
    CHECK(report["cached"] == report["requests"]);
  }

  SUBCASE("prediction file re-scored in process matches evaluate") {
    const auto golds = load_dataset((p.data / "test.jsonl").string());
    const auto preds = parse_predictions(read_text(p.predictions));
    const auto in_process = score(preds, golds);
    const auto reported = read_json(p.metrics);
    CHECK(std::abs(in_process.task_a_f1 - reported["task_a_f1"].get<double>()) <= 1e-12);
    CHECK(std::abs(in_process.task_b_f1 - reported["task_b_f1"].get<double>()) <= 1e-12);

    // And the file agrees with predicting directly from the loaded checkpoint.
    const auto ckpt = Checkpoint::load(p.run / "checkpoints" / "best");
    ReasoningCache cache(p.cache, ReasoningCache::Mode::read_only);
    TemplateBackend backend;
    for (std::size_t i = 0; i < golds.size(); ++i) {
      auto r = cache.lookup(ReasoningCache::key(golds[i].text, std::string(kInferenceLabel), backend.id(),
                                                backend.template_version()));
      REQUIRE(r.has_value());
      r->doc_id = golds[i].id;
      const auto direct = ckpt.model.predict(golds[i], &*r);
      CHECK(direct.p_ai == preds[i].p_ai);
      CHECK(direct.label_b == preds[i].label_b);
    }
  }

  SUBCASE("predicting without a cache fails when the model uses reasoning") {
    const auto r = cli({"--out-dir", (dir.path / "p2").string(), "predict", "--checkpoint", p.run.string(),
                        "--corpus", (p.data / "test.jsonl").string()});
    CHECK(r.code != 0);
  }

  SUBCASE("resume continues the epoch counter and appends metrics") {
    const auto data = p.data.string();
    const auto r = cli({"--out-dir", p.run.string(), "train", "--train", data + "/train.jsonl", "--val",
                        data + "/val.jsonl", "--epochs", "2", "--lr", "1e-3", "--dim", "1024", "--cache",
                        p.cache.string(), "--resume"});
    INFO(r.err);
    CHECK(r.code == 0);
    const auto text = read_text(p.run / "metrics.jsonl");
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);
    CHECK(read_json(p.run / "checkpoints" / "last" / "checkpoint.json")["epoch"] == 5);
  }

  SUBCASE("report tabulates evaluated methods") {
    const auto r = cli({"--out-dir", (dir.path / "report").string(), "report", "--input",
                        "cot=" + p.metrics.string()});
    CHECK(r.code == 0);
    CHECK(read_text(dir.path / "report" / "table.txt").find("cot") != std::string::npos);
    CHECK(fs::exists(dir.path / "report" / "leaderboard.txt"));
  }
}

TEST_CASE("training without a reasoning cache fails unless --no-cot is given") {
  TempDir dir("nocache");
  const auto raw = dir.path / "raw.jsonl";
  write_text(raw, serialize_jsonl(small_corpus(90)));
  REQUIRE(cli({"--out-dir", (dir.path / "data").string(), "ingest", "--split", raw.string()}).code == 0);
  const auto data = (dir.path / "data").string();
  const std::vector<std::string> base{"--out-dir", (dir.path / "run").string(), "train", "--train",
                                      data + "/train.jsonl", "--val", data + "/val.jsonl", "--epochs", "1"};
  auto missing = base;
  missing.insert(missing.end(), {"--cache", (dir.path / "nope.jsonl").string()});
  const auto r = cli(missing);
  CHECK(r.code != 0);
  CHECK(r.err.find("reasoning cache not found") != std::string::npos);
  CHECK_FALSE(fs::exists(dir.path / "nope.jsonl"));

  auto plain = base;
  plain.push_back("--no-cot");
  const auto ok = cli(plain);
  INFO(ok.err);
  CHECK(ok.code == 0);
  const auto manifest = read_json(dir.path / "run" / "train.manifest.json");
  CHECK(manifest["config"]["command"]["use_cot"] == false);
  CHECK(read_json(dir.path / "run" / "checkpoints" / "best" / "checkpoint.json")["use_cot"] == false);
}

TEST_CASE("a held run lock refuses a concurrent run") {
  TempDir dir("lock");
  const auto raw = dir.path / "raw.jsonl";
  write_text(raw, serialize_jsonl(small_corpus(90)));
  REQUIRE(cli({"--out-dir", (dir.path / "data").string(), "ingest", "--split", raw.string()}).code == 0);
  const auto data = (dir.path / "data").string();
  write_text(dir.path / "run" / "run.lock", "held");
  const auto r = cli({"--out-dir", (dir.path / "run").string(), "train", "--train", data + "/train.jsonl", "--val",
                      data + "/val.jsonl", "--epochs", "1", "--no-cot"});
  CHECK(r.code != 0);
}

TEST_CASE("reruns with the same seed give identical metrics logs") {
  TempDir a("rerun-a"), b("rerun-b");
  const auto pa = run_cli_pipeline(a.path, small_corpus(), 3, true, 5);
  const auto pb = run_cli_pipeline(b.path, small_corpus(), 3, true, 5);
  REQUIRE(pa.ok());
  REQUIRE(pb.ok());
  CHECK(read_text(pa.run / "metrics.jsonl") == read_text(pb.run / "metrics.jsonl"));
  CHECK(read_text(pa.predictions) == read_text(pb.predictions));
}

TEST_CASE("an unreachable chat backend is a partial failure") {
  TempDir dir("chat");
  write_text(dir.path / "c.jsonl", serialize_jsonl(small_corpus(12)));
  const auto r = cli({"--out-dir", (dir.path / "out").string(), "reason", "--cache", (dir.path / "cache.jsonl").string(),
                      "--backend", "chat", "--endpoint", "http://127.0.0.1:1/v1/chat/completions", "--model", "m",
                      "--max-retries", "0", "--timeout", "1", (dir.path / "c.jsonl").string()});
  CHECK(r.code == 3);
  const auto report = read_json(dir.path / "out" / "reason_report.json");
  CHECK(report["failed"].get<int>() > 0);
  CHECK(report["generated"] == 0);
}

TEST_CASE("ingest --split honours comma-separated fractions") {
  TempDir dir("fractions");
  write_text(dir.path / "raw.jsonl", serialize_jsonl(small_corpus(100)));
  const auto r = cli({"--out-dir", (dir.path / "out").string(), "ingest", "--split", "--fractions", "0.8,0.1,0.1",
                      (dir.path / "raw.jsonl").string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto stats = read_json(dir.path / "out" / "stats.json");
  CHECK(stats["split_sizes"]["train"] == 80);
  CHECK(stats["split_sizes"]["val"] == 10);
  CHECK(stats["split_sizes"]["test"] == 10);
  CHECK(cli({"--out-dir", (dir.path / "bad").string(), "ingest", "--split", "--fractions", "0.5,0.1,0.1",
             (dir.path / "raw.jsonl").string()})
            .code == 2);
}
