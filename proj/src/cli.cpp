#include "cotd/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "cotd/chat_backend.hpp"
#include "cotd/errors.hpp"
#include "cotd/evaluation.hpp"
#include "cotd/util.hpp"

namespace fs = std::filesystem;

namespace cotd::cli {

// ---------------------------------------------------------------------------
// Manifest

nlohmann::json RunManifest::to_json() const {
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& [path, digest] : input_hashes) hashes[path] = digest;
  return {{"command", command},
          {"config", config},
          {"input_hashes", hashes},
          {"tool_version", tool_version},
          {"started_at", started_at},
          {"finished_at", finished_at ? nlohmann::json(*finished_at) : nlohmann::json()},
          {"exit_code", exit_code ? nlohmann::json(*exit_code) : nlohmann::json()},
          {"outputs", outputs},
          {"error", error}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.value("config", nlohmann::json::object());
  for (const auto& [path, digest] : j.value("input_hashes", nlohmann::json::object()).items())
    m.input_hashes[path] = digest.get<std::string>();
  m.tool_version = j.value("tool_version", std::string());
  m.started_at = j.value("started_at", std::string());
  if (j.contains("finished_at") && !j.at("finished_at").is_null())
    m.finished_at = j.at("finished_at").get<std::string>();
  if (j.contains("exit_code") && !j.at("exit_code").is_null()) m.exit_code = j.at("exit_code").get<int>();
  m.outputs = j.value("outputs", nlohmann::json::array());
  m.error = j.value("error", nlohmann::json());
  return m;
}

void RunManifest::write(const fs::path& out_dir) const {
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / (command + ".manifest.json"), to_json().dump(2) + "\n");
}

namespace {

// Manifest of a command that unwound before finishing; run() stamps it with
// the real exit code once the exception is caught.
thread_local std::optional<std::pair<fs::path, RunManifest>> t_abandoned;

std::string hash_input(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<std::string> lines;
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
      if (!entry.is_regular_file()) continue;
      lines.push_back(fs::relative(entry.path(), path).generic_string() + '\0' + sha256_file(entry.path()));
    }
    std::sort(lines.begin(), lines.end());
    std::string material;
    for (const auto& l : lines) material += l + '\n';
    return sha256_hex(material);
  }
  if (!fs::exists(path)) throw Error("input not found: " + path.string());
  return sha256_file(path);
}

class ManifestScope {
 public:
  ManifestScope(const GlobalOptions& g, std::string command, nlohmann::json config,
                const std::vector<std::string>& inputs)
      : out_dir_(g.out_dir) {
    m_.command = std::move(command);
    m_.tool_version = std::string(kVersion);
    m_.started_at = utc_timestamp();
    m_.config = {{"seed", g.seed},
                 {"format", g.format ? nlohmann::json(*g.format == DataFormat::csv ? "csv" : "jsonl")
                                     : nlohmann::json("auto")},
                 {"out_dir", g.out_dir.string()},
                 {"command", std::move(config)}};
    for (const auto& in : inputs) m_.input_hashes[in] = hash_input(in);
    m_.write(out_dir_);
  }
  ManifestScope(const ManifestScope&) = delete;
  ManifestScope& operator=(const ManifestScope&) = delete;

  ~ManifestScope() {
    if (m_.finished_at) return;
    try {
      finish(kFailure);
      t_abandoned.emplace(out_dir_, m_);
    } catch (...) {
    }
  }

  void output(const fs::path& p) { m_.outputs.push_back(p.string()); }

  int finish(int code) {
    m_.exit_code = code;
    m_.finished_at = utc_timestamp();
    m_.write(out_dir_);
    return code;
  }

 private:
  fs::path out_dir_;
  RunManifest m_;
};

// Exclusive lock on a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw Error("run directory is locked by another process: " + path_.string());
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

std::vector<Document> load(const GlobalOptions& g, const std::string& path) {
  auto docs = load_dataset(path, g.format);
  if (docs.empty()) throw EmptyCorpusError();
  return docs;
}

void require_unique_ids(const std::vector<Document>& docs) {
  std::set<std::string> seen;
  std::vector<ValidationIssue> issues;
  for (const auto& d : docs)
    if (!seen.insert(d.id).second) issues.push_back({d.id, 0, "duplicate id"});
  if (!issues.empty()) throw ValidationError(std::move(issues));
}

fs::path write_corpus(const GlobalOptions& g, const std::string& name, const std::vector<Document>& docs) {
  const auto path = g.out_dir / (name + ".jsonl");
  write_file_atomic(path, serialize_jsonl(docs));
  return path;
}


std::string conditioning_name(Conditioning c) {
  switch (c) {
    case Conditioning::gold: return "gold";
    case Conditioning::inference: return "inference";
    case Conditioning::both: return "both";
  }
  return "both";
}

// Loads inference- or gold-conditioned reasoning for `docs`.
ReasoningIndex reasoning_for(const std::optional<std::string>& cache_path, const BackendOptions& backend,
                             const std::vector<std::pair<const std::vector<Document>*, bool>>& sets) {
  if (!cache_path || !fs::exists(*cache_path))
    throw ConfigError("reasoning cache not found" + (cache_path ? ": " + *cache_path : std::string()) +
                      " (run `reason` first or pass --no-cot)");
  const ReasoningCache cache(*cache_path, ReasoningCache::Mode::read_only);
  const auto gen = make_backend(backend);
  ReasoningIndex index;
  for (const auto& [docs, gold] : sets) {
    auto part = index_from_cache(
        cache, *docs,
        [gold = gold](const Document& d) {
          return std::vector<std::string>{gold ? training_label(d) : std::string(kInferenceLabel)};
        },
        gen->id(), gen->template_version());
    index.merge(part);
  }
  return index;
}

}  // namespace

nlohmann::json BackendOptions::to_json() const {
  return {{"kind", kind},         {"endpoint", endpoint},           {"model", model},
          {"token_env", token_env}, {"timeout_seconds", timeout_seconds}, {"max_retries", max_retries}};
}

std::unique_ptr<GeneratorBackend> make_backend(const BackendOptions& o) {
  if (o.kind == "template") return std::make_unique<TemplateBackend>();
  if (o.kind == "chat") {
    if (o.endpoint.empty() || o.model.empty()) throw ConfigError("chat backend needs --endpoint and --model");
    return std::make_unique<ChatCompletionBackend>(
        ChatBackendConfig{o.endpoint, o.model, o.token_env, o.timeout_seconds});
  }
  throw ConfigError("unknown backend '" + o.kind + "'");
}

// ---------------------------------------------------------------------------
// Commands

int cmd_ingest(const GlobalOptions& g, const IngestOptions& o, std::ostream& out) {
  o.split_spec.validate();
  std::vector<std::string> inputs = o.inputs;
  for (const auto* p : {&o.train, &o.val, &o.test})
    if (*p) inputs.push_back(**p);
  if (inputs.empty()) throw ConfigError("ingest needs at least one input file");
  if (o.split && o.inputs.empty()) throw ConfigError("--split needs positional input files");
  if (o.split && (o.train || o.val || o.test))
    throw ConfigError("--split cannot be combined with --train/--val/--test");

  const nlohmann::json config{{"inputs", o.inputs},
                              {"train", o.train.value_or("")},
                              {"val", o.val.value_or("")},
                              {"test", o.test.value_or("")},
                              {"split", o.split},
                              {"fractions",
                               {o.split_spec.train_fraction, o.split_spec.val_fraction,
                                o.split_spec.test_fraction}}};
  ManifestScope manifest(g, "ingest", config, inputs);

  nlohmann::json stats{{"files", nlohmann::json::object()},
                       {"splits", nlohmann::json::object()},
                       {"split_sizes", nlohmann::json::object()},
                       {"warnings", nlohmann::json::array()}};
  std::vector<Document> everything;
  auto add_split = [&](const std::string& name, const std::vector<Document>& docs) {
    const auto path = write_corpus(g, name, docs);
    manifest.output(path);
    stats["splits"][name] = compute_stats(docs).to_json();
    stats["split_sizes"][name] = docs.size();
  };

  std::vector<Document> merged;
  for (const auto& path : o.inputs) {
    auto docs = load(g, path);
    stats["files"][path] = compute_stats(docs).to_json();
    merged.insert(merged.end(), docs.begin(), docs.end());
  }
  if (!o.inputs.empty()) {
    require_unique_ids(merged);
    if (o.split) {
      SplitSpec spec = o.split_spec;
      spec.seed = g.seed;
      auto parts = split_stratified(merged, spec);
      for (const auto& w : parts.warnings) stats["warnings"].push_back(w);
      add_split("train", parts.train);
      add_split("val", parts.val);
      add_split("test", parts.test);
    } else {
      add_split("corpus", merged);
    }
    everything = merged;
  }
  for (const auto& [name, path] : {std::pair{"train", &o.train}, {"val", &o.val}, {"test", &o.test}}) {
    if (!*path) continue;
    auto docs = load(g, **path);
    require_unique_ids(docs);
    stats["files"][**path] = compute_stats(docs).to_json();
    add_split(name, docs);
    everything.insert(everything.end(), docs.begin(), docs.end());
  }

  std::set<std::string> seen;
  std::size_t shared = 0;
  for (const auto& d : everything)
    if (!seen.insert(d.id).second) ++shared;
  if (shared > 0)
    stats["warnings"].push_back(std::to_string(shared) + " documents appear in more than one input");
  stats["total"] = compute_stats(everything).to_json();

  const auto stats_path = g.out_dir / "stats.json";
  write_file_atomic(stats_path, stats.dump(2) + "\n");
  manifest.output(stats_path);

  out << "rows: " << everything.size() << "\n";
  for (const auto& [name, n] : stats["split_sizes"].items()) out << "  " << name << ": " << n.get<std::size_t>() << "\n";
  for (const auto& w : stats["warnings"]) out << "warning: " << w.get<std::string>() << "\n";
  return manifest.finish(kOk);
}

int cmd_reason(const GlobalOptions& g, const ReasonOptions& o, std::ostream& out) {
  if (o.corpora.empty()) throw ConfigError("reason needs at least one corpus file");
  if (o.cache.empty()) throw ConfigError("reason needs --cache");
  if (o.max_inflight == 0) throw ConfigError("--max-inflight must be >= 1");
  const nlohmann::json config{{"corpora", o.corpora},
                              {"cache", o.cache},
                              {"backend", o.backend.to_json()},
                              {"conditioning", conditioning_name(o.conditioning)},
                              {"max_inflight", o.max_inflight}};
  ManifestScope manifest(g, "reason", config, o.corpora);

  std::vector<std::vector<Document>> corpora;
  for (const auto& path : o.corpora) corpora.push_back(load(g, path));
  std::vector<GenerationRequest> requests;
  for (const auto& docs : corpora) {
    for (const auto& d : docs) {
      if (o.conditioning != Conditioning::inference && d.labeled()) requests.push_back({&d, training_label(d)});
      if (o.conditioning != Conditioning::gold) requests.push_back({&d, std::string(kInferenceLabel)});
    }
  }

  auto backend = make_backend(o.backend);
  ReasoningCache cache(o.cache);
  RetryPolicy retry;
  retry.max_retries = o.backend.max_retries;
  const auto report = generate_all(requests, *backend, cache, retry, o.max_inflight);

  auto j = report.to_json();
  j["requests"] = requests.size();
  j["cache_entries"] = cache.size();
  j["backend_id"] = backend->id();
  const auto report_path = g.out_dir / "reason_report.json";
  write_file_atomic(report_path, j.dump(2) + "\n");
  manifest.output(report_path);
  manifest.output(o.cache);

  out << "generated: " << report.generated << "\ncached: " << report.cached << "\nfailed: " << report.failed
      << "\n";
  return manifest.finish(report.failed == 0 ? kOk : kPartialFailure);
}

int cmd_train(const GlobalOptions& g, const TrainOptions& o, std::ostream& out) {
  TrainConfig config = o.config;
  config.seed = g.seed;
  config.validate();
  std::vector<std::string> inputs{o.train, o.val};
  if (config.use_cot && o.cache && fs::exists(*o.cache)) inputs.push_back(*o.cache);
  if (!config.encoder.checkpoint.empty()) inputs.push_back(config.encoder.checkpoint);
  const nlohmann::json manifest_config{{"train", o.train},
                                       {"val", o.val},
                                       {"cache", o.cache.value_or("")},
                                       {"backend", o.backend.to_json()},
                                       {"resume", o.resume},
                                       {"use_cot", config.use_cot},
                                       {"train_config", config.to_json()}};
  fs::create_directories(g.out_dir);
  RunLock lock(g.out_dir / "run.lock");
  ManifestScope manifest(g, "train", manifest_config, inputs);

  const auto train_docs = load(g, o.train);
  const auto val_docs = load(g, o.val);
  ReasoningIndex reasonings;
  if (config.use_cot) reasonings = reasoning_for(o.cache, o.backend, {{&train_docs, true}, {&val_docs, false}});

  write_file_atomic(g.out_dir / "config.json", config.to_json().dump(2) + "\n");
  const auto ckpt_dir = g.out_dir / "checkpoints";
  const auto metrics_path = g.out_dir / "metrics.jsonl";

  std::optional<Checkpoint> last;
  std::optional<Checkpoint> best;
  if (o.resume) {
    if (!fs::exists(ckpt_dir / "last" / "checkpoint.json"))
      throw CheckpointError("nothing to resume in " + ckpt_dir.string());
    last = Checkpoint::load(ckpt_dir / "last");
    if (fs::exists(ckpt_dir / "best" / "checkpoint.json")) best = Checkpoint::load(ckpt_dir / "best");
  }

  std::ofstream metrics(metrics_path, o.resume ? std::ios::app | std::ios::binary
                                               : std::ios::trunc | std::ios::binary);
  if (!metrics) throw Error("cannot write " + metrics_path.string());
  const EpochCallback on_epoch = [&](const EpochMetrics& m, const Checkpoint& state, bool improved) {
    metrics << m.to_json().dump() << '\n';
    metrics.flush();
    state.save(ckpt_dir / "last");
    if (improved) state.save(ckpt_dir / "best");
    out << "epoch " << m.epoch << " train_loss " << m.train_loss << " val_loss " << m.val_loss
        << " val_f1_a " << m.val_f1_a << " val_f1_b " << m.val_f1_b << (improved ? " *" : "") << "\n";
  };

  const auto result = last ? resume(*last, best, config, train_docs, val_docs, reasonings, on_epoch)
                           : train(train_docs, val_docs, reasonings, config, on_epoch);
  if (result.history.empty()) {
    result.last.save(ckpt_dir / "last");
    result.best.save(ckpt_dir / "best");
  }
  manifest.output(metrics_path);
  manifest.output(ckpt_dir / "best");
  manifest.output(ckpt_dir / "last");
  out << "best epoch " << result.best.epoch << " val_f1_a " << result.best.best_metrics.val_f1_a
      << " val_f1_b " << result.best.best_metrics.val_f1_b << (result.stopped_early ? " (stopped early)" : "")
      << "\n";
  return manifest.finish(kOk);
}

int cmd_predict(const GlobalOptions& g, const PredictOptions& o, std::ostream& out) {
  fs::path ckpt = o.checkpoint;
  if (fs::exists(ckpt / "checkpoints" / "best" / "checkpoint.json")) ckpt = ckpt / "checkpoints" / "best";
  std::vector<std::string> inputs{ckpt.string(), o.corpus};
  if (o.cache && fs::exists(*o.cache)) inputs.push_back(*o.cache);
  const nlohmann::json config{{"checkpoint", ckpt.string()},
                              {"corpus", o.corpus},
                              {"cache", o.cache.value_or("")},
                              {"backend", o.backend.to_json()},
                              {"output", o.output}};
  ManifestScope manifest(g, "predict", config, inputs);

  const auto model = Checkpoint::load(ckpt).model;
  const auto docs = load(g, o.corpus);
  require_unique_ids(docs);
  ReasoningIndex reasonings;
  if (model.use_cot()) {
    reasonings = reasoning_for(o.cache, o.backend, {{&docs, false}});
    std::vector<ValidationIssue> missing;
    for (const auto& d : docs)
      if (!reasonings.count({d.id, std::string(kInferenceLabel)}))
        missing.push_back({d.id, 0, "missing inference reasoning"});
    if (!missing.empty()) throw ValidationError(std::move(missing));
  }

  std::vector<Prediction> preds;
  preds.reserve(docs.size());
  for (const auto& d : docs) {
    const auto it = reasonings.find({d.id, std::string(kInferenceLabel)});
    preds.push_back(model.predict(d, it == reasonings.end() ? nullptr : &it->second));
  }
  const fs::path output = fs::path(o.output).is_absolute() ? fs::path(o.output) : g.out_dir / o.output;
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_file_atomic(output, serialize_predictions(preds));
  manifest.output(output);
  const auto ai = std::count_if(preds.begin(), preds.end(), [](const Prediction& p) { return p.label_a == 1; });
  out << "predictions: " << preds.size() << " (" << ai << " AI)\n";
  return manifest.finish(kOk);
}

int cmd_evaluate(const GlobalOptions& g, const EvaluateOptions& o, std::ostream& out) {
  const nlohmann::json config{{"predictions", o.predictions}, {"gold", o.gold}, {"method", o.method}};
  ManifestScope manifest(g, "evaluate", config, {o.predictions, o.gold});
  const auto preds = parse_predictions(read_file(o.predictions));
  const auto golds = load(g, o.gold);
  auto report = score(preds, golds);
  report.metadata["method"] = o.method;
  report.metadata["predictions"] = o.predictions;
  report.metadata["gold"] = o.gold;
  const auto json_path = g.out_dir / "metrics.json";
  const auto text_path = g.out_dir / "metrics.txt";
  write_file_atomic(json_path, report.to_json().dump(2) + "\n");
  write_file_atomic(text_path, report.to_text());
  manifest.output(json_path);
  manifest.output(text_path);
  out << report.to_text();
  return manifest.finish(kOk);
}

int cmd_report(const GlobalOptions& g, const ReportOptions& o, std::ostream& out) {
  if (o.inputs.empty()) throw ConfigError("report needs at least one --input NAME=METRICS_JSON");
  std::vector<std::string> paths;
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [name, path] : o.inputs) {
    paths.push_back(path);
    config[name] = path;
  }
  ManifestScope manifest(g, "report", {{"inputs", config}}, paths);
  std::map<std::string, MetricsReport> reports;
  for (const auto& [name, path] : o.inputs) {
    const auto j = nlohmann::json::parse(read_file(path));
    MetricsReport r;
    r.task_a_f1 = j.at("task_a_f1").get<double>();
    r.task_b_f1 = j.at("task_b_f1").get<double>();
    if (!reports.emplace(name, r).second) throw ConfigError("duplicate method name '" + name + "'");
  }
  const auto table = method_table(reports);
  const auto write = [&](const std::string& file, const std::string& data) {
    write_file_atomic(g.out_dir / file, data);
    manifest.output(g.out_dir / file);
  };
  write("table.txt", table.to_text());
  write("leaderboard.txt", table.to_leaderboard_text());
  write("table.json", table.to_json().dump(2) + "\n");
  out << table.to_text();
  return manifest.finish(kOk);
}

int cmd_init_encoder(const GlobalOptions& g, const InitEncoderOptions& o, std::ostream& out) {
  if (o.output.empty()) throw ConfigError("init-encoder needs --output");
  o.arch.validate();
  auto config = o.arch.to_json();
  config["output"] = o.output;
  config["hash_seed"] = o.hash_seed;
  ManifestScope manifest(g, "init-encoder", config, {});
  TransformerEncoder::init_checkpoint(o.output, o.arch, g.seed, o.hash_seed);
  manifest.output(o.output);
  out << "wrote transformer encoder checkpoint to " << o.output << "\n";
  return manifest.finish(kOk);
}

// ---------------------------------------------------------------------------
// Errors and dispatch

nlohmann::json error_json(const std::exception& e) {
  if (const auto* v = dynamic_cast<const ValidationError*>(&e)) return v->to_json();
  if (const auto* p = dynamic_cast<const ParseError*>(&e))
    return {{"error", "parse"}, {"line", p->line()}, {"message", p->what()}};
  std::string kind = "error";
  if (dynamic_cast<const EmptyCorpusError*>(&e)) kind = "empty_corpus";
  else if (dynamic_cast<const ConfigError*>(&e)) kind = "config";
  else if (dynamic_cast<const CheckpointError*>(&e)) kind = "checkpoint";
  else if (dynamic_cast<const NumericError*>(&e)) kind = "numeric";
  else if (dynamic_cast<const BackendUnavailable*>(&e)) kind = "backend_unavailable";
  else if (dynamic_cast<const nlohmann::json::exception*>(&e)) kind = "json";
  else if (dynamic_cast<const fs::filesystem_error*>(&e)) kind = "io";
  return {{"error", kind}, {"message", e.what()}};
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const EmptyCorpusError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const nlohmann::json::exception*>(&e))
    return kInvalidInput;
  return kFailure;
}

namespace {

void add_backend_flags(CLI::App* cmd, BackendOptions& b) {
  cmd->add_option("--backend", b.kind, "Reasoning backend")
      ->check(CLI::IsMember({"template", "chat"}))
      ->capture_default_str();
  cmd->add_option("--endpoint", b.endpoint, "Chat completions URL");
  cmd->add_option("--model", b.model, "Chat model name");
  cmd->add_option("--token-env", b.token_env, "Environment variable holding the API token")
      ->capture_default_str();
  cmd->add_option("--timeout", b.timeout_seconds, "Request timeout in seconds")->capture_default_str();
  cmd->add_option("--max-retries", b.max_retries, "Retries for transient backend failures")
      ->capture_default_str();
}

void add_encoder_flags(CLI::App* cmd, EncoderConfig& e, std::string& backend) {
  cmd->add_option("--encoder", backend, "Encoder backend")
      ->check(CLI::IsMember({"hashed_ngram", "hashed", "transformer"}))
      ->capture_default_str();
  cmd->add_option("--dim", e.embedding_dim, "Hashed encoder dimension")->capture_default_str();
  cmd->add_option("--trainable-depth", e.trainable_depth, "Top transformer layers to fine-tune")
      ->capture_default_str();
  cmd->add_option("--max-tokens", e.max_tokens, "Composite input length limit")->capture_default_str();
  cmd->add_option("--hash-seed", e.hash_seed, "Feature hashing seed")->capture_default_str();
  cmd->add_option("--encoder-checkpoint", e.checkpoint, "Transformer checkpoint directory");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Detects machine-generated text and attributes it to a generator."};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  GlobalOptions g;
  std::string format;
  std::string out_dir = ".";
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--format", format, "Dataset format (default: from extension)")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  app.add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  IngestOptions ingest;
  std::vector<double> fractions{0.7, 0.15, 0.15};
  auto* c_ingest = app.add_subcommand("ingest", "Validate datasets and write canonical JSONL plus stats");
  c_ingest->add_option("inputs", ingest.inputs, "Dataset files merged into one corpus");
  c_ingest->add_option("--train", ingest.train, "Training split file");
  c_ingest->add_option("--val", ingest.val, "Validation split file");
  c_ingest->add_option("--test", ingest.test, "Test split file");
  c_ingest->add_flag("--split", ingest.split, "Stratified train/val/test split of the merged inputs");
  c_ingest->add_option("--fractions", fractions, "Split fractions, e.g. 0.8,0.1,0.1")->expected(3)->delimiter(',')->allow_extra_args(false);

  ReasonOptions reason;
  std::string conditioning = "both";
  auto* c_reason = app.add_subcommand("reason", "Generate and cache reasoning for corpus documents");
  c_reason->add_option("corpora", reason.corpora, "Corpus files")->required();
  c_reason->add_option("--cache", reason.cache, "Reasoning cache (JSONL)")->required();
  c_reason->add_option("--conditioning", conditioning, "Labels to condition on")
      ->check(CLI::IsMember({"gold", "inference", "both"}))
      ->capture_default_str();
  c_reason->add_option("--max-inflight", reason.max_inflight, "Concurrent backend calls")->capture_default_str();
  add_backend_flags(c_reason, reason.backend);

  TrainOptions train_o;
  std::string train_encoder = "hashed_ngram";
  bool no_cot = false;
  auto* c_train = app.add_subcommand("train", "Train the detector; --out-dir is the run directory");
  c_train->add_option("--train", train_o.train, "Training corpus")->required();
  c_train->add_option("--val", train_o.val, "Validation corpus")->required();
  c_train->add_option("--cache", train_o.cache, "Reasoning cache (JSONL)");
  c_train->add_flag("--no-cot", no_cot, "Train on the document text alone");
  c_train->add_flag("--resume", train_o.resume, "Continue from checkpoints/last");
  auto& tc = train_o.config;
  c_train->add_option("--epochs", tc.epochs)->capture_default_str();
  c_train->add_option("--batch-size", tc.batch_size)->capture_default_str();
  c_train->add_option("--lr", tc.learning_rate)->capture_default_str();
  c_train->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
  c_train->add_option("--threshold", tc.threshold)->capture_default_str();
  c_train->add_option("--patience", tc.early_stop_patience, "Early stopping patience; 0 disables")
      ->capture_default_str();
  c_train->add_option("--reasoning-loss-weight", tc.reasoning_loss_weight)->capture_default_str();
  add_encoder_flags(c_train, tc.encoder, train_encoder);
  add_backend_flags(c_train, train_o.backend);

  PredictOptions predict;
  auto* c_predict = app.add_subcommand("predict", "Write cascade predictions for a corpus");
  c_predict->add_option("--checkpoint", predict.checkpoint, "Run or checkpoint directory")->required();
  c_predict->add_option("--corpus", predict.corpus, "Corpus file")->required();
  c_predict->add_option("--cache", predict.cache, "Reasoning cache (JSONL)");
  c_predict->add_option("--output", predict.output, "Predictions file")->capture_default_str();
  add_backend_flags(c_predict, predict.backend);

  EvaluateOptions evaluate;
  auto* c_eval = app.add_subcommand("evaluate", "Score predictions against gold labels");
  c_eval->add_option("--predictions", evaluate.predictions)->required();
  c_eval->add_option("--gold", evaluate.gold)->required();
  c_eval->add_option("--method", evaluate.method, "Method name recorded in the report");

  std::vector<std::string> report_inputs;
  auto* c_report = app.add_subcommand("report", "Tabulate metrics of several methods");
  c_report->add_option("--input", report_inputs, "NAME=metrics.json (repeatable)")->required();

  InitEncoderOptions init;
  auto* c_init = app.add_subcommand("init-encoder", "Write a randomly initialized transformer encoder");
  c_init->add_option("--output", init.output)->required();
  c_init->add_option("--vocab-size", init.arch.vocab_size)->capture_default_str();
  c_init->add_option("--hidden", init.arch.hidden)->capture_default_str();
  c_init->add_option("--heads", init.arch.heads)->capture_default_str();
  c_init->add_option("--layers", init.arch.layers)->capture_default_str();
  c_init->add_option("--ffn", init.arch.ffn)->capture_default_str();
  c_init->add_option("--max-positions", init.arch.max_positions)->capture_default_str();
  c_init->add_option("--output-dim", init.arch.output_dim)->capture_default_str();
  c_init->add_option("--hash-seed", init.hash_seed)->capture_default_str();

  app.fallthrough();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version come through here with code 0.
    return app.exit(e, out, err) == 0 ? kOk : kInvalidInput;
  }

  t_abandoned.reset();
  try {
    if (!format.empty()) g.format = parse_format(format);
    g.out_dir = out_dir;
    if (c_ingest->parsed()) {
      ingest.split_spec.train_fraction = fractions.at(0);
      ingest.split_spec.val_fraction = fractions.at(1);
      ingest.split_spec.test_fraction = fractions.at(2);
      return cmd_ingest(g, ingest, out);
    }
    if (c_reason->parsed()) {
      reason.conditioning = conditioning == "gold"        ? Conditioning::gold
                            : conditioning == "inference" ? Conditioning::inference
                                                          : Conditioning::both;
      return cmd_reason(g, reason, out);
    }
    if (c_train->parsed()) {
      tc.use_cot = !no_cot;
      tc.encoder.backend = parse_encoder_backend(train_encoder);
      return cmd_train(g, train_o, out);
    }
    if (c_predict->parsed()) return cmd_predict(g, predict, out);
    if (c_eval->parsed()) return cmd_evaluate(g, evaluate, out);
    if (c_report->parsed()) {
      ReportOptions report;
      for (const auto& spec : report_inputs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
          throw ConfigError("--input expects NAME=PATH, got '" + spec + "'");
        report.inputs.emplace_back(spec.substr(0, eq), spec.substr(eq + 1));
      }
      return cmd_report(g, report, out);
    }
    if (c_init->parsed()) return cmd_init_encoder(g, init, out);
  } catch (const std::exception& e) {
    const auto doc = error_json(e);
    err << doc.dump() << '\n';
    const int code = exit_code_for(e);
    if (t_abandoned) {
      auto& [dir, m] = *t_abandoned;
      m.exit_code = code;
      m.error = doc;
      try {
        m.write(dir);
      } catch (...) {
      }
      t_abandoned.reset();
    }
    return code;
  }
  return kFailure;
}

}  // namespace cotd::cli
