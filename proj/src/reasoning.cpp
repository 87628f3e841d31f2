#include "cotd/reasoning.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>
#include <thread>

#include "cotd/errors.hpp"
#include "cotd/util.hpp"

namespace cotd {

std::string training_label(const Document& doc) {
  if (!doc.label_a) throw ConfigError("document " + doc.id + " has no gold label");
  if (*doc.label_a == 0) return "human";
  return doc.label_b ? *doc.label_b : std::string("AI");
}

// ---------------------------------------------------------------------------
// Prompt

namespace {

constexpr std::string_view kPromptHead = "Why is this particular \"";
constexpr std::string_view kPromptMid = "\" generated by ";

}  // namespace

std::string escape_prompt_text(std::string_view text) {
  std::string out;
  out.reserve(text.size() + 8);
  for (const char c : text) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", static_cast<unsigned>(c));
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out;
}

std::string unescape_prompt_text(std::string_view escaped) {
  std::string out;
  out.reserve(escaped.size());
  for (std::size_t i = 0; i < escaped.size(); ++i) {
    if (escaped[i] != '\\') {
      out += escaped[i];
      continue;
    }
    if (++i >= escaped.size()) throw ParseError(0, "dangling escape in prompt text");
    switch (escaped[i]) {
      case '"': out += '"'; break;
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 't': out += '\t'; break;
      case 'u': {
        if (i + 4 >= escaped.size())
          throw ParseError(0, "short \\u escape in prompt text");
        const auto hex = std::string(escaped.substr(i + 1, 4));
        if (!std::all_of(hex.begin(), hex.end(), [](char h) { return std::isxdigit(static_cast<unsigned char>(h)); }))
          throw ParseError(0, "bad \\u escape in prompt text");
        out += static_cast<char>(std::stoi(hex, nullptr, 16));
        i += 4;
        break;
      }
      default: throw ParseError(0, "unknown escape in prompt text");
    }
  }
  return out;
}

Prompt build_prompt(const Document& doc, std::string_view label) {
  if (trim(doc.text).empty()) throw ConfigError("cannot build a prompt for empty document " + doc.id);
  Prompt p;
  p.doc_id = doc.id;
  p.conditioning_label = std::string(label);
  p.text.reserve(doc.text.size() + label.size() + 48);
  p.text += kPromptHead;
  p.text += escape_prompt_text(doc.text);
  p.text += kPromptMid;
  p.text += label;
  p.text += '?';
  return p;
}

std::optional<std::pair<std::string, std::string>> split_prompt(std::string_view prompt) {
  if (prompt.substr(0, kPromptHead.size()) != kPromptHead) return std::nullopt;
  if (prompt.empty() || prompt.back() != '?') return std::nullopt;
  std::size_t i = kPromptHead.size();
  while (i < prompt.size() && prompt[i] != '"') i += prompt[i] == '\\' ? 2 : 1;
  if (i >= prompt.size()) return std::nullopt;
  const auto escaped = prompt.substr(kPromptHead.size(), i - kPromptHead.size());
  if (prompt.substr(i, kPromptMid.size()) != kPromptMid) return std::nullopt;
  const auto label_start = i + kPromptMid.size();
  if (label_start > prompt.size() - 1) return std::nullopt;
  try {
    return std::make_pair(unescape_prompt_text(escaped),
                          std::string(prompt.substr(label_start, prompt.size() - 1 - label_start)));
  } catch (const ParseError&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Template reasoning

TextStats text_stats(std::string_view text) {
  static const std::set<std::string, std::less<>> kFirstPerson = {
      "i", "me", "my", "mine", "myself", "we", "us", "our", "ours", "ourselves",
      "i'm", "i've", "i'd", "i'll", "we're", "we've", "we'd", "we'll"};
  const auto is_punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };

  TextStats s;
  std::set<std::string> distinct;
  for (const auto tok : whitespace_tokens(text)) {
    std::size_t b = 0, e = tok.size();
    while (b < e && is_punct(tok[b])) ++b;
    while (e > b && is_punct(tok[e - 1])) --e;
    if (b == e) continue;
    auto word = to_lower_ascii(tok.substr(b, e - b));
    ++s.words;
    if (kFirstPerson.count(word)) ++s.first_person;
    distinct.insert(std::move(word));
  }
  s.distinct_words = distinct.size();
  s.type_token_ratio =
      s.words == 0 ? 0.0 : static_cast<double>(s.distinct_words) / static_cast<double>(s.words);

  // Punctuation marks (other than sentence terminators) per sentence.
  std::vector<double> per_sentence;
  std::size_t count = 0;
  bool has_content = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '.' || c == '!' || c == '?') {
      while (i + 1 < text.size() && (text[i + 1] == '.' || text[i + 1] == '!' || text[i + 1] == '?'))
        ++i;
      if (has_content) per_sentence.push_back(static_cast<double>(count));
      count = 0;
      has_content = false;
    } else if (is_punct(c)) {
      ++count;
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      has_content = true;
    }
  }
  if (has_content) per_sentence.push_back(static_cast<double>(count));
  s.sentences = per_sentence.size();
  if (!per_sentence.empty()) {
    double mean = 0.0;
    for (const double v : per_sentence) mean += v;
    mean /= static_cast<double>(per_sentence.size());
    double var = 0.0;
    for (const double v : per_sentence) var += (v - mean) * (v - mean);
    s.punctuation_variance = var / static_cast<double>(per_sentence.size());
  }
  return s;
}

namespace {

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string template_text(std::string_view doc_text, std::string_view label) {
  const auto s = text_stats(doc_text);
  std::string out;

  if (s.words < 30) {
    out += "The text is short (" + std::to_string(s.words) + " words).";
  } else if (s.words > 200) {
    out += "The text is long (" + std::to_string(s.words) + " words).";
  } else {
    out += "The text has moderate length (" + std::to_string(s.words) + " words).";
  }

  if (s.first_person >= 2) {
    out += " Frequent first-person pronouns (" + std::to_string(s.first_person) +
           ") point to personal involvement and lived experience.";
  } else if (s.first_person == 1) {
    out += " A single first-person pronoun appears.";
  } else {
    out += " The voice is impersonal, with no personal pronouns.";
  }

  if (s.words >= 10 && s.type_token_ratio < 0.5) {
    out += " Low-diversity vocabulary (type-token ratio " + fixed2(s.type_token_ratio) +
           ") indicates repetitive phrasing.";
  } else if (s.type_token_ratio >= 0.8) {
    out += " Vocabulary is varied (type-token ratio " + fixed2(s.type_token_ratio) + ").";
  } else {
    out += " Vocabulary diversity is moderate (type-token ratio " + fixed2(s.type_token_ratio) +
           ").";
  }

  if (s.punctuation_variance > 1.0) {
    out += " Punctuation is irregular across sentences (variance " +
           fixed2(s.punctuation_variance) + "), as in spontaneous writing.";
  } else {
    out += " Punctuation is evenly distributed across sentences (variance " +
           fixed2(s.punctuation_variance) + ").";
  }

  // Same wording for every label, so only the label itself differs between
  // training and inference prompts.
  out += " Source under consideration: ";
  out += iequals(label, "human") ? std::string("human") : std::string(label);
  out += '.';
  return out;
}

}  // namespace

Reasoning template_reasoning(const Document& doc, std::string_view label) {
  Reasoning r;
  r.text = template_text(doc.text, label);
  r.doc_id = doc.id;
  r.conditioning_label = std::string(label);
  r.backend_id = "template";
  r.template_version = TemplateBackend{}.template_version();
  r.created_at = utc_timestamp();
  return r;
}

std::string TemplateBackend::template_version() const {
  return std::string(kPromptTemplateVersion) + "+" + std::string(kTemplateReasoningVersion);
}

std::string TemplateBackend::generate(const Prompt& prompt) {
  const auto parts = split_prompt(prompt.text);
  if (!parts) throw InvalidReasoning("template backend received a malformed prompt");
  return template_text(parts->first, parts->second);
}

const std::vector<std::string>& registered_backends() {
  static const std::vector<std::string> kBackends{"template", "chat"};
  return kBackends;
}

bool is_registered_backend_id(std::string_view backend_id) {
  const auto kind = backend_id.substr(0, backend_id.find(':'));
  const auto& all = registered_backends();
  return std::find(all.begin(), all.end(), kind) != all.end();
}

// ---------------------------------------------------------------------------
// Cache

std::chrono::milliseconds RetryPolicy::delay_for(int attempt) const {
  const double ms = static_cast<double>(base_delay.count()) * std::pow(multiplier, attempt);
  return std::min(max_delay, std::chrono::milliseconds(static_cast<long long>(ms)));
}

nlohmann::json reasoning_to_json(const std::string& key, const Reasoning& r) {
  return {{"key", key},
          {"doc_id", r.doc_id},
          {"label", r.conditioning_label},
          {"backend_id", r.backend_id},
          {"template_version", r.template_version},
          {"text", r.text},
          {"created_at", r.created_at}};
}

ReasoningCache::ReasoningCache(std::filesystem::path path, Mode mode) : path_(std::move(path)) {
  if (std::filesystem::exists(*path_)) {
    std::ifstream in(*path_, std::ios::binary);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        Reasoning r{j.at("text").get<std::string>(),
                    j.at("doc_id").get<std::string>(),
                    j.at("label").get<std::string>(),
                    j.at("backend_id").get<std::string>(),
                    j.at("template_version").get<std::string>(),
                    j.value("created_at", std::string())};
        entries_[j.at("key").get<std::string>()] = std::move(r);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(line_no, std::string("bad cache entry: ") + e.what());
      }
    }
  } else if (mode == Mode::read_write && path_->has_parent_path()) {
    std::filesystem::create_directories(path_->parent_path());
  }
  if (mode == Mode::read_only) return;
  sink_.open(*path_, std::ios::binary | std::ios::app);
  if (!sink_) throw Error("cannot open reasoning cache " + path_->string());
}

std::string ReasoningCache::key(std::string_view doc_text, std::string_view label,
                                std::string_view backend_id, std::string_view template_version) {
  std::string material;
  material.reserve(doc_text.size() + label.size() + backend_id.size() + template_version.size() + 3);
  material += doc_text;
  material += '\x1f';
  material += label;
  material += '\x1f';
  material += backend_id;
  material += '\x1f';
  material += template_version;
  return sha256_hex(material);
}

std::optional<Reasoning> ReasoningCache::lookup(const std::string& key) const {
  std::shared_lock lock(mutex_);
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ReasoningCache::store(const std::string& key, const Reasoning& reasoning) {
  if (trim(reasoning.text).empty()) throw InvalidReasoning("refusing to cache empty reasoning");
  std::unique_lock lock(mutex_);
  entries_[key] = reasoning;
  if (sink_.is_open()) {
    sink_ << reasoning_to_json(key, reasoning).dump() << '\n';
    sink_.flush();
    if (!sink_) throw Error("failed to append to reasoning cache");
  }
}

std::size_t ReasoningCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

std::map<std::string, Reasoning> ReasoningCache::entries() const {
  std::shared_lock lock(mutex_);
  return {entries_.begin(), entries_.end()};
}

// ---------------------------------------------------------------------------
// Generation

Reasoning generate_reasoning(const Document& doc, std::string_view label, GeneratorBackend& backend,
                             ReasoningCache& cache, const RetryPolicy& retry,
                             GenerationCounters* counters) {
  const auto backend_id = backend.id();
  const auto version = backend.template_version();
  const auto key = ReasoningCache::key(doc.text, label, backend_id, version);
  if (auto hit = cache.lookup(key)) {
    if (counters) ++counters->cached;
    hit->doc_id = doc.id;
    return *hit;
  }

  const auto prompt = build_prompt(doc, label);
  std::string output;
  for (int attempt = 0;; ++attempt) {
    try {
      if (counters) ++counters->backend_calls;
      output = backend.generate(prompt);
      break;
    } catch (const BackendTransportError& e) {
      if (attempt >= retry.max_retries) {
        throw BackendUnavailable("backend " + backend_id + " failed after " +
                                 std::to_string(attempt + 1) + " attempt(s): " + e.what());
      }
      if (counters) ++counters->retries;
      const auto delay = retry.delay_for(attempt);
      if (retry.sleep) retry.sleep(delay);
      else std::this_thread::sleep_for(delay);
    }
  }

  auto text = trim(output);
  if (text.empty()) throw InvalidReasoning("backend " + backend_id + " returned empty reasoning");
  Reasoning r{std::move(text), doc.id, std::string(label), backend_id, version, utc_timestamp()};
  cache.store(key, r);
  if (counters) ++counters->generated;
  return r;
}

nlohmann::json GenerationReport::to_json() const {
  nlohmann::json fails = nlohmann::json::array();
  for (const auto& f : failures)
    fails.push_back({{"id", f.doc_id}, {"label", f.label}, {"message", f.message}});
  return {{"generated", generated},
          {"cached", cached},
          {"failed", failed},
          {"retries", retries},
          {"failures", std::move(fails)}};
}

GenerationReport generate_all(const std::vector<GenerationRequest>& requests,
                              GeneratorBackend& backend, ReasoningCache& cache,
                              const RetryPolicy& retry, std::size_t max_inflight) {
  GenerationCounters counters;
  std::vector<std::optional<GenerationFailure>> failures(requests.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      const auto& req = requests[i];
      try {
        generate_reasoning(*req.doc, req.label, backend, cache, retry, &counters);
      } catch (const Error& e) {
        failures[i] = GenerationFailure{req.doc->id, req.label, e.what()};
      }
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(max_inflight, requests.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  GenerationReport report;
  report.generated = counters.generated;
  report.cached = counters.cached;
  report.retries = counters.retries;
  for (auto& f : failures) {
    if (f) report.failures.push_back(std::move(*f));
  }
  report.failed = report.failures.size();
  return report;
}

ReasoningIndex index_from_cache(const ReasoningCache& cache, const std::vector<Document>& docs,
                                const std::function<std::vector<std::string>(const Document&)>& labels,
                                std::string_view backend_id, std::string_view template_version) {
  ReasoningIndex index;
  for (const auto& doc : docs) {
    for (const auto& label : labels(doc)) {
      auto hit = cache.lookup(ReasoningCache::key(doc.text, label, backend_id, template_version));
      if (!hit) continue;
      hit->doc_id = doc.id;
      index.emplace(std::make_pair(doc.id, label), std::move(*hit));
    }
  }
  return index;
}

}  // namespace cotd
