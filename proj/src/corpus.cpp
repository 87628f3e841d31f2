#include "cotd/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "cotd/errors.hpp"
#include "cotd/util.hpp"

namespace cotd {

DataFormat parse_format(std::string_view name) {
  if (iequals(name, "csv")) return DataFormat::csv;
  if (iequals(name, "jsonl")) return DataFormat::jsonl;
  throw ConfigError("unknown data format '" + std::string(name) + "' (expected csv or jsonl)");
}

std::optional<DataFormat> format_from_extension(std::string_view path) {
  const auto dot = path.rfind('.');
  if (dot == std::string_view::npos) return std::nullopt;
  const auto ext = to_lower_ascii(path.substr(dot + 1));
  if (ext == "csv") return DataFormat::csv;
  if (ext == "jsonl" || ext == "ndjson") return DataFormat::jsonl;
  return std::nullopt;
}

std::optional<std::string> Document::gold_class() const {
  if (!label_a) return std::nullopt;
  if (*label_a == 0) return std::string(kHumanClass);
  return label_b;
}

// ---------------------------------------------------------------------------
// LabelVocabulary

LabelVocabulary::LabelVocabulary() : classes_{std::string(kHumanClass)} {}

LabelVocabulary::LabelVocabulary(const std::vector<std::string>& names) {
  std::set<std::string> generators;
  for (const auto& n : names) {
    if (n != kHumanClass) generators.insert(n);
  }
  classes_.reserve(generators.size() + 1);
  classes_.emplace_back(kHumanClass);
  classes_.insert(classes_.end(), generators.begin(), generators.end());
}

std::optional<std::size_t> LabelVocabulary::index_of(std::string_view name) const {
  const auto it = std::find(classes_.begin(), classes_.end(), name);
  if (it == classes_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - classes_.begin());
}

std::optional<std::size_t> LabelVocabulary::generator_index(std::string_view name) const {
  const auto idx = index_of(name);
  if (!idx || *idx == 0) return std::nullopt;
  return *idx - 1;
}

nlohmann::json LabelVocabulary::to_json() const {
  return {{"classes", classes_}, {"human_index", 0}};
}

LabelVocabulary LabelVocabulary::from_json(const nlohmann::json& j) {
  const auto names = j.at("classes").get<std::vector<std::string>>();
  LabelVocabulary v(names);
  if (v.classes_ != names) throw CheckpointError("vocabulary is not in canonical order");
  return v;
}

// ---------------------------------------------------------------------------
// Parsing

std::string normalize_label_b(std::string_view raw) {
  std::string out;
  std::size_t i = 0;
  const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (i < raw.size()) {
    if (!is_space(raw[i])) {
      out += raw[i++];
      continue;
    }
    bool has_newline = false;
    while (i < raw.size() && is_space(raw[i])) {
      if (raw[i] == '\n' || raw[i] == '\r') has_newline = true;
      ++i;
    }
    const bool interior = !out.empty() && i < raw.size();
    if (interior && !has_newline) out += ' ';
  }
  if (iequals(out, kHumanClass)) out = std::string(kHumanClass);
  return out;
}

namespace {

enum class LabelAState { absent, valid, invalid };

struct RawRecord {
  std::size_t line = 0;
  std::optional<std::string> id;
  std::string text;
  LabelAState label_a_state = LabelAState::absent;
  int label_a = 0;
  std::string label_a_raw;
  std::optional<std::string> label_b;
};

void parse_label_a_text(RawRecord& rec, std::string_view raw) {
  const auto t = trim(raw);
  if (t.empty()) return;
  rec.label_a_raw = t;
  if (t == "0" || t == "1") {
    rec.label_a_state = LabelAState::valid;
    rec.label_a = t == "1" ? 1 : 0;
  } else {
    rec.label_a_state = LabelAState::invalid;
  }
}

using CsvRow = std::pair<std::size_t, std::vector<std::string>>;

std::vector<CsvRow> read_csv_rows(std::string_view data) {
  std::vector<CsvRow> rows;
  std::size_t i = 0;
  std::size_t line = 1;
  while (i < data.size()) {
    const std::size_t record_line = line;
    std::vector<std::string> fields;
    std::string field;
    bool row_done = false;
    while (!row_done) {
      field.clear();
      if (i < data.size() && data[i] == '"') {
        ++i;
        for (;;) {
          if (i >= data.size()) throw ParseError(record_line, "unterminated quoted field");
          const char c = data[i++];
          if (c == '"') {
            if (i < data.size() && data[i] == '"') {
              field += '"';
              ++i;
            } else {
              break;
            }
          } else {
            if (c == '\n') ++line;
            field += c;
          }
        }
        if (i < data.size() && data[i] != ',' && data[i] != '\n' && data[i] != '\r')
          throw ParseError(line, "unexpected character after closing quote");
      } else {
        while (i < data.size() && data[i] != ',' && data[i] != '\n' && data[i] != '\r') {
          if (data[i] == '"') throw ParseError(line, "bare quote in unquoted field");
          field += data[i++];
        }
      }
      fields.push_back(field);
      if (i >= data.size()) {
        row_done = true;
      } else if (data[i] == ',') {
        ++i;
      } else {
        if (data[i] == '\r') ++i;
        if (i < data.size() && data[i] == '\n') ++i;
        ++line;
        row_done = true;
      }
    }
    const bool blank = fields.size() == 1 && trim(fields[0]).empty();
    if (!blank) rows.emplace_back(record_line, std::move(fields));
  }
  return rows;
}

std::vector<RawRecord> read_csv(std::string_view data) {
  auto rows = read_csv_rows(data);
  if (rows.empty()) return {};
  const auto& header = rows.front().second;
  std::optional<std::size_t> c_id, c_text, c_a, c_b;
  for (std::size_t k = 0; k < header.size(); ++k) {
    const auto name = to_lower_ascii(trim(header[k]));
    auto assign = [&](std::optional<std::size_t>& slot) {
      if (slot) throw ParseError(rows.front().first, "duplicate column '" + name + "'");
      slot = k;
    };
    if (name == "text") assign(c_text);
    else if (name == "label_a") assign(c_a);
    else if (name == "label_b") assign(c_b);
    else if (name == "id") assign(c_id);
  }
  if (!c_text) throw ParseError(rows.front().first, "missing 'text' column");

  std::vector<RawRecord> out;
  out.reserve(rows.size() - 1);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& [line, fields] = rows[r];
    if (fields.size() != header.size())
      throw ParseError(line, "expected " + std::to_string(header.size()) + " fields, got " +
                                 std::to_string(fields.size()));
    RawRecord rec;
    rec.line = line;
    rec.text = fields[*c_text];
    if (c_id && !trim(fields[*c_id]).empty()) rec.id = trim(fields[*c_id]);
    if (c_a) parse_label_a_text(rec, fields[*c_a]);
    if (c_b) {
      auto b = normalize_label_b(fields[*c_b]);
      if (!b.empty()) rec.label_b = std::move(b);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

const nlohmann::json* find_field(const nlohmann::json& obj, std::string_view name) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (iequals(it.key(), name)) return &it.value();
  }
  return nullptr;
}

std::vector<RawRecord> read_jsonl(std::string_view data) {
  std::vector<RawRecord> out;
  std::size_t line = 0;
  std::size_t pos = 0;
  while (pos < data.size()) {
    ++line;
    auto end = data.find('\n', pos);
    if (end == std::string_view::npos) end = data.size();
    const auto raw = data.substr(pos, end - pos);
    pos = end + 1;
    if (trim(raw).empty()) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(line, "record is not a JSON object");

    RawRecord rec;
    rec.line = line;
    const auto* text = find_field(obj, "text");
    if (!text || !text->is_string()) throw ParseError(line, "missing string field 'text'");
    rec.text = text->get<std::string>();
    if (const auto* id = find_field(obj, "id"); id && !id->is_null()) {
      rec.id = id->is_string() ? id->get<std::string>() : id->dump();
    }
    if (const auto* a = find_field(obj, "label_a"); a && !a->is_null()) {
      if (a->is_string()) {
        parse_label_a_text(rec, a->get<std::string>());
      } else if (a->is_number()) {
        rec.label_a_raw = a->dump();
        const double v = a->get<double>();
        if (v == 0.0 || v == 1.0) {
          rec.label_a_state = LabelAState::valid;
          rec.label_a = static_cast<int>(v);
        } else {
          rec.label_a_state = LabelAState::invalid;
        }
      } else {
        rec.label_a_raw = a->dump();
        rec.label_a_state = LabelAState::invalid;
      }
    }
    if (const auto* b = find_field(obj, "label_b"); b && !b->is_null()) {
      if (!b->is_string()) throw ParseError(line, "'label_b' must be a string");
      auto norm = normalize_label_b(b->get<std::string>());
      if (!norm.empty()) rec.label_b = std::move(norm);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<Document> build_documents(std::vector<RawRecord> records) {
  std::vector<Document> docs;
  docs.reserve(records.size());
  std::vector<ValidationIssue> issues;
  std::unordered_set<std::string> explicit_ids;
  std::unordered_map<std::string, std::size_t> derived_seen;

  for (auto& rec : records) {
    if (!is_valid_utf8(rec.text) || (rec.label_b && !is_valid_utf8(*rec.label_b)))
      throw ParseError(rec.line, "record is not valid UTF-8");
    Document doc;
    if (rec.id) {
      doc.id = *rec.id;
      if (!explicit_ids.insert(doc.id).second)
        issues.push_back({doc.id, rec.line, "duplicate id"});
    } else {
      const auto base = "doc-" + sha256_hex(rec.text).substr(0, 16);
      const auto n = ++derived_seen[base];
      doc.id = n == 1 ? base : base + "-" + std::to_string(n);
    }
    if (trim(rec.text).empty()) issues.push_back({doc.id, rec.line, "empty text"});
    doc.text = std::move(rec.text);
    if (rec.label_a_state == LabelAState::invalid) {
      issues.push_back({doc.id, rec.line, "label_a must be 0 or 1, got " + rec.label_a_raw});
    } else if (rec.label_a_state == LabelAState::valid) {
      doc.label_a = rec.label_a;
    }
    doc.label_b = std::move(rec.label_b);
    if (rec.label_a_state == LabelAState::valid) {
      if (doc.label_a == 0 && doc.label_b && *doc.label_b != kHumanClass)
        issues.push_back({doc.id, rec.line,
                          "label_a=0 requires label_b=Human, got '" + *doc.label_b + "'"});
      if (doc.label_a == 1 && doc.label_b && *doc.label_b == kHumanClass)
        issues.push_back({doc.id, rec.line, "label_a=1 cannot have label_b=Human"});
    } else if (rec.label_a_state == LabelAState::absent && doc.label_b) {
      issues.push_back({doc.id, rec.line, "label_b given without label_a"});
    }
    docs.push_back(std::move(doc));
  }
  if (!issues.empty()) throw ValidationError(std::move(issues));
  return docs;
}

}  // namespace

std::vector<Document> parse_dataset(std::string_view data, DataFormat format) {
  if (data.size() >= 3 && data.substr(0, 3) == "\xEF\xBB\xBF") data.remove_prefix(3);
  auto records = format == DataFormat::csv ? read_csv(data) : read_jsonl(data);
  return build_documents(std::move(records));
}

std::vector<Document> parse_dataset(std::istream& in, DataFormat format) {
  const std::string data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_dataset(std::string_view(data), format);
}

std::vector<Document> load_dataset(const std::string& path, std::optional<DataFormat> format) {
  if (!format) format = format_from_extension(path);
  if (!format) throw ConfigError("cannot infer format of '" + path + "'; pass --format");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return parse_dataset(in, *format);
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json document_to_json(const Document& doc) {
  nlohmann::json j{{"id", doc.id}, {"text", doc.text}};
  if (doc.label_a) j["label_a"] = *doc.label_a;
  if (doc.label_b) j["label_b"] = *doc.label_b;
  return j;
}

std::string serialize_jsonl(const std::vector<Document>& docs) {
  std::string out;
  for (const auto& d : docs) {
    out += document_to_json(d).dump();
    out += '\n';
  }
  return out;
}

namespace {

std::string csv_field(std::string_view v) {
  if (v.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(v);
  std::string out = "\"";
  for (const char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

std::string serialize_csv(const std::vector<Document>& docs) {
  std::string out = "id,text,label_a,label_b\n";
  for (const auto& d : docs) {
    out += csv_field(d.id) + ',' + csv_field(d.text) + ',';
    if (d.label_a) out += std::to_string(*d.label_a);
    out += ',';
    if (d.label_b) out += csv_field(*d.label_b);
    out += '\n';
  }
  return out;
}

std::vector<ValidationIssue> check_labels(const std::vector<Document>& docs) {
  std::vector<ValidationIssue> issues;
  for (const auto& d : docs) {
    if (d.label_a && *d.label_a != 0 && *d.label_a != 1)
      issues.push_back({d.id, 0, "label_a must be 0 or 1"});
    else if (d.label_a == 0 && d.label_b && *d.label_b != kHumanClass)
      issues.push_back({d.id, 0, "label_a=0 requires label_b=Human"});
    else if (d.label_a == 1 && d.label_b && *d.label_b == kHumanClass)
      issues.push_back({d.id, 0, "label_a=1 cannot have label_b=Human"});
    else if (!d.label_a && d.label_b)
      issues.push_back({d.id, 0, "label_b given without label_a"});
  }
  return issues;
}

LabelVocabulary build_vocabulary(const std::vector<Document>& docs) {
  std::vector<std::string> names;
  bool any_labeled = false;
  for (const auto& d : docs) {
    if (!d.labeled()) continue;
    any_labeled = true;
    if (d.is_ai() && d.label_b) names.push_back(*d.label_b);
  }
  if (!any_labeled) throw EmptyCorpusError();
  return LabelVocabulary(names);
}

// ---------------------------------------------------------------------------
// Splitting

void SplitSpec::validate() const {
  for (const double f : {train_fraction, val_fraction, test_fraction}) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("split fractions must lie in (0,1)");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
}

namespace {

constexpr double kFracEps = 1e-9;

// Small Edmonds-Karp max flow on an adjacency-matrix graph.
class FlowGraph {
 public:
  explicit FlowGraph(std::size_t n) : n_(n), cap_(n * n, 0), flow_(n * n, 0) {}
  void add(std::size_t u, std::size_t v, int c) { cap_[u * n_ + v] += c; }
  int flow(std::size_t u, std::size_t v) const { return flow_[u * n_ + v]; }

  int run(std::size_t s, std::size_t t) {
    int total = 0;
    for (;;) {
      std::vector<std::ptrdiff_t> parent(n_, -1);
      parent[s] = static_cast<std::ptrdiff_t>(s);
      std::vector<std::size_t> queue{s};
      for (std::size_t q = 0; q < queue.size() && parent[t] < 0; ++q) {
        const auto u = queue[q];
        for (std::size_t v = 0; v < n_; ++v) {
          if (parent[v] < 0 && residual(u, v) > 0) {
            parent[v] = static_cast<std::ptrdiff_t>(u);
            queue.push_back(v);
          }
        }
      }
      if (parent[t] < 0) return total;
      int push = std::numeric_limits<int>::max();
      for (auto v = t; v != s; v = static_cast<std::size_t>(parent[v]))
        push = std::min(push, residual(static_cast<std::size_t>(parent[v]), v));
      for (auto v = t; v != s; v = static_cast<std::size_t>(parent[v])) {
        const auto u = static_cast<std::size_t>(parent[v]);
        flow_[u * n_ + v] += push;
        flow_[v * n_ + u] -= push;
      }
      total += push;
    }
  }

 private:
  int residual(std::size_t u, std::size_t v) const {
    return cap_[u * n_ + v] - flow_[u * n_ + v];
  }
  std::size_t n_;
  std::vector<int> cap_;
  std::vector<int> flow_;
};

using Allocation = std::vector<std::array<std::size_t, 3>>;

// Rounds the per-stratum ideal counts so that every cell is the floor or
// ceiling of its ideal value, every stratum sums to its size, and every split
// total is the largest-remainder rounding of its global ideal. Returns false
// if no such rounding was found.
bool controlled_rounding(const std::vector<std::size_t>& sizes, const std::array<double, 3>& f,
                         Allocation& alloc) {
  const std::size_t k = sizes.size();
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  alloc.assign(k, {0, 0, 0});
  std::vector<std::array<bool, 3>> fractional(k, {false, false, false});
  std::vector<int> deficit(k, 0);
  std::array<std::size_t, 3> floor_sum{0, 0, 0};
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t used = 0;
    for (int s = 0; s < 3; ++s) {
      const double ideal = static_cast<double>(sizes[c]) * f[s];
      const auto fl = static_cast<std::size_t>(std::floor(ideal + kFracEps));
      alloc[c][s] = fl;
      fractional[c][s] = ideal - static_cast<double>(fl) > kFracEps;
      used += fl;
      floor_sum[s] += fl;
    }
    deficit[c] = static_cast<int>(sizes[c] - used);
  }

  std::array<std::size_t, 3> target{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double ideal = static_cast<double>(total) * f[s];
    target[s] = static_cast<std::size_t>(std::floor(ideal + kFracEps));
    rem[s] = ideal - static_cast<double>(target[s]);
    assigned += target[s];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++target[order[r % 3]];

  // Nodes: 0 = source, 1..k strata, k+1..k+3 splits, k+4 sink.
  const std::size_t source = 0, sink = k + 4;
  FlowGraph g(k + 5);
  int needed = 0;
  for (std::size_t c = 0; c < k; ++c) {
    g.add(source, 1 + c, deficit[c]);
    needed += deficit[c];
    for (int s = 0; s < 3; ++s) {
      if (fractional[c][s]) g.add(1 + c, k + 1 + s, 1);
    }
  }
  for (int s = 0; s < 3; ++s) {
    if (target[s] < floor_sum[s]) return false;
    g.add(k + 1 + s, sink, static_cast<int>(target[s] - floor_sum[s]));
  }
  if (g.run(source, sink) != needed) return false;
  for (std::size_t c = 0; c < k; ++c) {
    for (int s = 0; s < 3; ++s) alloc[c][s] += static_cast<std::size_t>(g.flow(1 + c, k + 1 + s));
  }
  return true;
}

// Per-stratum largest-remainder rounding; totals may drift by a few documents.
Allocation independent_rounding(const std::vector<std::size_t>& sizes,
                                const std::array<double, 3>& f) {
  Allocation alloc(sizes.size());
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    std::array<double, 3> rem{};
    std::size_t used = 0;
    for (int s = 0; s < 3; ++s) {
      const double ideal = static_cast<double>(sizes[c]) * f[s];
      alloc[c][s] = static_cast<std::size_t>(std::floor(ideal + kFracEps));
      rem[s] = ideal - static_cast<double>(alloc[c][s]);
      used += alloc[c][s];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
    for (std::size_t r = 0; used < sizes[c]; ++r, ++used) ++alloc[c][order[r % 3]];
  }
  return alloc;
}

std::string stratum_key(const Document& d) {
  if (d.label_b) return *d.label_b;
  return d.is_ai() ? "AI" : std::string(kHumanClass);
}

}  // namespace

SplitResult split_stratified(const std::vector<Document>& docs, const SplitSpec& spec) {
  spec.validate();
  std::vector<ValidationIssue> issues;
  for (const auto& d : docs) {
    if (!d.labeled()) issues.push_back({d.id, 0, "split requires labeled documents"});
  }
  if (!issues.empty()) throw ValidationError(std::move(issues));

  SplitResult result;
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < docs.size(); ++i) by_class[stratum_key(docs[i])].push_back(i);

  static const std::string kPooled = "\x01pooled";
  std::map<std::string, std::vector<std::size_t>> strata;
  for (auto& [name, members] : by_class) {
    if (members.size() < 3) {
      result.warnings.push_back("class '" + name + "' has " + std::to_string(members.size()) +
                                " member(s); split without stratification");
      auto& pool = strata[kPooled];
      pool.insert(pool.end(), members.begin(), members.end());
    } else {
      strata[name] = std::move(members);
    }
  }

  std::vector<std::size_t> sizes;
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [name, members] : strata) {
    std::sort(members.begin(), members.end());
    std::mt19937_64 rng(spec.seed ^ stable_hash64(name));
    deterministic_shuffle(members, rng);
    sizes.push_back(members.size());
    groups.push_back(std::move(members));
  }

  const std::array<double, 3> f{spec.train_fraction, spec.val_fraction, spec.test_fraction};
  Allocation alloc;
  if (!controlled_rounding(sizes, f, alloc)) {
    result.warnings.push_back("split totals rounded per class");
    alloc = independent_rounding(sizes, f);
  }

  std::vector<int> assignment(docs.size(), -1);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t n = 0; n < alloc[c][s]; ++n) assignment[groups[c][pos++]] = s;
    }
  }
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto& dst = assignment[i] == 0 ? result.train : assignment[i] == 1 ? result.val : result.test;
    dst.push_back(docs[i]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stats

nlohmann::json CorpusStats::to_json() const {
  return {{"rows", rows},
          {"unlabeled", unlabeled},
          {"label_a", {{"0", human}, {"1", ai}}},
          {"ai_without_label_b", ai_without_label_b},
          {"label_b", per_class},
          {"labels_consistent", labels_consistent}};
}

CorpusStats compute_stats(const std::vector<Document>& docs) {
  CorpusStats s;
  s.rows = docs.size();
  for (const auto& d : docs) {
    if (!d.labeled()) {
      ++s.unlabeled;
      continue;
    }
    if (d.is_ai()) {
      ++s.ai;
      if (d.label_b) ++s.per_class[*d.label_b];
      else ++s.ai_without_label_b;
    } else {
      ++s.human;
      ++s.per_class[std::string(kHumanClass)];
    }
  }
  s.labels_consistent = check_labels(docs).empty();
  return s;
}

}  // namespace cotd
