#include "cotd/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "cotd/errors.hpp"
#include "cotd/util.hpp"

namespace cotd {

std::string to_string(Averaging a) {
  return a == Averaging::macro ? "macro" : "binary_positive_ai";
}

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> classes)
    : classes_(std::move(classes)),
      counts_(classes_.size(), std::vector<std::size_t>(classes_.size(), 0)) {}

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (const auto& row : counts_)
    for (const auto c : row) t += c;
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t gold) const {
  std::size_t t = 0;
  for (const auto c : counts_[gold]) t += c;
  return t;
}

std::size_t ConfusionMatrix::col_sum(std::size_t pred) const {
  std::size_t t = 0;
  for (const auto& row : counts_) t += row[pred];
  return t;
}

nlohmann::json ConfusionMatrix::to_json() const {
  return {{"classes", classes_}, {"counts", counts_}};
}

ClassScores class_scores(const ConfusionMatrix& cm, std::size_t cls) {
  ClassScores s;
  const auto tp = static_cast<double>(cm.count(cls, cls));
  const auto predicted = static_cast<double>(cm.col_sum(cls));
  const auto actual = static_cast<double>(cm.row_sum(cls));
  s.support = cm.row_sum(cls);
  s.precision = predicted > 0 ? tp / predicted : 0.0;
  s.recall = actual > 0 ? tp / actual : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

double f1_score(const ConfusionMatrix& cm, Averaging averaging, std::size_t positive) {
  if (cm.classes().empty()) return 0.0;
  if (averaging == Averaging::binary_positive_ai) return class_scores(cm, positive).f1;
  double sum = 0.0;
  for (std::size_t c = 0; c < cm.classes().size(); ++c) sum += class_scores(cm, c).f1;
  return sum / static_cast<double>(cm.classes().size());
}

namespace {

std::string fmt(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

nlohmann::json scores_json(const ClassScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [name, s] : per_class) per[name] = scores_json(s);
  return {{"task_a_f1", task_a_f1},
          {"task_a_macro_f1", task_a_macro_f1},
          {"task_b_f1", task_b_f1},
          {"task_a_averaging", to_string(task_a_averaging)},
          {"task_b_averaging", to_string(task_b_averaging)},
          {"per_class", std::move(per)},
          {"confusion_a", confusion_a.to_json()},
          {"confusion_b", confusion_b.to_json()},
          {"n_scored", n_scored},
          {"n_scored_b", n_scored_b},
          {"n_unlabeled_excluded", n_unlabeled_excluded},
          {"n_missing_label_b", n_missing_label_b},
          {"metadata", metadata}};
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os << "Task A F1 (" << to_string(task_a_averaging) << "): " << fmt(task_a_f1) << "\n";
  os << "Task A F1 (macro): " << fmt(task_a_macro_f1) << "\n";
  os << "Task B F1 (" << to_string(task_b_averaging) << ", incl. Human): " << fmt(task_b_f1)
     << "\n";
  os << "scored: " << n_scored << " (Task B: " << n_scored_b << ")";
  if (n_unlabeled_excluded) os << ", unlabeled excluded: " << n_unlabeled_excluded;
  if (n_missing_label_b) os << ", AI rows without label_b: " << n_missing_label_b;
  os << "\n\n";
  std::size_t width = 5;
  for (const auto& [name, s] : per_class) width = std::max(width, name.size());
  char line[256];
  std::snprintf(line, sizeof line, "%-*s  %9s  %9s  %9s  %7s\n", static_cast<int>(width), "class",
                "precision", "recall", "f1", "support");
  os << line;
  for (const auto& [name, s] : per_class) {
    std::snprintf(line, sizeof line, "%-*s  %9.4f  %9.4f  %9.4f  %7zu\n", static_cast<int>(width),
                  name.c_str(), s.precision, s.recall, s.f1, s.support);
    os << line;
  }
  return os.str();
}

MetricsReport score(const std::vector<Prediction>& preds, const std::vector<Document>& golds) {
  std::vector<ValidationIssue> issues;
  std::unordered_map<std::string, const Prediction*> by_id;
  for (const auto& p : preds) {
    if (!by_id.emplace(p.doc_id, &p).second)
      issues.push_back({p.doc_id, 0, "duplicate prediction"});
    if ((p.label_a == 0) != (p.label_b == kHumanClass))
      issues.push_back({p.doc_id, 0, "prediction violates the cascade (label_a=" +
                                         std::to_string(p.label_a) + ", label_b=" + p.label_b + ")"});
  }
  std::unordered_set<std::string> gold_ids;
  for (const auto& g : golds) {
    gold_ids.insert(g.id);
    if (!by_id.count(g.id) && g.labeled()) issues.push_back({g.id, 0, "no prediction for gold document"});
  }
  for (const auto& p : preds) {
    if (!gold_ids.count(p.doc_id)) issues.push_back({p.doc_id, 0, "prediction without gold document"});
  }
  if (!issues.empty()) throw ValidationError(std::move(issues));

  // Macro over the classes that occur among scored pairs, gold or predicted.
  std::set<std::string> b_names;
  for (const auto& g : golds) {
    if (!g.labeled()) continue;
    if (const auto c = g.gold_class()) {
      b_names.insert(*c);
      b_names.insert(by_id.at(g.id)->label_b);
    }
  }
  std::vector<std::string> b_classes;
  if (b_names.erase(std::string(kHumanClass))) b_classes.emplace_back(kHumanClass);
  b_classes.insert(b_classes.end(), b_names.begin(), b_names.end());
  std::unordered_map<std::string, std::size_t> b_index;
  for (std::size_t i = 0; i < b_classes.size(); ++i) b_index[b_classes[i]] = i;

  MetricsReport r;
  r.confusion_a = ConfusionMatrix({"human", "ai"});
  r.confusion_b = ConfusionMatrix(b_classes);
  for (const auto& g : golds) {
    if (!g.labeled()) {
      ++r.n_unlabeled_excluded;
      continue;
    }
    const auto& p = *by_id.at(g.id);
    r.confusion_a.add(static_cast<std::size_t>(*g.label_a), static_cast<std::size_t>(p.label_a));
    ++r.n_scored;
    const auto gold_b = g.gold_class();
    if (!gold_b) {
      ++r.n_missing_label_b;
      continue;
    }
    r.confusion_b.add(b_index.at(*gold_b), b_index.at(p.label_b));
    ++r.n_scored_b;
  }
  r.task_a_f1 = f1_score(r.confusion_a, Averaging::binary_positive_ai, 1);
  r.task_a_macro_f1 = f1_score(r.confusion_a, Averaging::macro);
  r.task_b_f1 = f1_score(r.confusion_b, Averaging::macro);
  for (std::size_t c = 0; c < b_classes.size(); ++c)
    r.per_class[b_classes[c]] = class_scores(r.confusion_b, c);
  return r;
}

// ---------------------------------------------------------------------------

MethodTable method_table(const std::map<std::string, MetricsReport>& reports) {
  MethodTable t;
  for (const auto& [name, r] : reports) t.rows.push_back({name, r.task_a_f1, r.task_b_f1});
  std::stable_sort(t.rows.begin(), t.rows.end(), [](const MethodRow& x, const MethodRow& y) {
    if (x.task_a != y.task_a) return x.task_a > y.task_a;
    return x.method < y.method;
  });
  return t;
}

std::string MethodTable::to_text() const {
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.method.size());
  std::ostringstream os;
  char line[512];
  std::snprintf(line, sizeof line, "%-*s  %-16s  %-16s\n", static_cast<int>(width), "Method",
                "Score for Task-A", "Score for Task-B");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-*s  %-16s  %-16s\n", static_cast<int>(width),
                  r.method.c_str(), fmt(r.task_a, 3).c_str(), fmt(r.task_b, 3).c_str());
    os << line;
  }
  return os.str();
}

std::string MethodTable::to_leaderboard_text() const {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.method.size());
  std::ostringstream os;
  char line[512];
  std::snprintf(line, sizeof line, "%-4s  %-*s  %-16s  %-16s\n", "S.No", static_cast<int>(width),
                "Name", "Score for Task-A", "Score for Task-B");
  os << line;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::snprintf(line, sizeof line, "%-4zu  %-*s  %-16s  %-16s\n", i + 1, static_cast<int>(width),
                  rows[i].method.c_str(), fmt(rows[i].task_a).c_str(), fmt(rows[i].task_b).c_str());
    os << line;
  }
  return os.str();
}

nlohmann::json MethodTable::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"Method", r.method}, {"Score Task-A", r.task_a}, {"Score Task-B", r.task_b}});
  return arr;
}

// ---------------------------------------------------------------------------

std::string serialize_predictions(const std::vector<Prediction>& preds) {
  std::string out;
  for (const auto& p : preds) {
    nlohmann::json j{{"id", p.doc_id}, {"label_a", p.label_a}, {"p_ai", p.p_ai}, {"label_b", p.label_b}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<Prediction> parse_predictions(std::string_view data) {
  std::vector<Prediction> out;
  std::size_t line = 0, pos = 0;
  while (pos < data.size()) {
    ++line;
    auto end = data.find('\n', pos);
    if (end == std::string_view::npos) end = data.size();
    const auto raw = data.substr(pos, end - pos);
    pos = end + 1;
    if (trim(raw).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(raw);
      Prediction p;
      p.doc_id = j.at("id").get<std::string>();
      p.label_a = j.at("label_a").get<int>();
      p.p_ai = j.at("p_ai").get<double>();
      p.label_b = j.at("label_b").get<std::string>();
      if (p.label_a != 0 && p.label_a != 1) throw ParseError(line, "label_a must be 0 or 1");
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line, std::string("bad prediction record: ") + e.what());
    }
  }
  return out;
}

}  // namespace cotd
