#include <doctest.h>

#include <random>

#include "cotd/errors.hpp"
#include "cotd/evaluation.hpp"
#include "synthetic.hpp"

using namespace cotd;

namespace {

Document gold(std::string id, std::optional<int> a, std::optional<std::string> b = std::nullopt) {
  return {std::move(id), "text", a, std::move(b)};
}

Prediction pred(std::string id, int a, std::string b = "Human", double p = -1) {
  Prediction out;
  out.doc_id = std::move(id);
  out.label_a = a;
  out.p_ai = p < 0 ? (a ? 0.9 : 0.1) : p;
  out.label_b = a ? std::move(b) : "Human";
  return out;
}

}  // namespace

TEST_CASE("hand-computed fixture") {
  // Gold:  h h A(x) A(x) A(y);  predicted: h A(x) A(x) h A(x)
  const std::vector<Document> g{gold("1", 0, "Human"), gold("2", 0, "Human"), gold("3", 1, "x"),
                                gold("4", 1, "x"), gold("5", 1, "y")};
  const std::vector<Prediction> p{pred("1", 0), pred("2", 1, "x"), pred("3", 1, "x"), pred("4", 0),
                                  pred("5", 1, "x")};
  const auto r = score(p, g);
  // Task A, AI class: tp 2, fp 1, fn 1 -> P = R = F1 = 2/3.
  CHECK(r.task_a_f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  // Human: tp 1, fp 1, fn 1 -> 1/2; macro = (2/3 + 1/2) / 2.
  CHECK(r.task_a_macro_f1 == doctest::Approx(7.0 / 12.0).epsilon(1e-12));
  // Task B classes Human, x, y:
  //   Human tp1 fp1 fn1 -> 1/2; x tp1 fp2 fn1 -> P 1/3 R 1/2 F1 0.4; y -> 0.
  CHECK(r.task_b_f1 == doctest::Approx((0.5 + 0.4 + 0.0) / 3.0).epsilon(1e-12));
  CHECK(r.confusion_a.count(1, 1) == 2);
  CHECK(r.n_scored == 5);
  CHECK(r.per_class.at("x").support == 2);
}

TEST_CASE("perfect and inverted predictions") {
  const std::vector<Document> g{gold("1", 0, "Human"), gold("2", 1, "x")};
  CHECK(score({pred("1", 0), pred("2", 1, "x")}, g).task_a_f1 == 1.0);
  CHECK(score({pred("1", 0), pred("2", 1, "x")}, g).task_b_f1 == 1.0);
  const auto inv = score({pred("1", 1, "x"), pred("2", 0)}, g);
  CHECK(inv.task_a_f1 == 0.0);
  CHECK(inv.task_b_f1 == 0.0);
}

TEST_CASE("unlabeled golds are excluded and counted") {
  const std::vector<Document> g{gold("1", 0, "Human"), gold("2", std::nullopt), gold("3", 1)};
  const auto r = score({pred("1", 0), pred("2", 1, "x"), pred("3", 1, "x")}, g);
  CHECK(r.n_unlabeled_excluded == 1);
  CHECK(r.n_scored == 2);
  CHECK(r.n_missing_label_b == 1);
  CHECK(r.task_a_f1 == 1.0);
}

TEST_CASE("id mismatches and cascade violations are rejected") {
  const std::vector<Document> g{gold("1", 0, "Human"), gold("2", 1, "x")};
  CHECK_THROWS_AS(score({pred("1", 0)}, g), ValidationError);
  CHECK_THROWS_AS(score({pred("1", 0), pred("1", 0), pred("2", 1, "x")}, g), ValidationError);
  CHECK_THROWS_AS(score({pred("1", 0), pred("3", 1, "x")}, g), ValidationError);
  auto bad = pred("2", 1, "x");
  bad.label_b = "Human";
  CHECK_THROWS_AS(score({pred("1", 0), bad}, g), ValidationError);
  auto bad2 = pred("1", 0);
  bad2.label_b = "x";
  CHECK_THROWS_AS(score({bad2, pred("2", 1, "x")}, g), ValidationError);
}

TEST_CASE("scorer agrees with brute-force counting on random fixtures") {
  std::mt19937_64 rng(17);
  const std::vector<std::string> gens{"a", "b", "c", "d"};
  for (int fixture = 0; fixture < 200; ++fixture) {
    const std::size_t n = 1 + rng() % 60;
    std::vector<Document> g;
    std::vector<Prediction> p;
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = std::to_string(i);
      const int ga = static_cast<int>(rng() % 2);
      g.push_back(gold(id, ga, ga ? gens[rng() % gens.size()] : "Human"));
      const int pa = static_cast<int>(rng() % 2);
      p.push_back(pred(id, pa, gens[rng() % gens.size()]));
    }
    std::shuffle(p.begin(), p.end(), rng);
    const auto r = score(p, g);
    const auto ref = cotd::testing::naive_score(p, g);
    CHECK(std::abs(r.task_a_f1 - ref.task_a_f1) <= 1e-12);
    CHECK(std::abs(r.task_a_macro_f1 - ref.task_a_macro) <= 1e-12);
    CHECK(std::abs(r.task_b_f1 - ref.task_b_macro) <= 1e-12);
  }
}

TEST_CASE("zero denominators give zero scores") {
  ConfusionMatrix cm({"Human", "AI"});
  cm.add(0, 0);
  const auto s = class_scores(cm, 1);
  CHECK(s.precision == 0.0);
  CHECK(s.recall == 0.0);
  CHECK(s.f1 == 0.0);
  CHECK(f1_score(cm, Averaging::macro) == doctest::Approx(0.5));
}

TEST_CASE("method table orders by Task A then name") {
  std::map<std::string, MetricsReport> reports;
  auto mk = [](double a, double b) {
    MetricsReport r;
    r.task_a_f1 = a;
    r.task_b_f1 = b;
    return r;
  };
  reports["zeta"] = mk(0.9, 0.1);
  reports["alpha"] = mk(0.9, 0.2);
  reports["best"] = mk(0.99, 0.5);
  reports["low"] = mk(0.5, 0.9);
  const auto t = method_table(reports);
  REQUIRE(t.rows.size() == 4);
  CHECK(t.rows[0].method == "best");
  CHECK(t.rows[1].method == "alpha");
  CHECK(t.rows[2].method == "zeta");
  CHECK(t.rows[3].method == "low");
  const auto text = t.to_text();
  CHECK(text.find("Score for Task-A") != std::string::npos);
  CHECK(text.find("0.990") != std::string::npos);
  const auto lb = t.to_leaderboard_text();
  CHECK(lb.find("S.No") != std::string::npos);
  CHECK(lb.find("1     best") != std::string::npos);
  CHECK(t.to_json().size() == 4);
}

TEST_CASE("prediction files round trip exactly") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u;
  std::vector<Prediction> p;
  for (int i = 0; i < 50; ++i) {
    const double pa = u(rng);
    p.push_back(pred("d" + std::to_string(i), pa >= 0.5, "gen-\"q\"", pa));
  }
  const auto text = serialize_predictions(p);
  const auto back = parse_predictions(text);
  REQUIRE(back.size() == p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(back[i].doc_id == p[i].doc_id);
    CHECK(back[i].p_ai == p[i].p_ai);
    CHECK(back[i].label_a == p[i].label_a);
    CHECK(back[i].label_b == p[i].label_b);
  }
  CHECK(serialize_predictions(back) == text);
  CHECK_THROWS_AS(parse_predictions("{\"id\":\"x\"}\n"), ParseError);
  CHECK_THROWS_AS(parse_predictions("{\"id\":\"x\",\"label_a\":3,\"p_ai\":0.1,\"label_b\":\"Human\"}\n"), ParseError);
}

TEST_CASE("report serializes averaging modes") {
  const std::vector<Document> g{gold("1", 0, "Human"), gold("2", 1, "x")};
  const auto j = score({pred("1", 0), pred("2", 1, "x")}, g).to_json();
  CHECK(j.dump().find("macro") != std::string::npos);
  CHECK(!score({pred("1", 0), pred("2", 1, "x")}, g).to_text().empty());
}

TEST_CASE("Task B classes come only from scored pairs") {
  // The unlabeled document's prediction must not add a zero-F1 class.
  const std::vector<Document> g{gold("1", 1, "x"), gold("2", 1, "y"), gold("3", std::nullopt)};
  const auto r = score({pred("1", 1, "x"), pred("2", 1, "y"), pred("3", 1, "zzz")}, g);
  CHECK(r.task_b_f1 == 1.0);
  CHECK(r.confusion_b.classes() == std::vector<std::string>{"x", "y"});
  // Human joins only when it occurs among gold or predicted labels.
  const auto h = score({pred("1", 0), pred("2", 1, "y"), pred("3", 0)}, g);
  CHECK(h.confusion_b.classes() == std::vector<std::string>{"Human", "x", "y"});
}
