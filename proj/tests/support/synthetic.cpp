#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

namespace cotd::testing {

namespace {

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

bool chance(std::mt19937_64& rng, double p) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53 < p;
}

// Pseudo-words from a class-specific consonant set.
std::vector<std::string> make_words(std::mt19937_64& rng, const std::string& consonants,
                                    const std::string& vowels, std::size_t count) {
  std::set<std::string> words;
  while (words.size() < count) {
    std::string w;
    const std::size_t syllables = 2 + pick(rng, 2);
    for (std::size_t s = 0; s < syllables; ++s) {
      w += consonants[pick(rng, consonants.size())];
      w += vowels[pick(rng, vowels.size())];
    }
    words.insert(w);
  }
  return {words.begin(), words.end()};
}

const std::vector<std::string> kCommon = {
    "the", "of", "and", "to", "in", "is", "that", "for", "it", "as", "with", "on",
    "this", "be", "are", "by", "at", "from", "or", "an"};

const std::vector<std::string> kConsonants = {"bdg", "ptk", "mnl", "fvz", "shw", "jcr", "qxy"};

std::string generator_doc(std::mt19937_64& rng, const std::vector<std::string>& signature) {
  const std::size_t words = 50 + pick(rng, 40);
  std::string text;
  std::size_t in_sentence = 0;
  bool start = true;
  for (std::size_t i = 0; i < words; ++i) {
    std::string w = chance(rng, 0.4) ? signature[pick(rng, signature.size())] : kCommon[pick(rng, 8)];
    if (start) {
      w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
      start = false;
    }
    if (!text.empty()) text += ' ';
    text += w;
    if (++in_sentence == 10 || i + 1 == words) {
      text += '.';
      in_sentence = 0;
      start = true;
    }
  }
  return text;
}

std::string human_doc(std::mt19937_64& rng, const std::vector<std::string>& signature,
                      const std::vector<std::string>& varied) {
  static const std::vector<std::string> pronouns = {"I", "my", "me", "myself", "we", "our"};
  static const std::vector<std::string> stops = {".", "!", "?", "...", "!!", "?!"};
  const std::size_t words = 40 + pick(rng, 60);
  std::string text;
  std::size_t sentence_len = 2 + pick(rng, 18);
  std::size_t in_sentence = 0;
  for (std::size_t i = 0; i < words; ++i) {
    std::string w;
    if (chance(rng, 0.15)) w = pronouns[pick(rng, pronouns.size())];
    else if (chance(rng, 0.2)) w = signature[pick(rng, signature.size())];
    else if (chance(rng, 0.2)) w = kCommon[pick(rng, kCommon.size())];
    else w = varied[pick(rng, varied.size())];
    if (!text.empty()) text += ' ';
    text += w;
    if (chance(rng, 0.08)) text += ',';
    if (++in_sentence == sentence_len || i + 1 == words) {
      text += stops[pick(rng, stops.size())];
      in_sentence = 0;
      sentence_len = 2 + pick(rng, 18);
    }
  }
  return text;
}

}  // namespace

std::vector<std::string> synthetic_generators(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back(std::string("gen-") + static_cast<char>('a' + i));
  return names;
}

std::vector<Document> synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.generators + 1 > kConsonants.size()) throw std::invalid_argument("too many generators");
  std::mt19937_64 rng(spec.seed);
  const auto names = synthetic_generators(spec.generators);
  std::vector<std::vector<std::string>> signatures;
  for (std::size_t g = 0; g < spec.generators; ++g) signatures.push_back(make_words(rng, kConsonants[g], "aeiou", 12));
  const auto human_sig = make_words(rng, kConsonants.back(), "aeiou", 40);
  const auto varied = make_words(rng, "bcdfghklmnprstvwz", "aeiouy", 400);

  const auto humans = static_cast<std::size_t>(std::llround(spec.human_fraction * static_cast<double>(spec.documents)));
  std::vector<Document> docs;
  docs.reserve(spec.documents);
  std::set<std::string> texts;
  for (std::size_t i = 0; i < spec.documents; ++i) {
    Document d;
    d.id = "syn-" + std::to_string(i);
    const bool human = i < humans;
    const std::size_t g = human ? 0 : (i - humans) % spec.generators;
    do {
      d.text = human ? human_doc(rng, human_sig, varied) : generator_doc(rng, signatures[g]);
    } while (!texts.insert(d.text).second);
    d.label_a = human ? 0 : 1;
    d.label_b = human ? std::string(kHumanClass) : names[g];
    docs.push_back(std::move(d));
  }
  // Interleave classes so file order carries no label information.
  std::mt19937_64 order(spec.seed ^ 0x5bd1e995ULL);
  std::shuffle(docs.begin(), docs.end(), order);
  return docs;
}

std::vector<Document> shaped_split(std::size_t rows, std::size_t generators, std::uint64_t seed,
                                   const std::string& id_prefix) {
  std::mt19937_64 rng(seed);
  const auto names = synthetic_generators(generators);
  std::vector<Document> docs;
  docs.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    Document d;
    d.id = id_prefix + std::to_string(i);
    d.text = id_prefix + " sample " + std::to_string(i) + " token " + std::to_string(rng() % 100000);
    const bool human = pick(rng, 3) == 0;
    d.label_a = human ? 0 : 1;
    d.label_b = human ? std::string(kHumanClass) : names[pick(rng, names.size())];
    docs.push_back(std::move(d));
  }
  return docs;
}

SeparabilityCertificate perceptron_certificate(const std::vector<Eigen::VectorXd>& x,
                                               const std::vector<std::size_t>& y, std::size_t classes,
                                               std::size_t max_epochs) {
  SeparabilityCertificate cert;
  if (x.empty()) return cert;
  const auto d = x.front().size();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes), d + 1);
  auto augmented = [&](std::size_t i) {
    Eigen::VectorXd v(d + 1);
    v << x[i], 1.0;
    return v;
  };
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    std::size_t mistakes = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Eigen::VectorXd v = augmented(i);
      const Eigen::VectorXd s = w * v;
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < s.size(); ++c)
        if (s[c] > s[best]) best = c;
      const auto truth = static_cast<Eigen::Index>(y[i]);
      // A tie with the true class counts as a mistake.
      bool tie = false;
      for (Eigen::Index c = 0; c < s.size(); ++c)
        if (c != truth && s[c] >= s[truth]) tie = true;
      if (tie) {
        ++mistakes;
        w.row(truth) += v.transpose();
        w.row(best == truth ? (truth == 0 ? 1 : 0) : best) -= v.transpose();
      }
    }
    cert.epochs = epoch;
    cert.mistakes_last_epoch = mistakes;
    if (mistakes == 0) {
      cert.separable = true;
      cert.f1 = 1.0;
      return cert;
    }
  }
  return cert;
}

NaiveScores naive_score(const std::vector<Prediction>& preds, const std::vector<Document>& golds) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : preds) by_id[p.doc_id] = &p;
  std::vector<std::pair<std::string, std::string>> pairs_b;  // gold, predicted
  std::vector<std::pair<int, int>> pairs_a;
  for (const auto& g : golds) {
    if (!g.label_a) continue;
    const Prediction& p = *by_id.at(g.id);
    pairs_a.emplace_back(*g.label_a, p.label_a);
    if (*g.label_a == 0) pairs_b.emplace_back("Human", p.label_b);
    else if (g.label_b) pairs_b.emplace_back(*g.label_b, p.label_b);
  }
  auto f1_for = [](const auto& pairs, const auto& cls) {
    double tp = 0, fp = 0, fn = 0;
    for (const auto& [gold, pred] : pairs) {
      if (gold == cls && pred == cls) tp += 1;
      else if (pred == cls) fp += 1;
      else if (gold == cls) fn += 1;
    }
    const double denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2 * tp / denom;
  };
  NaiveScores s;
  s.task_a_f1 = f1_for(pairs_a, 1);
  s.task_a_macro = (f1_for(pairs_a, 1) + f1_for(pairs_a, 0)) / 2.0;
  std::set<std::string> classes;
  for (const auto& [gold, pred] : pairs_b) {
    classes.insert(gold);
    classes.insert(pred);
  }
  double sum = 0;
  for (const auto& c : classes) sum += f1_for(pairs_b, c);
  s.task_b_macro = classes.empty() ? 0.0 : sum / static_cast<double>(classes.size());
  return s;
}

long double reference_bce(long double p, int y) {
  const long double eps = 1e-7L;
  p = std::clamp(p, eps, 1.0L - eps);
  return y == 1 ? -std::log(p) : -std::log1p(-p);
}

long double reference_ce(const std::vector<long double>& dist, std::size_t y) {
  return -std::log(std::max(dist.at(y), 1e-7L));
}

}  // namespace cotd::testing
