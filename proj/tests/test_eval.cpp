#include <cmath>
#include <set>
#include <unordered_map>

#include "doctest.h"
#include "eval/metrics.hpp"
#include "generator/vocab.hpp"
#include "numcore/tensor.hpp"

using namespace dast;
using eval::Corpus;
using eval::Mention;

namespace {

Corpus one(const std::string& hyp, const std::string& ref) { return Corpus({{"s", hyp, ref}}); }

std::size_t category(std::string_view name) {
  for (std::size_t k = 0; k < kNumDiseases; ++k)
    if (kDiseaseNames[k] == name) return k;
  throw std::logic_error("unknown category");
}

// Straight TF-IDF cosine with string-keyed n-grams; written without looking
// at the library's data layout.
double cider_oracle(const std::vector<std::pair<std::string, std::string>>& pairs) {
  const double n_docs = static_cast<double>(pairs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    double score = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      auto grams = [&](const std::string& text) {
        auto w = gen::split_words(text);
        std::unordered_map<std::string, double> out;
        for (std::size_t s = 0; s + n <= w.size(); ++s) {
          std::string key;
          for (std::size_t t = s; t < s + n; ++t) key += w[t] + "\x1f";
          out[key] += 1.0;
        }
        return out;
      };
      std::unordered_map<std::string, double> df;
      for (const auto& p : pairs)
        for (const auto& kv : grams(p.second)) df[kv.first] += 1.0;
      auto vec = [&](const std::string& text) {
        auto g = grams(text);
        for (auto& [k, v] : g) v *= std::log(n_docs / std::max(1.0, df.count(k) ? df[k] : 0.0));
        return g;
      };
      auto h = vec(pairs[i].first), r = vec(pairs[i].second);
      double dot = 0.0, nh = 0.0, nr = 0.0;
      for (auto& [k, v] : h) {
        nh += v * v;
        if (r.count(k)) dot += v * r[k];
      }
      for (auto& [k, v] : r) nr += v * v;
      if (nh > 0 && nr > 0) score += dot / std::sqrt(nh * nr);
    }
    total += 10.0 * score / 4.0;
  }
  return total / n_docs;
}

Corpus corpus_of(const std::vector<std::pair<std::string, std::string>>& pairs) {
  Corpus c;
  for (std::size_t i = 0; i < pairs.size(); ++i) c.add({"s" + std::to_string(100 + i), pairs[i].first, pairs[i].second});
  return c;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("bleu fixtures") {
  const auto c = one("a b c d", "a b c d e");
  CHECK(std::abs(eval::bleu_n(c, 1) - std::exp(1.0 - 5.0 / 4.0)) < 1e-12);
  CHECK(std::abs(eval::bleu_n(c, 1) - 0.7788) < 1e-4);
  CHECK(std::abs(eval::bleu_n(c, 4) - std::exp(1.0 - 5.0 / 4.0)) < 1e-12);
  // bigram precision is smoothed to 1/(2+1)
  CHECK(std::abs(eval::bleu_n(one("a b c", "a c b"), 2) - std::sqrt(1.0 / 3.0)) < 1e-12);
  CHECK(eval::bleu_n(one("a b", "c d"), 4) < 1e-6);
  CHECK_THROWS_AS(eval::bleu_n(Corpus{}, 4), eval::MetricError);
  CHECK_THROWS_AS(eval::bleu_n(c, 5), eval::MetricError);
  CHECK_THROWS_AS(eval::bleu_n(one("", "a b"), 1), eval::MetricError);
}

TEST_CASE("identical corpus scores one") {
  const auto c = corpus_of({{"There is a small effusion.", "There is a small effusion."},
                            {"The heart is enlarged.", "The heart is enlarged."},
                            {"No pneumothorax.", "No pneumothorax."}});
  for (int n = 1; n <= 4; ++n) CHECK(eval::bleu_n(c, n) == 1.0);
  CHECK(eval::rouge_l(c) == 1.0);
}

TEST_CASE("rouge-l fixtures") {
  CHECK(std::abs(eval::rouge_l(one("a c d", "a b c d")) - 6.0 / 7.0) < 1e-12);
  CHECK(std::abs(eval::rouge_l(one("a c d", "a b c d")) - 0.8571) < 1e-4);
  CHECK(eval::rouge_l(one("x y", "a b")) == 0.0);
  CHECK(eval::rouge_l(one("a b", "a b")) == 1.0);
  // recall-weighted variant
  CHECK(std::abs(eval::rouge_l(one("a c d", "a b c d"), 2.0) - 5.0 * 0.75 / (0.75 + 4.0)) < 1e-12);
}

TEST_CASE("cider against the independent oracle") {
  std::vector<std::pair<std::string, std::string>> pairs{
      {"There is a small left pleural effusion.", "There is a small left pleural effusion."},
      {"The heart is enlarged.", "The heart is enlarged. There is pulmonary edema."},
      {"The chest is clear.", "No pneumothorax."},
      {"There is a lung nodule.", "There is a lung nodule and a fracture."},
  };
  const double lib = eval::cider(corpus_of(pairs));
  CHECK(std::abs(lib - cider_oracle(pairs)) < 1e-9);
  CHECK(lib >= 0.0);

  // Duplication only leaves idf unchanged for n-grams that occur in some
  // reference; unseen hypothesis n-grams keep idf = log N and shift with N.
  std::vector<std::pair<std::string, std::string>> seen{
      {"There is a lung nodule", "There is a lung nodule and a fracture."},
      {"The heart is enlarged.", "The heart is enlarged. There is pulmonary edema."},
      {"There is pulmonary edema.", "No pneumothorax."},
  };
  auto doubled = seen;
  doubled.insert(doubled.end(), seen.begin(), seen.end());
  const double base = eval::cider(corpus_of(seen));
  CHECK(std::abs(eval::cider(corpus_of(doubled)) - base) < 1e-9);
  CHECK(std::abs(cider_oracle(doubled) - cider_oracle(seen)) < 1e-9);

  auto c = corpus_of({{"x y z", "a b c"}, {"a b c", "a b c"}});
  CHECK(std::abs(eval::cider(c) - cider_oracle({{"x y z", "a b c"}, {"a b c", "a b c"}})) < 1e-9);
  CHECK_THROWS_AS(eval::cider(one("a", "a")), eval::MetricError);

  nc::Rng rng(9);
  const std::vector<std::string> words{"a", "b", "c", "d", "e", "."};
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::pair<std::string, std::string>> rnd;
    for (int i = 0; i < 6; ++i) {
      std::string h, r;
      for (int t = 0; t < 7; ++t) h += words[rng.index(words.size())] + " ";
      for (int t = 0; t < 7; ++t) r += words[rng.index(words.size())] + " ";
      rnd.emplace_back(h, r);
    }
    CHECK(std::abs(eval::cider(corpus_of(rnd)) - cider_oracle(rnd)) < 1e-9);
  }
}

TEST_CASE("metrics ignore study order") {
  Corpus a({{"b", "the heart is enlarged .", "the heart is enlarged ."}, {"a", "no edema", "edema is present"}});
  Corpus b({{"a", "no edema", "edema is present"}, {"b", "the heart is enlarged .", "the heart is enlarged ."}});
  CHECK(eval::bleu_n(a, 4) == eval::bleu_n(b, 4));
  CHECK(eval::rouge_l(a) == eval::rouge_l(b));
  CHECK(eval::cider(a) == eval::cider(b));
  CHECK_THROWS_AS(a.add({"a", "x", "y"}), eval::MetricError);
}

TEST_CASE("rule labeler") {
  const auto pe = category("Pleural Effusion"), ptx = category("Pneumothorax"), edema = category("Edema");
  CHECK(eval::extract_labels("small right pleural effusion")[pe] == Mention::positive);
  CHECK(eval::extract_labels("no pleural effusion")[pe] == Mention::negative);
  CHECK(eval::extract_labels("NO PLEURAL EFFUSION")[pe] == Mention::negative);
  for (auto m : eval::extract_labels("")) CHECK(m == Mention::absent);

  auto both = eval::extract_labels("There is no pneumothorax or pleural effusion.");
  CHECK(both[ptx] == Mention::negative);
  CHECK(both[pe] == Mention::negative);
  // the cue does not cross a sentence boundary
  auto split = eval::extract_labels("No pneumothorax. Small effusion.");
  CHECK(split[ptx] == Mention::negative);
  CHECK(split[pe] == Mention::positive);
  // nor reach further than five tokens back
  CHECK(eval::extract_labels("no acute change in the lungs with mild edema")[edema] == Mention::positive);
  CHECK(eval::extract_labels("negative for edema")[edema] == Mention::negative);
  CHECK(eval::extract_labels("free of edema")[edema] == Mention::negative);
  CHECK(eval::extract_labels("without edema")[edema] == Mention::negative);
  CHECK(eval::extract_labels("No acute cardiopulmonary process.")[category("No Finding")] == Mention::positive);
  CHECK(eval::extract_labels("The heart is enlarged.")[category("Cardiomegaly")] == Mention::positive);
  CHECK(eval::extract_labels("no edema. edema.")[edema] == Mention::positive);
}

TEST_CASE("clinical scores on a hand-tallied fixture") {
  Corpus c({{"s1", "pleural effusion. edema.", "pleural effusion."},
            {"s2", "no pleural effusion.", "pleural effusion. edema."},
            {"s3", "pneumothorax.", "pneumothorax."},
            {"s4", "the chest is clear.", "no pneumothorax."}});
  const auto r = eval::evaluate_corpus(c).clinical;
  const auto pe = category("Pleural Effusion"), ptx = category("Pneumothorax"), edema = category("Edema");
  CHECK(r.counts[pe] == std::array<std::size_t, 3>{1, 0, 1});
  CHECK(r.counts[edema] == std::array<std::size_t, 3>{0, 1, 1});
  CHECK(r.counts[ptx] == std::array<std::size_t, 3>{1, 0, 0});
  std::size_t others = 0;
  for (std::size_t k = 0; k < kNumDiseases; ++k)
    if (k != pe && k != edema && k != ptx) others += r.counts[k][0] + r.counts[k][1] + r.counts[k][2];
  CHECK(others == 0);
  CHECK(r.per_category[pe].precision == 1.0);
  CHECK(r.per_category[pe].recall == 0.5);
  CHECK(std::abs(r.per_category[pe].f1 - 2.0 / 3.0) < 1e-12);
  CHECK(r.per_category[edema].f1 == 0.0);
  CHECK(std::abs(r.macro.f1 - (5.0 / 3.0) / 14.0) < 1e-12);
  CHECK(std::abs(r.micro.precision - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(r.micro.recall - 0.5) < 1e-12);
  CHECK(std::abs(r.micro.f1 - 4.0 / 7.0) < 1e-12);
}

TEST_CASE("clinical score conventions") {
  std::map<std::string, eval::LabelVector> hyp, ref;
  eval::LabelVector absent, pos;
  absent.fill(Mention::absent);
  pos.fill(Mention::positive);
  hyp["a"] = absent;
  ref["a"] = pos;
  auto r = eval::clinical_prf(hyp, ref);
  CHECK(r.macro.precision == 0.0);
  CHECK(r.macro.recall == 0.0);
  auto perfect = eval::clinical_prf(ref, ref);
  CHECK(std::abs(perfect.macro.f1 - 1.0) < 1e-12);
  CHECK(perfect.micro.f1 == 1.0);
  hyp["b"] = absent;
  CHECK_THROWS_AS(eval::clinical_prf(hyp, ref), eval::MetricError);
  ref["c"] = absent;
  CHECK_THROWS_AS(eval::clinical_prf(hyp, ref), eval::MetricError);
}

TEST_CASE("metric report json carries every metric") {
  Corpus c({{"a", "pleural effusion.", "pleural effusion."}, {"b", "edema.", "the chest is clear."}});
  const auto json = eval::metric_report_json(eval::evaluate_corpus(c));
  for (const char* key : {"bleu_1", "bleu_4", "rouge_l", "cider", "macro", "micro", "Pleural Effusion"})
    CHECK_MESSAGE(json.find(key) != std::string::npos, key);
}

}  // TEST_SUITE
