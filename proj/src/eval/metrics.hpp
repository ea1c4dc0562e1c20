#pragma once

#include <array>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ontology/ontology.hpp"

namespace dast::eval {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CorpusEntry {
  std::string study_id;
  std::string hypothesis;
  std::string reference;
};

// Hypothesis/reference pairs keyed by study id. Entries are kept sorted by
// id so that every metric is independent of input order.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<CorpusEntry> entries);

  void add(CorpusEntry entry);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<CorpusEntry>& entries() const { return entries_; }

 private:
  std::vector<CorpusEntry> entries_;
};

// Corpus BLEU with uniform weights over orders 1..n and the brevity penalty.
// An order ≥ 2 with zero clipped matches uses (0 + 1) / (count + 1).
double bleu_n(const Corpus& corpus, int n);

// Mean over pairs of the LCS-based F-measure.
double rouge_l(const Corpus& corpus, double beta = 1.0);

// TF-IDF n-gram cosine (n = 1..4) averaged over orders, scaled by 10, with
// document frequencies taken over the references.
double cider(const Corpus& corpus);

// ---- clinical efficacy -------------------------------------------------------

enum class Mention { absent, negative, positive };
using LabelVector = std::array<Mention, kNumDiseases>;

// Keyword + negation rule labeler with the same tokenisation as the
// report generator.
LabelVector extract_labels(std::string_view report);

// Phrase table used by the labeler, per category.
const std::array<std::vector<std::string>, kNumDiseases>& keyword_table();

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ClinicalScores {
  std::array<Prf, kNumDiseases> per_category{};
  std::array<std::array<std::size_t, 3>, kNumDiseases> counts{};  // tp, fp, fn
  Prf macro;
  Prf micro;
};

// Positive-class P/R/F1; negative and absent both count as non-positive.
// Zero denominators give 0.
ClinicalScores clinical_prf(const std::map<std::string, LabelVector>& hyp, const std::map<std::string, LabelVector>& ref);

struct MetricReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  ClinicalScores clinical;
  std::size_t studies = 0;
};

MetricReport evaluate_corpus(const Corpus& corpus);
std::string metric_report_json(const MetricReport& report);

}  // namespace dast::eval
