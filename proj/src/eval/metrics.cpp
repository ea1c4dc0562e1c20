#include "eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"

#include "generator/vocab.hpp"

namespace dast::eval {

namespace {

using Words = std::vector<std::string>;
using NgramCounts = std::map<Words, std::size_t>;

NgramCounts ngrams(const Words& w, std::size_t n) {
  NgramCounts out;
  if (w.size() < n) return out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[Words(w.begin() + i, w.begin() + i + n)];
  return out;
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

Corpus::Corpus(std::vector<CorpusEntry> entries) {
  for (auto& e : entries) add(std::move(e));
}

void Corpus::add(CorpusEntry entry) {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), entry.study_id,
                             [](const CorpusEntry& e, const std::string& id) { return e.study_id < id; });
  if (it != entries_.end() && it->study_id == entry.study_id) {
    throw MetricError("corpus: duplicate study id '" + entry.study_id + "'");
  }
  entries_.insert(it, std::move(entry));
}

double bleu_n(const Corpus& corpus, int n) {
  if (n < 1 || n > 4) throw MetricError("bleu_n: order must be in 1..4");
  if (corpus.empty()) throw MetricError("bleu_n: empty corpus");
  std::vector<std::size_t> matches(n, 0), totals(n, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (const auto& e : corpus.entries()) {
    const Words h = gen::split_words(e.hypothesis), r = gen::split_words(e.reference);
    hyp_len += h.size();
    ref_len += r.size();
    for (int k = 1; k <= n; ++k) {
      const auto hc = ngrams(h, k), rc = ngrams(r, k);
      for (const auto& [g, c] : hc) {
        auto it = rc.find(g);
        matches[k - 1] += std::min(c, it == rc.end() ? std::size_t{0} : it->second);
        totals[k - 1] += c;
      }
    }
  }
  if (hyp_len == 0) throw MetricError("bleu_n: every hypothesis is empty");
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    double p;
    if (matches[k - 1] > 0) {
      p = static_cast<double>(matches[k - 1]) / static_cast<double>(totals[k - 1]);
    } else if (k >= 2) {
      p = 1.0 / static_cast<double>(totals[k - 1] + 1);
    } else {
      return 0.0;
    }
    log_sum += std::log(p) / n;
  }
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return bp * std::exp(log_sum);
}

double rouge_l(const Corpus& corpus, double beta) {
  if (corpus.empty()) throw MetricError("rouge_l: empty corpus");
  double total = 0.0;
  const double b2 = beta * beta;
  for (const auto& e : corpus.entries()) {
    const Words h = gen::split_words(e.hypothesis), r = gen::split_words(e.reference);
    if (h.empty() && r.empty()) {
      total += 1.0;
      continue;
    }
    const std::size_t l = lcs_length(h, r);
    if (l == 0) continue;
    const double p = static_cast<double>(l) / static_cast<double>(h.size());
    const double rc = static_cast<double>(l) / static_cast<double>(r.size());
    total += (1.0 + b2) * p * rc / (rc + b2 * p);
  }
  return total / static_cast<double>(corpus.size());
}

double cider(const Corpus& corpus) {
  if (corpus.size() < 2) throw MetricError("cider: needs at least two studies");
  const auto& es = corpus.entries();
  const double log_n = std::log(static_cast<double>(es.size()));
  std::vector<Words> hyps, refs;
  for (const auto& e : es) {
    hyps.push_back(gen::split_words(e.hypothesis));
    refs.push_back(gen::split_words(e.reference));
  }
  std::vector<double> per_pair(es.size(), 0.0);
  for (std::size_t n = 1; n <= 4; ++n) {
    std::vector<NgramCounts> hc, rc;
    std::map<Words, std::size_t> df;
    for (std::size_t i = 0; i < es.size(); ++i) {
      hc.push_back(ngrams(hyps[i], n));
      rc.push_back(ngrams(refs[i], n));
      for (const auto& kv : rc.back()) ++df[kv.first];
    }
    auto idf = [&](const Words& g) {
      auto it = df.find(g);
      return log_n - std::log(static_cast<double>(it == df.end() ? 1 : std::max<std::size_t>(1, it->second)));
    };
    for (std::size_t i = 0; i < es.size(); ++i) {
      double dot = 0.0, nh = 0.0, nr = 0.0;
      for (const auto& [g, c] : hc[i]) {
        const double w = static_cast<double>(c) * idf(g);
        nh += w * w;
        auto it = rc[i].find(g);
        if (it != rc[i].end()) dot += w * static_cast<double>(it->second) * idf(g);
      }
      for (const auto& [g, c] : rc[i]) {
        const double w = static_cast<double>(c) * idf(g);
        nr += w * w;
      }
      if (nh > 0.0 && nr > 0.0) per_pair[i] += dot / (std::sqrt(nh) * std::sqrt(nr)) / 4.0;
    }
  }
  double total = 0.0;
  for (double s : per_pair) total += 10.0 * s;
  return total / static_cast<double>(es.size());
}

// ---- labeler ---------------------------------------------------------------

const std::array<std::vector<std::string>, kNumDiseases>& keyword_table() {
  static const std::array<std::vector<std::string>, kNumDiseases> table{{
      {"no acute cardiopulmonary process"},
      {"mediastinum is widened", "widened mediastinum", "mediastinal widening"},
      {"heart is enlarged", "cardiomegaly", "enlarged heart"},
      {"opacity", "opacities"},
      {"nodule", "lesion", "mass"},
      {"edema"},
      {"consolidation"},
      {"pneumonia"},
      {"atelectasis"},
      {"pneumothorax"},
      {"pleural effusion", "effusion"},
      {"pleural thickening"},
      {"fracture"},
      {"support device", "catheter", "tube"},
  }};
  return table;
}

namespace {

bool sentence_break(const std::string& w) { return w == "." || w == ";" || w == "!" || w == "?"; }

bool matches_at(const Words& toks, std::size_t pos, const Words& phrase) {
  if (pos + phrase.size() > toks.size()) return false;
  return std::equal(phrase.begin(), phrase.end(), toks.begin() + pos);
}

// A cue counts when it starts within the five tokens before `pos` and ends
// before it, without crossing a sentence boundary.
bool negated(const Words& toks, std::size_t pos) {
  static const std::vector<Words> cues{{"no"}, {"without"}, {"negative", "for"}, {"free", "of"}};
  const std::size_t lo = pos >= 5 ? pos - 5 : 0;
  std::size_t start = pos;
  while (start > lo && !sentence_break(toks[start - 1])) --start;
  for (std::size_t p = start; p < pos; ++p)
    for (const auto& cue : cues)
      if (p + cue.size() <= pos && matches_at(toks, p, cue)) return true;
  return false;
}

}  // namespace

LabelVector extract_labels(std::string_view report) {
  static const auto phrases = [] {
    std::array<std::vector<Words>, kNumDiseases> out;
    const auto& table = keyword_table();
    for (std::size_t k = 0; k < kNumDiseases; ++k)
      for (const auto& p : table[k]) out[k].push_back(gen::split_words(p));
    return out;
  }();
  const Words toks = gen::split_words(report);
  LabelVector out;
  out.fill(Mention::absent);
  for (std::size_t k = 0; k < kNumDiseases; ++k) {
    for (const auto& phrase : phrases[k]) {
      for (std::size_t pos = 0; pos < toks.size(); ++pos) {
        if (!matches_at(toks, pos, phrase)) continue;
        if (negated(toks, pos)) {
          if (out[k] == Mention::absent) out[k] = Mention::negative;
        } else {
          out[k] = Mention::positive;
        }
      }
    }
  }
  return out;
}

namespace {

Prf make_prf(std::size_t tp, std::size_t fp, std::size_t fn) {
  Prf r;
  r.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

}  // namespace

ClinicalScores clinical_prf(const std::map<std::string, LabelVector>& hyp, const std::map<std::string, LabelVector>& ref) {
  if (hyp.size() != ref.size()) throw MetricError("clinical_prf: hypothesis and reference key sets differ");
  ClinicalScores s;
  for (const auto& [id, h] : hyp) {
    auto it = ref.find(id);
    if (it == ref.end()) throw MetricError("clinical_prf: study '" + id + "' has no reference");
    for (std::size_t k = 0; k < kNumDiseases; ++k) {
      const bool hp = h[k] == Mention::positive, rp = it->second[k] == Mention::positive;
      if (hp && rp) ++s.counts[k][0];
      if (hp && !rp) ++s.counts[k][1];
      if (!hp && rp) ++s.counts[k][2];
    }
  }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t k = 0; k < kNumDiseases; ++k) {
    s.per_category[k] = make_prf(s.counts[k][0], s.counts[k][1], s.counts[k][2]);
    s.macro.precision += s.per_category[k].precision / kNumDiseases;
    s.macro.recall += s.per_category[k].recall / kNumDiseases;
    s.macro.f1 += s.per_category[k].f1 / kNumDiseases;
    tp += s.counts[k][0];
    fp += s.counts[k][1];
    fn += s.counts[k][2];
  }
  s.micro = make_prf(tp, fp, fn);
  return s;
}

MetricReport evaluate_corpus(const Corpus& corpus) {
  MetricReport r;
  r.studies = corpus.size();
  for (int n = 1; n <= 4; ++n) r.bleu[n - 1] = bleu_n(corpus, n);
  r.rouge_l = rouge_l(corpus);
  r.cider = cider(corpus);
  std::map<std::string, LabelVector> h, f;
  for (const auto& e : corpus.entries()) {
    h[e.study_id] = extract_labels(e.hypothesis);
    f[e.study_id] = extract_labels(e.reference);
  }
  r.clinical = clinical_prf(h, f);
  return r;
}

std::string metric_report_json(const MetricReport& r) {
  using J = nlohmann::ordered_json;
  auto prf = [](const Prf& p) { return J{{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}}; };
  J out;
  out["studies"] = r.studies;
  for (int n = 1; n <= 4; ++n) out["bleu_" + std::to_string(n)] = r.bleu[n - 1];
  out["rouge_l"] = r.rouge_l;
  out["cider"] = r.cider;
  J clinical;
  clinical["macro"] = prf(r.clinical.macro);
  clinical["micro"] = prf(r.clinical.micro);
  J per = J::object();
  for (std::size_t k = 0; k < kNumDiseases; ++k) {
    J c = prf(r.clinical.per_category[k]);
    c["tp"] = r.clinical.counts[k][0];
    c["fp"] = r.clinical.counts[k][1];
    c["fn"] = r.clinical.counts[k][2];
    per[std::string(kDiseaseNames[k])] = c;
  }
  clinical["per_category"] = per;
  out["clinical"] = clinical;
  return out.dump(2) + "\n";
}

}  // namespace dast::eval
