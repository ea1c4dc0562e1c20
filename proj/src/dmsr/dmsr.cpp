#include "dmsr/dmsr.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include "data/binary_io.hpp"

namespace dast::dmsr {

namespace {

constexpr char kMagic[6] = {'D', 'M', 'S', 'R', '1', '\0'};

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::array<double, kNumDiseases> to_probabilities(std::span<const double> logits) {
  std::array<double, kNumDiseases> p{};
  for (std::size_t i = 0; i < kNumDiseases; ++i) p[i] = sigmoid(logits[i]);
  return p;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_query(const ExemplarIndex& index, std::span<const double> z_bar, std::span<const double> logits,
                 const QueryOptions& opts) {
  if (index.empty()) throw IndexError("query: index is empty");
  if (opts.k < 1) throw std::invalid_argument("query: k must be at least 1");
  if (!(opts.lambda >= 0.0)) throw std::invalid_argument("query: lambda must be non-negative");
  if (z_bar.size() != index.width()) throw IndexError("query: visual vector width does not match index");
  if (logits.size() != kNumDiseases) throw IndexError("query: expected 14 logits");
}

}  // namespace

ExemplarIndex::ExemplarIndex(std::size_t width, double lambda_default) : width_(width), lambda_default_(lambda_default) {
  if (width == 0) throw IndexError("index width must be positive");
}

void ExemplarIndex::add(ExemplarRecord record) {
  if (record.z_bar.size() != width_) {
    throw IndexError("add_exemplar: width " + std::to_string(record.z_bar.size()) + " does not match index width " +
                     std::to_string(width_));
  }
  if (record.study_id.size() > 0xffff) throw IndexError("add_exemplar: study id too long");
  if (find(record.study_id) != nullptr) throw IndexError("add_exemplar: duplicate study id '" + record.study_id + "'");
  for (double v : record.z_bar)
    if (!std::isfinite(v)) throw IndexError("add_exemplar: non-finite visual vector");
  for (double v : record.logits)
    if (!std::isfinite(v)) throw IndexError("add_exemplar: non-finite logits");
  const double vn = norm_of(record.z_bar);
  const double ln = norm_of(record.logits);
  if (vn == 0.0 || ln == 0.0) throw IndexError("add_exemplar: zero-norm vector for '" + record.study_id + "'");
  visual_norms_.push_back(vn);
  logit_norms_raw_.push_back(ln);
  logit_norms_prob_.push_back(norm_of(to_probabilities(record.logits)));
  records_.push_back(std::move(record));
}

const ExemplarRecord* ExemplarIndex::find(std::string_view study_id) const {
  for (const auto& r : records_)
    if (r.study_id == study_id) return &r;
  return nullptr;
}

std::vector<Hit> ExemplarIndex::query(std::span<const double> z_bar, std::span<const double> logits,
                                      const QueryOptions& opts) const {
  check_query(*this, z_bar, logits, opts);
  const double qn = norm_of(z_bar);
  if (qn == 0.0) throw IndexError("query: zero-norm visual vector");
  const bool prob = opts.space == LogitSpace::probability;
  std::array<double, kNumDiseases> qprob{};
  std::span<const double> ql = logits;
  if (prob) {
    qprob = to_probabilities(logits);
    ql = qprob;
  }
  const double qln = norm_of(ql);
  if (qln == 0.0) throw IndexError("query: zero-norm logit vector");

  std::vector<Hit> scored;
  scored.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (opts.exclude_id && r.study_id == *opts.exclude_id) continue;
    const double visual = dot(z_bar, r.z_bar) / (qn * visual_norms_[i]);
    double disease;
    if (prob) {
      const auto rp = to_probabilities(r.logits);
      disease = dot(ql, rp) / (qln * logit_norms_prob_[i]);
    } else {
      disease = dot(ql, r.logits) / (qln * logit_norms_raw_[i]);
    }
    scored.push_back(Hit{r.study_id, visual + opts.lambda * disease, i});
  }
  const std::size_t k = std::min(opts.k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    [](const Hit& a, const Hit& b) { return a.score > b.score || (a.score == b.score && a.position < b.position); });
  scored.resize(k);
  return scored;
}

std::vector<Hit> brute_force_oracle(const ExemplarIndex& index, std::span<const double> z_bar,
                                    std::span<const double> logits, const QueryOptions& opts) {
  check_query(index, z_bar, logits, opts);
  std::vector<double> q_logits(logits.begin(), logits.end());
  if (opts.space == LogitSpace::probability) {
    for (auto& v : q_logits) v = sigmoid(v);
  }
  double qn2 = 0.0;
  for (double v : z_bar) qn2 += v * v;
  double ql2 = 0.0;
  for (double v : q_logits) ql2 += v * v;
  if (qn2 == 0.0) throw IndexError("query: zero-norm visual vector");
  if (ql2 == 0.0) throw IndexError("query: zero-norm logit vector");

  std::vector<Hit> all;
  const auto& recs = index.records();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (opts.exclude_id && recs[i].study_id == *opts.exclude_id) continue;
    double vdot = 0.0, vn2 = 0.0;
    for (std::size_t c = 0; c < z_bar.size(); ++c) {
      vdot += z_bar[c] * recs[i].z_bar[c];
      vn2 += recs[i].z_bar[c] * recs[i].z_bar[c];
    }
    std::vector<double> r_logits(recs[i].logits.begin(), recs[i].logits.end());
    if (opts.space == LogitSpace::probability) {
      for (auto& v : r_logits) v = sigmoid(v);
    }
    double ldot = 0.0, ln2 = 0.0;
    for (std::size_t d = 0; d < kNumDiseases; ++d) {
      ldot += q_logits[d] * r_logits[d];
      ln2 += r_logits[d] * r_logits[d];
    }
    const double score = vdot / (std::sqrt(qn2) * std::sqrt(vn2)) + opts.lambda * (ldot / (std::sqrt(ql2) * std::sqrt(ln2)));
    all.push_back(Hit{recs[i].study_id, score, i});
  }
  std::stable_sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) { return a.score > b.score; });
  if (all.size() > opts.k) all.resize(opts.k);
  return all;
}

void ExemplarIndex::save(const std::string& path) const {
  io::ByteWriter w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(static_cast<std::uint32_t>(width_));
  w.u32(static_cast<std::uint32_t>(records_.size()));
  for (const auto& r : records_) {
    w.u16(static_cast<std::uint16_t>(r.study_id.size()));
    w.bytes(r.study_id.data(), r.study_id.size());
    for (double v : r.z_bar) w.f64(v);
    for (double v : r.logits) w.f64(v);
    w.u32(static_cast<std::uint32_t>(r.report.size()));
    w.bytes(r.report.data(), r.report.size());
  }
  w.write_file(path);
}

ExemplarIndex ExemplarIndex::load(const std::string& path, std::optional<std::size_t> expected_width) {
  io::ByteReader r = io::ByteReader::from_file(path);
  try {
    char magic[sizeof(kMagic)];
    r.bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IndexError("bad magic");
    const std::size_t width = r.u32();
    if (width == 0) throw IndexError("zero width");
    if (expected_width && *expected_width != width) {
      throw IndexError("width " + std::to_string(width) + " disagrees with expected " + std::to_string(*expected_width));
    }
    const std::uint32_t count = r.u32();
    ExemplarIndex index(width);
    for (std::uint32_t i = 0; i < count; ++i) {
      ExemplarRecord rec;
      rec.study_id = r.string(r.u16());
      rec.z_bar.resize(width);
      for (auto& v : rec.z_bar) v = r.f64();
      for (auto& v : rec.logits) v = r.f64();
      rec.report = r.string(r.u32());
      index.add(std::move(rec));
    }
    if (!r.at_end()) throw IndexError("trailing bytes after last record");
    return index;
  } catch (const io::FormatError& e) {
    throw IndexError("load '" + path + "': " + e.what());
  } catch (const IndexError& e) {
    throw IndexError("load '" + path + "': " + e.what());
  }
}

}  // namespace dast::dmsr
