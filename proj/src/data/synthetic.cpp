#include "data/synthetic.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

namespace dast::data {

SyntheticSpec SyntheticSpec::standard(std::size_t n, std::size_t image_size, std::size_t patch_size, std::uint64_t seed) {
  SyntheticSpec s;
  s.n_studies = n;
  s.image_size = image_size;
  s.patch_size = patch_size;
  s.seed = seed;
  const std::array<const char*, kNumDiseases> sentences{
      "No acute cardiopulmonary process.",
      "The mediastinum is widened.",
      "The heart is enlarged.",
      "There is a lung opacity.",
      "A lung nodule is seen.",
      "There is pulmonary edema.",
      "There is focal consolidation.",
      "Findings suggest pneumonia.",
      "There is basilar atelectasis.",
      "There is a small pneumothorax.",
      "There is a pleural effusion.",
      "There is pleural thickening.",
      "A rib fracture is present.",
      "A support device is present.",
  };
  for (std::size_t k = 0; k < kNumDiseases; ++k) {
    s.patterns[k].motif = static_cast<Motif>(k + 1);
    s.patterns[k].positive = sentences[k];
    s.patterns[k].intensity = 0.8;
    s.patterns[k].prevalence = 0.15;
  }
  s.patterns[9].negated = "There is no pneumothorax.";
  s.patterns[10].negated = "There is no pleural effusion.";
  s.co_occurrence = {{7, 6, 0.6}, {5, 10, 0.5}, {2, 1, 0.4}};
  return s;
}

void SyntheticSpec::validate() const {
  if (n_studies == 0) throw std::invalid_argument("synthetic spec: n_studies must be positive");
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw std::invalid_argument("synthetic spec: image_size must be a positive multiple of patch_size");
  }
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!(noise >= 0.0 && noise <= 1.0)) throw std::invalid_argument("synthetic spec: noise must lie in [0,1]");
  for (const auto& p : patterns) {
    if (p.motif == 0 || p.motif > 15) throw std::invalid_argument("synthetic spec: motif code outside 1..15");
    if (!prob(p.prevalence)) throw std::invalid_argument("synthetic spec: prevalence outside [0,1]");
    if (p.positive.empty()) throw std::invalid_argument("synthetic spec: empty sentence template");
  }
  for (const auto& c : co_occurrence) {
    if (c.given >= kNumDiseases || c.implied >= kNumDiseases || !prob(c.probability)) {
      throw std::invalid_argument("synthetic spec: bad co-occurrence entry");
    }
  }
}

std::pair<std::size_t, std::size_t> motif_slot(std::size_t k, std::size_t grid) {
  // Positions on a 4×4 layout, scaled to the actual grid.
  static constexpr std::array<std::size_t, kNumDiseases> cell{5, 6, 9, 10, 0, 3, 12, 15, 1, 2, 13, 14, 4, 7};
  const std::size_t r = cell[k] / 4, c = cell[k] % 4;
  return {r * grid / 4, c * grid / 4};
}

std::vector<double> motif_mask(Motif m, std::size_t patch) {
  if (m == 0 || m > 15) throw std::invalid_argument("motif code must lie in 1..15");
  std::vector<double> out(patch * patch, 0.0);
  for (std::size_t y = 0; y < patch; ++y)
    for (std::size_t x = 0; x < patch; ++x) {
      const unsigned cell = static_cast<unsigned>((y * 4 / patch) * 4 + x * 4 / patch);
      out[y * patch + x] = std::popcount(m & cell) % 2 == 0 ? 1.0 : 0.0;
    }
  return out;
}

std::string compose_report(const SyntheticSpec& spec, const LabelArray& labels) {
  std::vector<std::string> parts;
  bool any = false;
  for (std::size_t k = 0; k < kNumDiseases; ++k) {
    if (labels[k]) {
      parts.push_back(spec.patterns[k].positive);
      any = true;
    } else if (spec.patterns[k].negated) {
      parts.push_back(*spec.patterns[k].negated);
    }
  }
  if (!any) parts.insert(parts.begin(), kNormalSentence);
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out.push_back(' ');
    out += p;
  }
  return out;
}

std::string study_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", index);
  return buf;
}

namespace {

double unit(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace

encoder::ImageSample sample_study(const SyntheticSpec& spec, std::size_t index, std::mt19937_64& rng) {
  encoder::ImageSample s;
  s.study_id = study_id_for(index);
  s.height = s.width = spec.image_size;
  for (std::size_t k = 0; k < kNumDiseases; ++k) s.labels[k] = unit(rng) < spec.patterns[k].prevalence ? 1 : 0;
  for (const auto& c : spec.co_occurrence) {
    const double draw = unit(rng);
    if (s.labels[c.given] && draw < c.probability) s.labels[c.implied] = 1;
  }
  // "No Finding" excludes every finding except devices.
  if (s.labels[0]) {
    for (std::size_t k = 1; k + 1 < kNumDiseases; ++k) s.labels[k] = 0;
  }
  const std::size_t side = spec.image_size, p = spec.patch_size, grid = side / p;
  s.pixels.resize(side * side);
  for (auto& px : s.pixels) px = spec.noise * unit(rng);
  for (std::size_t k = 0; k < kNumDiseases; ++k) {
    if (!s.labels[k]) continue;
    const auto [gr, gc] = motif_slot(k, grid);
    const auto mask = motif_mask(spec.patterns[k].motif, p);
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x) {
        double& px = s.pixels[(gr * p + y) * side + gc * p + x];
        px = std::clamp(px + spec.patterns[k].intensity * mask[y * p + x], 0.0, 1.0);
      }
  }
  s.report = compose_report(spec, s.labels);
  return s;
}

Split generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::vector<encoder::ImageSample> all;
  all.reserve(spec.n_studies);
  for (std::size_t i = 0; i < spec.n_studies; ++i) all.push_back(sample_study(spec, i, rng));
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Fisher–Yates with explicit draws; std::shuffle is implementation-defined.
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const std::size_t n = all.size();
  const std::size_t n_train = n * 7 / 10, n_val = n / 10;
  Split out;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.push_back(std::move(all[order[i]]));
  }
  auto by_id = [](const encoder::ImageSample& a, const encoder::ImageSample& b) { return a.study_id < b.study_id; };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.val.begin(), out.val.end(), by_id);
  std::sort(out.test.begin(), out.test.end(), by_id);
  return out;
}

}  // namespace dast::data
