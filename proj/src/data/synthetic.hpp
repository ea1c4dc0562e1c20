#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "encoder/encoder.hpp"
#include "ontology/ontology.hpp"

namespace dast::data {

// Stripe/checker motif on a 4×4 cell layout: cell c is lit when
// popcount(code & c) is even, i.e. the positive entries of Walsh row `code`.
// Distinct codes 1..15 light 8 cells each and overlap on exactly 4.
using Motif = unsigned;

struct PatternSpec {
  Motif motif = 1;
  double intensity = 0.8;
  double prevalence = 0.15;
  std::string positive;                // sentence when active
  std::optional<std::string> negated;  // sentence when inactive, if any
};

struct CoOccurrence {
  std::size_t given = 0;
  std::size_t implied = 0;
  double probability = 0.0;
};

struct SyntheticSpec {
  std::size_t n_studies = 200;
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::uint64_t seed = 0;
  // Background pixels ~ U[0, noise]. Kept far below the LayerNorm epsilon
  // scale so empty patches stay near zero after normalisation.
  double noise = 0.001;
  std::array<PatternSpec, kNumDiseases> patterns;
  std::vector<CoOccurrence> co_occurrence;

  // The default 14-entry table, in ontology order.
  static SyntheticSpec standard(std::size_t n, std::size_t image_size, std::size_t patch_size, std::uint64_t seed);
  void validate() const;
};

inline constexpr const char* kNormalSentence = "The chest is clear.";

// Patch slot (row, col) of category k on a g×g patch grid.
std::pair<std::size_t, std::size_t> motif_slot(std::size_t k, std::size_t grid);
// P×P binary mask of a motif.
std::vector<double> motif_mask(Motif m, std::size_t patch);

// Report text fully determined by the label vector.
std::string compose_report(const SyntheticSpec& spec, const LabelArray& labels);

// One study; all randomness drawn from `rng` in a fixed order.
encoder::ImageSample sample_study(const SyntheticSpec& spec, std::size_t index, std::mt19937_64& rng);

std::string study_id_for(std::size_t index);

struct Split {
  std::vector<encoder::ImageSample> train, val, test;
};

// Generates every study and a 70/10/20 seeded split. Each split is sorted by id.
Split generate(const SyntheticSpec& spec);

}  // namespace dast::data
