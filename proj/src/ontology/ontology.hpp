#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace dast {

inline constexpr std::size_t kNumDiseases = 14;

// CheXpert category order. Shared by the classifier heads, the rule labeler,
// the retrieval logits and the synthetic generator.
inline constexpr std::array<std::string_view, kNumDiseases> kDiseaseNames = {
    "No Finding",   "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity",     "Lung Lesion",
    "Edema",        "Consolidation",              "Pneumonia",    "Atelectasis",      "Pneumothorax",
    "Pleural Effusion", "Pleural Other",          "Fracture",     "Support Devices",
};

using LabelArray = std::array<int, kNumDiseases>;

}  // namespace dast
