#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "encoder/encoder.hpp"
#include "numcore/tape.hpp"
#include "ontology/ontology.hpp"

namespace dast::stage1 {

// Disease tokens plus the per-disease classifier heads.
struct DastBank {
  nc::Tensor tokens;  // [14×C]
  // One (gamma, beta) pair per cross-attention refinement layer.
  std::vector<nc::Tensor> norm_gamma;
  std::vector<nc::Tensor> norm_beta;
  nc::Tensor head_weight;  // [14×C], row d is head d
  nc::Tensor head_bias;    // [14×1]

  static DastBank init(std::size_t width, std::size_t refine_layers, nc::Rng& rng);
  std::size_t width() const { return tokens.cols(); }
  void visit(const encoder::ParamVisitor& fn);
};

// tokens ← layer_norm(tokens + attention(tokens, z, z)), repeated per layer.
nc::Var refine_dasts(nc::Bindings& bind, DastBank& bank, nc::Var z);

// logit_d = ⟨refined_d, head_d⟩ + bias_d, as a [14×1] column.
nc::Var classify(nc::Bindings& bind, nc::Var refined, DastBank& bank);

// Mean binary cross-entropy over the 14 categories.
nc::Var loss_cls(nc::Var logits, const LabelArray& labels);

// Frozen text encoder seam; produces unit-norm vectors of a fixed width.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t width() const = 0;
  virtual std::vector<double> encode(std::string_view report) const = 0;
};

// Bag-of-words stub: lowercase, split on whitespace, look each token up in a
// seeded pseudo-random embedding table, average, L2-normalise.
class HashTextEncoder final : public TextEncoder {
 public:
  explicit HashTextEncoder(std::size_t width, std::uint64_t seed = 0x5eed'7e47ull) : width_(width), seed_(seed) {}
  std::size_t width() const override { return width_; }
  std::vector<double> encode(std::string_view report) const override;

 private:
  std::size_t width_;
  std::uint64_t seed_;
};

// Symmetric temperature-scaled contrastive loss over cosine logits.
// visual: [B×C]; textual: [B×C] (treated as constants).
nc::Var loss_ctl(nc::Var visual, const nc::Tensor& textual, double tau);

struct Stage1Model {
  encoder::EncoderParams encoder;
  DastBank bank;

  static Stage1Model init(const encoder::EncoderConfig& cfg, std::size_t refine_layers, nc::Rng& rng);
  void visit(const encoder::ParamVisitor& fn);
};

struct Stage1Outputs {
  nc::Var total;
  nc::Var cls;
  nc::Var ctl;
  std::vector<nc::Var> logits;  // per sample, [14×1]
};

// L_total = L_CLS + L_CTL over a batch.
Stage1Outputs stage1_loss(nc::Bindings& bind, Stage1Model& model, std::span<const encoder::ImageSample* const> batch,
                          const TextEncoder& text, double tau);

struct Stage1Features {
  nc::Tensor z;                  // [N×C]
  std::vector<double> z_bar;     // [C]
  std::vector<double> logits;    // [14]
};

// Inference-only forward pass.
Stage1Features extract_features(Stage1Model& model, const encoder::ImageSample& image);

}  // namespace dast::stage1
