#pragma once

#include <functional>
#include <string>
#include <vector>

#include "numcore/tape.hpp"
#include "ontology/ontology.hpp"

namespace dast::encoder {

// Single-channel image with its study metadata.
struct ImageSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major, values in [0,1]
  std::string study_id;
  LabelArray labels{};
  std::string report;
};

struct EncoderConfig {
  std::size_t patch_size = 4;
  std::size_t width = 32;  // C
  std::size_t blocks = 2;  // L
};

// One recurrent block. Matrices act on row vectors (x · W), so the input
// projection of token i is x_i · w_in.
struct SsmBlockParams {
  nc::Tensor norm_gamma;   // [1×C]
  nc::Tensor norm_beta;    // [1×C]
  nc::Tensor decay_logit;  // [1×C], decay = sigmoid(decay_logit) ∈ (0,1)
  nc::Tensor w_in;         // [C×C]
  nc::Tensor w_out;        // [C×C]
  nc::Tensor skip;         // [1×C]
};

using ParamVisitor = std::function<void(const std::string& name, nc::Tensor& t)>;

struct EncoderParams {
  EncoderConfig config;
  nc::Tensor patch_weight;  // [P²×C], no bias
  std::vector<SsmBlockParams> blocks;

  static EncoderParams init(const EncoderConfig& cfg, nc::Rng& rng);
  void visit(const ParamVisitor& fn);
};

// [N×P²] matrix of flattened patches in raster order.
nc::Tensor patchify(const ImageSample& image, std::size_t patch_size);

nc::Var patch_embed(nc::Tape& tape, const ImageSample& image, std::size_t patch_size, nc::Var patch_weight);

// Left-to-right diagonal recurrence over tokens x[N×C]:
//   h_i = decay ⊙ h_{i-1} + x_i·w_in,  out_i = h_i·w_out + skip ⊙ x_i.
nc::Var selective_scan(nc::Var x, nc::Var decay, nc::Var w_in, nc::Var w_out, nc::Var skip);

// layer_norm → selective_scan → residual add.
nc::Var ssm_block(nc::Bindings& bind, nc::Var x, SsmBlockParams& block);

// Patch tokens z[N×C].
nc::Var encode(nc::Bindings& bind, const ImageSample& image, EncoderParams& params);

nc::Var pool_mean(nc::Var z);

}  // namespace dast::encoder
