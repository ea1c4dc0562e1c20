#pragma once

#include <string>

#include "numcore/tape.hpp"
#include "stage1/stage1.hpp"

namespace dast::dvaf {

// How the fusion token f is formed from [p; z̄].
enum class GateMode {
  linear,   // f = W_gate · [p; z̄]
  sigmoid,  // g = σ(W_gate · [p; z̄]), f = g ⊙ p + (1 − g) ⊙ z̄
};

// What is appended to the patch sequence before projection.
enum class FusionMode {
  none,    // V = z
  dvaf,    // V = [z; f] with the attention cascade
  concat,  // V = [z; refined DASTs]
  mean,    // V = [z; f] with p = mean of refined DASTs
};

GateMode parse_gate_mode(const std::string& s);
FusionMode parse_fusion_mode(const std::string& s);
std::string to_string(GateMode m);
std::string to_string(FusionMode m);

struct FusionParams {
  nc::Tensor self_gamma;  // [1×C], layer norm after self-attention
  nc::Tensor self_beta;   // [1×C]
  nc::Tensor pool_query;  // [1×C]
  nc::Tensor w_gate;      // [C×2C]
  nc::Tensor w_proj;      // [C×C_dec]
  nc::Tensor proj_gamma;  // [1×C_dec]
  nc::Tensor proj_beta;   // [1×C_dec]

  static FusionParams init(std::size_t width, std::size_t decoder_width, nc::Rng& rng);
  std::size_t width() const { return pool_query.cols(); }
  std::size_t decoder_width() const { return w_proj.cols(); }
  void visit(const encoder::ParamVisitor& fn);
};

// layer_norm(t + attention(t, t, t)).
nc::Var self_attend(nc::Bindings& bind, nc::Var tokens, FusionParams& params);

// weights = softmax(⟨q, token_d⟩ / √C), returns Σ_d weights_d · token_d as [1×C].
nc::Var attention_pool(nc::Var tokens, nc::Var query);

// p = AttnPool(SelfAttn(CrossAttn(dasts, z, z))), cross-attention shared with refine_dasts.
nc::Var dvaf_pool(nc::Bindings& bind, stage1::DastBank& bank, nc::Var z, FusionParams& params);

nc::Var gate_fuse(nc::Bindings& bind, nc::Var p, nc::Var z_bar, FusionParams& params, GateMode mode = GateMode::linear);

// V = [z_1 … z_N, f].
nc::Var build_visual_sequence(nc::Var z, nc::Var f);

// Ṽ = layer_norm(V · W_proj).
nc::Var project(nc::Bindings& bind, nc::Var v, FusionParams& params);

// Full visual-prefix path for one study: V under `mode`, then projection.
nc::Var visual_prefix(nc::Bindings& bind, stage1::DastBank& bank, nc::Var z, FusionParams& params, FusionMode mode,
                      GateMode gate);

}  // namespace dast::dvaf
