#include "dvaf/dvaf.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace dast::dvaf {

using nc::Tensor;
using nc::Var;

GateMode parse_gate_mode(const std::string& s) {
  if (s == "linear") return GateMode::linear;
  if (s == "sigmoid") return GateMode::sigmoid;
  throw std::invalid_argument("unknown gate mode '" + s + "'");
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "none") return FusionMode::none;
  if (s == "dvaf") return FusionMode::dvaf;
  if (s == "concat") return FusionMode::concat;
  if (s == "mean") return FusionMode::mean;
  throw std::invalid_argument("unknown fusion mode '" + s + "'");
}

std::string to_string(GateMode m) { return m == GateMode::linear ? "linear" : "sigmoid"; }

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::none:
      return "none";
    case FusionMode::dvaf:
      return "dvaf";
    case FusionMode::concat:
      return "concat";
    case FusionMode::mean:
      return "mean";
  }
  return "dvaf";
}

FusionParams FusionParams::init(std::size_t width, std::size_t decoder_width, nc::Rng& rng) {
  FusionParams p;
  p.self_gamma = Tensor::filled({1, width}, 1.0, true);
  p.self_beta = Tensor::zeros({1, width}, true);
  p.pool_query = nc::normal_tensor({1, width}, 0.02, rng);
  // Start from an even blend of the two inputs plus small noise.
  p.w_gate = nc::normal_tensor({width, 2 * width}, 0.02, rng);
  for (std::size_t i = 0; i < width; ++i) {
    p.w_gate.at(i, i) += 0.5;
    p.w_gate.at(i, width + i) += 0.5;
  }
  p.w_proj = nc::normal_tensor({width, decoder_width}, 0.02, rng);
  p.proj_gamma = Tensor::filled({1, decoder_width}, 1.0, true);
  p.proj_beta = Tensor::zeros({1, decoder_width}, true);
  return p;
}

void FusionParams::visit(const encoder::ParamVisitor& fn) {
  fn("fusion.self_gamma", self_gamma);
  fn("fusion.self_beta", self_beta);
  fn("fusion.pool_query", pool_query);
  fn("fusion.w_gate", w_gate);
  fn("proj.w_proj", w_proj);
  fn("proj.norm_gamma", proj_gamma);
  fn("proj.norm_beta", proj_beta);
}

Var self_attend(nc::Bindings& bind, Var tokens, FusionParams& params) {
  auto attn = nc::scaled_dot_attention(tokens, tokens, tokens);
  return nc::layer_norm(nc::add(tokens, attn.output), bind(params.self_gamma), bind(params.self_beta));
}

Var attention_pool(Var tokens, Var query) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(tokens.cols()));
  Var weights = nc::softmax(nc::scale(nc::matmul_nt(query, tokens), inv_sqrt), 1);
  return nc::matmul(weights, tokens);
}

Var dvaf_pool(nc::Bindings& bind, stage1::DastBank& bank, Var z, FusionParams& params) {
  Var cross = stage1::refine_dasts(bind, bank, z);
  return attention_pool(self_attend(bind, cross, params), bind(params.pool_query));
}

Var gate_fuse(nc::Bindings& bind, Var p, Var z_bar, FusionParams& params, GateMode mode) {
  Var mixed = nc::matmul_nt(nc::concat_cols(p, z_bar), bind(params.w_gate));
  if (mode == GateMode::linear) return mixed;
  Var g = nc::apply(mixed, nc::Nonlinearity::sigmoid);
  return nc::add(z_bar, nc::mul(g, nc::sub(p, z_bar)));
}

Var build_visual_sequence(Var z, Var f) {
  if (z.cols() != f.cols()) throw nc::ShapeError("build_visual_sequence: width mismatch");
  std::array<Var, 2> parts{z, f};
  return nc::concat_rows(parts);
}

Var project(nc::Bindings& bind, Var v, FusionParams& params) {
  return nc::layer_norm(nc::matmul(v, bind(params.w_proj)), bind(params.proj_gamma), bind(params.proj_beta));
}

Var visual_prefix(nc::Bindings& bind, stage1::DastBank& bank, Var z, FusionParams& params, FusionMode mode, GateMode gate) {
  Var v = z;
  switch (mode) {
    case FusionMode::none:
      break;
    case FusionMode::dvaf: {
      Var p = dvaf_pool(bind, bank, z, params);
      v = build_visual_sequence(z, gate_fuse(bind, p, encoder::pool_mean(z), params, gate));
      break;
    }
    case FusionMode::concat: {
      std::array<Var, 2> parts{z, stage1::refine_dasts(bind, bank, z)};
      v = nc::concat_rows(parts);
      break;
    }
    case FusionMode::mean: {
      Var p = nc::mean_rows(stage1::refine_dasts(bind, bank, z));
      v = build_visual_sequence(z, gate_fuse(bind, p, encoder::pool_mean(z), params, gate));
      break;
    }
  }
  return project(bind, v, params);
}

}  // namespace dast::dvaf
