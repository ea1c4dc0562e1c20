#include "encoder/encoder.hpp"

#include <cmath>

namespace dast::encoder {

using nc::Tensor;
using nc::Var;

EncoderParams EncoderParams::init(const EncoderConfig& cfg, nc::Rng& rng) {
  if (cfg.blocks < 1) throw std::invalid_argument("encoder needs at least one block");
  EncoderParams p;
  p.config = cfg;
  const std::size_t c = cfg.width;
  p.patch_weight = nc::normal_tensor({cfg.patch_size * cfg.patch_size, c}, 0.02, rng);
  const double decay_logit = std::log(0.9 / 0.1);  // sigmoid⁻¹(0.9)
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    SsmBlockParams blk;
    blk.norm_gamma = Tensor::filled({1, c}, 1.0, true);
    blk.norm_beta = Tensor::zeros({1, c}, true);
    blk.decay_logit = Tensor::filled({1, c}, decay_logit, true);
    blk.w_in = nc::normal_tensor({c, c}, 0.02, rng);
    blk.w_out = nc::normal_tensor({c, c}, 0.02, rng);
    blk.skip = Tensor::filled({1, c}, 1.0, true);
    p.blocks.push_back(std::move(blk));
  }
  return p;
}

void EncoderParams::visit(const ParamVisitor& fn) {
  fn("encoder.patch_weight", patch_weight);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string pre = "encoder.block" + std::to_string(b) + ".";
    auto& blk = blocks[b];
    fn(pre + "norm_gamma", blk.norm_gamma);
    fn(pre + "norm_beta", blk.norm_beta);
    fn(pre + "decay_logit", blk.decay_logit);
    fn(pre + "w_in", blk.w_in);
    fn(pre + "w_out", blk.w_out);
    fn(pre + "skip", blk.skip);
  }
}

Tensor patchify(const ImageSample& image, std::size_t patch_size) {
  const std::size_t h = image.height, w = image.width, p = patch_size;
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw nc::ShapeError("patch_embed: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by patch size " + std::to_string(p));
  }
  if (image.pixels.size() != h * w) throw nc::ShapeError("patch_embed: pixel count does not match image shape");
  const std::size_t gh = h / p, gw = w / p;
  Tensor out = Tensor::zeros({gh * gw, p * p});
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const std::size_t patch = gy * gw + gx;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) out.at(patch, y * p + x) = image.pixels[(gy * p + y) * w + gx * p + x];
    }
  }
  return out;
}

Var patch_embed(nc::Tape& tape, const ImageSample& image, std::size_t patch_size, Var patch_weight) {
  return nc::matmul(tape.constant(patchify(image, patch_size)), patch_weight);
}

Var selective_scan(Var x, Var decay, Var w_in, Var w_out, Var skip) {
  Var h = nc::linear_recurrence(nc::matmul(x, w_in), decay);
  return nc::add(nc::matmul(h, w_out), nc::mul_row(x, skip));
}

Var ssm_block(nc::Bindings& bind, Var x, SsmBlockParams& blk) {
  Var normed = nc::layer_norm(x, bind(blk.norm_gamma), bind(blk.norm_beta));
  Var decay = nc::apply(bind(blk.decay_logit), nc::Nonlinearity::sigmoid);
  return nc::add(x, selective_scan(normed, decay, bind(blk.w_in), bind(blk.w_out), bind(blk.skip)));
}

Var encode(nc::Bindings& bind, const ImageSample& image, EncoderParams& params) {
  Var z = patch_embed(bind.tape(), image, params.config.patch_size, bind(params.patch_weight));
  for (auto& blk : params.blocks) z = ssm_block(bind, z, blk);
  return z;
}

Var pool_mean(Var z) { return nc::mean_rows(z); }

}  // namespace dast::encoder
