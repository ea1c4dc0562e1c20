#include "stage1/stage1.hpp"

#include <cctype>
#include <cmath>
#include <numeric>

namespace dast::stage1 {

using nc::Tensor;
using nc::Var;

DastBank DastBank::init(std::size_t width, std::size_t refine_layers, nc::Rng& rng) {
  if (refine_layers < 1) throw std::invalid_argument("DAST refinement needs at least one layer");
  DastBank b;
  b.tokens = nc::normal_tensor({kNumDiseases, width}, 0.02, rng);
  for (std::size_t l = 0; l < refine_layers; ++l) {
    b.norm_gamma.push_back(Tensor::filled({1, width}, 1.0, true));
    b.norm_beta.push_back(Tensor::zeros({1, width}, true));
  }
  b.head_weight = nc::normal_tensor({kNumDiseases, width}, 0.02, rng);
  b.head_bias = Tensor::zeros({kNumDiseases, 1}, true);
  return b;
}

void DastBank::visit(const encoder::ParamVisitor& fn) {
  fn("dast.tokens", tokens);
  for (std::size_t l = 0; l < norm_gamma.size(); ++l) {
    fn("dast.refine" + std::to_string(l) + ".norm_gamma", norm_gamma[l]);
    fn("dast.refine" + std::to_string(l) + ".norm_beta", norm_beta[l]);
  }
  fn("head.weight", head_weight);
  fn("head.bias", head_bias);
}

Var refine_dasts(nc::Bindings& bind, DastBank& bank, Var z) {
  Var t = bind(bank.tokens);
  for (std::size_t l = 0; l < bank.norm_gamma.size(); ++l) {
    auto attn = nc::scaled_dot_attention(t, z, z);
    t = nc::layer_norm(nc::add(t, attn.output), bind(bank.norm_gamma[l]), bind(bank.norm_beta[l]));
  }
  return t;
}

Var classify(nc::Bindings& bind, Var refined, DastBank& bank) {
  return nc::add(nc::sum_cols(nc::mul(refined, bind(bank.head_weight))), bind(bank.head_bias));
}

Var loss_cls(Var logits, const LabelArray& labels) {
  std::vector<double> y(labels.begin(), labels.end());
  return nc::bce_with_logits(logits, y);
}

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::vector<double> HashTextEncoder::encode(std::string_view report) const {
  std::vector<double> acc(width_, 0.0);
  std::size_t count = 0;
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    nc::Rng rng(fnv1a(token, seed_));
    for (auto& v : acc) v += rng.normal(0.0, 1.0);
    ++count;
    token.clear();
  };
  for (char ch : report) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  if (count == 0) throw std::invalid_argument("text_encode: empty report");
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  for (auto& v : acc) v /= norm;
  return acc;
}

Var loss_ctl(Var visual, const Tensor& textual, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("loss_ctl: temperature must be positive");
  const std::size_t b = visual.rows();
  if (textual.rows() != b || textual.cols() != visual.cols()) throw nc::ShapeError("loss_ctl: batch shape mismatch");
  nc::Tape& tape = *visual.tape;
  Var v = nc::l2_normalize_rows(visual);
  Var t = nc::l2_normalize_rows(tape.constant(textual));
  Var sim = nc::scale(nc::matmul_nt(v, t), 1.0 / tau);
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  Var rows = nc::cross_entropy_rows(sim, diag);
  Var cols = nc::cross_entropy_rows(nc::transpose(sim), diag);
  return nc::scale(nc::add(rows, cols), 0.5 / static_cast<double>(b));
}

Stage1Model Stage1Model::init(const encoder::EncoderConfig& cfg, std::size_t refine_layers, nc::Rng& rng) {
  Stage1Model m;
  m.encoder = encoder::EncoderParams::init(cfg, rng);
  m.bank = DastBank::init(cfg.width, refine_layers, rng);
  return m;
}

void Stage1Model::visit(const encoder::ParamVisitor& fn) {
  encoder.visit(fn);
  bank.visit(fn);
}

Stage1Outputs stage1_loss(nc::Bindings& bind, Stage1Model& model, std::span<const encoder::ImageSample* const> batch,
                          const TextEncoder& text, double tau) {
  if (batch.empty()) throw std::invalid_argument("stage1_loss: empty batch");
  Stage1Outputs out;
  std::vector<Var> pooled;
  std::vector<double> labels;
  Tensor textual = Tensor::zeros({batch.size(), text.width()});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& sample = *batch[i];
    Var z = encoder::encode(bind, sample, model.encoder);
    Var refined = refine_dasts(bind, model.bank, z);
    out.logits.push_back(classify(bind, refined, model.bank));
    pooled.push_back(encoder::pool_mean(z));
    labels.insert(labels.end(), sample.labels.begin(), sample.labels.end());
    auto emb = text.encode(sample.report);
    std::copy(emb.begin(), emb.end(), textual.data.begin() + static_cast<std::ptrdiff_t>(i * text.width()));
  }
  out.cls = nc::bce_with_logits(nc::concat_rows(out.logits), labels);
  out.ctl = loss_ctl(nc::concat_rows(pooled), textual, tau);
  out.total = nc::add(out.cls, out.ctl);
  return out;
}

Stage1Features extract_features(Stage1Model& model, const encoder::ImageSample& image) {
  nc::Tape tape;
  nc::Bindings bind(tape);
  Var z = encoder::encode(bind, image, model.encoder);
  Var logits = classify(bind, refine_dasts(bind, model.bank, z), model.bank);
  Stage1Features f;
  f.z = Tensor(z.shape(), z.value().data);
  f.z_bar = encoder::pool_mean(z).value().data;
  f.logits = logits.value().data;
  return f;
}

}  // namespace dast::stage1
