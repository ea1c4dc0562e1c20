#include "generator/decoder.hpp"

#include <array>
#include <cmath>
#include <set>

namespace dast::gen {

using nc::Tensor;
using nc::Var;

DecoderParams DecoderParams::init(const DecoderConfig& cfg, nc::Rng& rng) {
  if (cfg.vocab_size <= Vocabulary::kNumSpecial) throw std::invalid_argument("decoder: vocabulary too small");
  if (cfg.heads == 0 || cfg.width % cfg.heads != 0) throw std::invalid_argument("decoder: width must divide into heads");
  DecoderParams p;
  p.config = cfg;
  const std::size_t d = cfg.width;
  p.token_embedding = nc::normal_tensor({cfg.vocab_size, d}, 0.02, rng);
  p.position_embedding = nc::normal_tensor({cfg.max_text_tokens + cfg.max_prefix_rows, d}, 0.02, rng);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    DecoderBlock blk;
    blk.ln1_gamma = Tensor::filled({1, d}, 1.0, true);
    blk.ln1_beta = Tensor::zeros({1, d}, true);
    blk.wq = nc::normal_tensor({d, d}, 0.02, rng);
    blk.wk = nc::normal_tensor({d, d}, 0.02, rng);
    blk.wv = nc::normal_tensor({d, d}, 0.02, rng);
    blk.wo = nc::normal_tensor({d, d}, 0.02, rng);
    blk.ln2_gamma = Tensor::filled({1, d}, 1.0, true);
    blk.ln2_beta = Tensor::zeros({1, d}, true);
    blk.w1 = nc::normal_tensor({d, cfg.ffn_width}, 0.02, rng);
    blk.b1 = Tensor::zeros({1, cfg.ffn_width}, true);
    blk.w2 = nc::normal_tensor({cfg.ffn_width, d}, 0.02, rng);
    blk.b2 = Tensor::zeros({1, d}, true);
    p.blocks.push_back(std::move(blk));
  }
  p.final_gamma = Tensor::filled({1, d}, 1.0, true);
  p.final_beta = Tensor::zeros({1, d}, true);
  return p;
}

void DecoderParams::visit(const encoder::ParamVisitor& fn) {
  fn("decoder.token_embedding", token_embedding);
  fn("decoder.position_embedding", position_embedding);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string pre = "decoder.block" + std::to_string(b) + ".";
    auto& k = blocks[b];
    fn(pre + "ln1_gamma", k.ln1_gamma);
    fn(pre + "ln1_beta", k.ln1_beta);
    fn(pre + "wq", k.wq);
    fn(pre + "wk", k.wk);
    fn(pre + "wv", k.wv);
    fn(pre + "wo", k.wo);
    fn(pre + "ln2_gamma", k.ln2_gamma);
    fn(pre + "ln2_beta", k.ln2_beta);
    fn(pre + "w1", k.w1);
    fn(pre + "b1", k.b1);
    fn(pre + "w2", k.w2);
    fn(pre + "b2", k.b2);
  }
  fn("decoder.final_gamma", final_gamma);
  fn("decoder.final_beta", final_beta);
}

namespace {

AssembledPrompt build_prompt(const Vocabulary& vocab, std::string_view retrieved, Var prefix, const TokenSequence& target,
                             const DecoderConfig& cfg) {
  const auto& t = target.ids;
  if (t.size() < 2 || t.front() != Vocabulary::kBos || t.back() != Vocabulary::kEos) {
    throw std::invalid_argument("assemble_prompt: target must be a complete [BOS … EOS] sequence");
  }
  if (prefix.tape && prefix.cols() != cfg.width) {
    throw nc::ShapeError("assemble_prompt: prefix width does not match decoder width");
  }
  AssembledPrompt p;
  p.context_ids = vocab.encode_words(retrieved);
  p.context_ids.push_back(Vocabulary::kSep);
  p.prefix = prefix;
  p.input_ids.assign(t.begin(), t.end() - 1);
  p.targets.assign(t.begin() + 1, t.end());
  const std::size_t text = p.context_ids.size() + p.input_ids.size();
  if (text > cfg.max_text_tokens) {
    throw std::length_error("assemble_prompt: " + std::to_string(text) + " text tokens exceed the limit of " +
                            std::to_string(cfg.max_text_tokens));
  }
  if (p.prefix_rows() > cfg.max_prefix_rows) {
    throw std::length_error("assemble_prompt: " + std::to_string(p.prefix_rows()) + " prefix rows exceed the limit of " +
                            std::to_string(cfg.max_prefix_rows));
  }
  return p;
}

}  // namespace

AssembledPrompt assemble_prompt(const Vocabulary& vocab, std::string_view retrieved, Var prefix, const TokenSequence& target,
                                const DecoderConfig& cfg) {
  if (!prefix.tape) throw std::invalid_argument("assemble_prompt: missing visual prefix");
  return build_prompt(vocab, retrieved, prefix, target, cfg);
}

AssembledPrompt text_prompt(const Vocabulary& vocab, std::string_view retrieved, const TokenSequence& target,
                            const DecoderConfig& cfg) {
  return build_prompt(vocab, retrieved, Var{}, target, cfg);
}

namespace {

// Position i may see j when j ≤ i or j is a prefix row.
std::vector<std::uint8_t> attention_mask(std::size_t len, std::size_t prefix_begin, std::size_t prefix_end) {
  std::vector<std::uint8_t> mask(len * len, 0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < len; ++j) mask[i * len + j] = (j <= i || (j >= prefix_begin && j < prefix_end)) ? 1 : 0;
  return mask;
}

Var causal_attention(nc::Bindings& bind, Var x, DecoderBlock& blk, std::size_t heads, const std::vector<std::uint8_t>& mask) {
  const std::size_t d = x.cols();
  const std::size_t dh = d / heads;
  Var q = nc::matmul(x, bind(blk.wq));
  Var k = nc::matmul(x, bind(blk.wk));
  Var v = nc::matmul(x, bind(blk.wv));
  Var wo = bind(blk.wo);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var out;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t lo = h * dh, hi = lo + dh;
    Var scores = nc::scale(nc::matmul_nt(nc::slice_cols(q, lo, hi), nc::slice_cols(k, lo, hi)), inv_sqrt);
    Var weights = nc::masked_softmax_rows(scores, mask);
    Var head = nc::matmul(nc::matmul(weights, nc::slice_cols(v, lo, hi)), nc::slice_rows(wo, lo, hi));
    out = h == 0 ? head : nc::add(out, head);
  }
  return out;
}

Var run_decoder(nc::Bindings& bind, DecoderParams& params, const AssembledPrompt& prompt) {
  Var emb = bind(params.token_embedding);
  Var x;
  if (prompt.has_prefix()) {
    std::array<Var, 3> parts{nc::gather_rows(emb, prompt.context_ids), prompt.prefix, nc::gather_rows(emb, prompt.input_ids)};
    x = nc::concat_rows(parts);
  } else {
    std::array<Var, 2> parts{nc::gather_rows(emb, prompt.context_ids), nc::gather_rows(emb, prompt.input_ids)};
    x = nc::concat_rows(parts);
  }
  const std::size_t len = prompt.length();
  // Text tokens count positions as if the prefix were absent, so a decoder
  // pretrained on text alone sees the same offsets. Prefix rows use the
  // block of the table past max_text_tokens.
  std::vector<std::size_t> pos;
  pos.reserve(len);
  std::size_t text_pos = 0;
  for (std::size_t i = 0; i < len; ++i) {
    const bool in_prefix = i >= prompt.prefix_begin() && i < prompt.target_begin();
    pos.push_back(in_prefix ? params.config.max_text_tokens + (i - prompt.prefix_begin()) : text_pos++);
  }
  x = nc::add(x, nc::gather_rows(bind(params.position_embedding), pos));
  const auto mask = attention_mask(len, prompt.prefix_begin(), prompt.target_begin());
  for (auto& blk : params.blocks) {
    Var h = nc::layer_norm(x, bind(blk.ln1_gamma), bind(blk.ln1_beta));
    x = nc::add(x, causal_attention(bind, h, blk, params.config.heads, mask));
    Var g = nc::layer_norm(x, bind(blk.ln2_gamma), bind(blk.ln2_beta));
    Var ff = nc::apply(nc::add_row(nc::matmul(g, bind(blk.w1)), bind(blk.b1)), nc::Nonlinearity::gelu);
    x = nc::add(x, nc::add_row(nc::matmul(ff, bind(blk.w2)), bind(blk.b2)));
  }
  return nc::layer_norm(x, bind(params.final_gamma), bind(params.final_beta));
}

}  // namespace

Var decoder_logits(nc::Bindings& bind, DecoderParams& params, const AssembledPrompt& prompt) {
  Var h = run_decoder(bind, params, prompt);
  Var tail = nc::slice_rows(h, prompt.target_begin(), prompt.length());
  return nc::matmul_nt(tail, bind(params.token_embedding));
}

LmLoss lm_loss(nc::Bindings& bind, DecoderParams& params, const AssembledPrompt& prompt) {
  if (prompt.targets.empty()) throw std::invalid_argument("lm_loss: empty target");
  LmLoss out;
  out.tokens = prompt.targets.size();
  out.sum = nc::cross_entropy_rows(decoder_logits(bind, params, prompt), prompt.targets);
  out.mean = nc::scale(out.sum, 1.0 / static_cast<double>(out.tokens));
  return out;
}

std::string generate(DecoderParams& params, const Vocabulary& vocab, std::string_view retrieved,
                     const Tensor& projected_prefix, std::size_t max_len) {
  std::vector<std::size_t> produced;
  const std::size_t v = params.config.vocab_size;
  for (std::size_t step = 0; step < max_len; ++step) {
    nc::Tape tape;
    nc::Bindings bind(tape);
    AssembledPrompt p;
    p.context_ids = vocab.encode_words(retrieved);
    p.context_ids.push_back(Vocabulary::kSep);
    p.prefix = tape.constant(projected_prefix);
    p.input_ids.push_back(Vocabulary::kBos);
    p.input_ids.insert(p.input_ids.end(), produced.begin(), produced.end());
    if (p.context_ids.size() + p.input_ids.size() > params.config.max_text_tokens) break;
    Var h = run_decoder(bind, params, p);
    Var last = nc::slice_rows(h, p.length() - 1, p.length());
    const auto& logits = nc::matmul_nt(last, bind(params.token_embedding)).value().data;
    std::size_t best = 0;
    for (std::size_t i = 1; i < v; ++i)
      if (logits[i] > logits[best]) best = i;
    if (best == Vocabulary::kEos) break;
    produced.push_back(best);
  }
  return vocab.detokenize(produced);
}

void apply_freeze(const std::function<void(const encoder::ParamVisitor&)>& visit_all, const FreezeMask& mask) {
  std::set<std::string> seen;
  std::vector<std::pair<nc::Tensor*, bool>> updates;
  visit_all([&](const std::string& name, nc::Tensor& t) {
    auto it = mask.find(name);
    if (it == mask.end()) throw std::invalid_argument("apply_freeze: mask has no entry for parameter '" + name + "'");
    seen.insert(name);
    updates.emplace_back(&t, it->second);
  });
  for (const auto& [name, flag] : mask) {
    if (!seen.count(name)) throw std::invalid_argument("apply_freeze: mask names unknown parameter '" + name + "'");
  }
  for (auto& [t, trainable] : updates) {
    t->requires_grad = trainable;
    if (!trainable) t->clear_grad();
  }
}

}  // namespace dast::gen
