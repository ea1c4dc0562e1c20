#pragma once

#include <map>
#include <string>
#include <vector>

#include "encoder/encoder.hpp"
#include "generator/vocab.hpp"
#include "numcore/tape.hpp"

namespace dast::gen {

struct DecoderConfig {
  std::size_t vocab_size = 0;
  std::size_t width = 64;  // C_dec
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_width = 128;
  std::size_t max_text_tokens = 128;  // retrieved words + SEP + BOS + target
  std::size_t max_prefix_rows = 96;
};

struct DecoderBlock {
  nc::Tensor ln1_gamma, ln1_beta;
  nc::Tensor wq, wk, wv, wo;  // [d×d]
  nc::Tensor ln2_gamma, ln2_beta;
  nc::Tensor w1, b1;  // [d×ffn], [1×ffn]
  nc::Tensor w2, b2;  // [ffn×d], [1×d]
};

// Small pre-norm causal decoder. The output projection is tied to the token
// embedding table.
struct DecoderParams {
  DecoderConfig config;
  nc::Tensor token_embedding;     // [V×d]
  nc::Tensor position_embedding;  // [(max_text + max_prefix)×d]; text rows first, then prefix rows
  std::vector<DecoderBlock> blocks;
  nc::Tensor final_gamma, final_beta;

  static DecoderParams init(const DecoderConfig& cfg, nc::Rng& rng);
  void visit(const encoder::ParamVisitor& fn);
};

// Decoder input: [retrieved words, SEP, prefix rows, BOS, target…].
struct AssembledPrompt {
  std::vector<std::size_t> context_ids;  // retrieved words + SEP
  nc::Var prefix;                        // [(rows)×d]; no tape means text only
  std::vector<std::size_t> input_ids;    // BOS + target[1 .. T-1]
  std::vector<std::size_t> targets;      // next-token labels, length T

  bool has_prefix() const { return prefix.tape != nullptr; }
  std::size_t prefix_rows() const { return has_prefix() ? prefix.rows() : 0; }
  std::size_t prefix_begin() const { return context_ids.size(); }
  std::size_t target_begin() const { return context_ids.size() + prefix_rows(); }
  std::size_t length() const { return target_begin() + input_ids.size(); }
};

// `target` must be a full [BOS, …, EOS] sequence; its BOS and the words become
// inputs and the words plus EOS become the prediction targets.
AssembledPrompt assemble_prompt(const Vocabulary& vocab, std::string_view retrieved, nc::Var prefix,
                                const TokenSequence& target, const DecoderConfig& cfg);

// Same layout with no visual rows: [retrieved words, SEP, BOS, target…].
// Used to pretrain the decoder as a plain language model.
AssembledPrompt text_prompt(const Vocabulary& vocab, std::string_view retrieved, const TokenSequence& target,
                            const DecoderConfig& cfg);

// Logits for every position from BOS onwards: [input_ids.size() × V].
nc::Var decoder_logits(nc::Bindings& bind, DecoderParams& params, const AssembledPrompt& prompt);

struct LmLoss {
  nc::Var sum;   // −Σ_t log P(y_t | …)
  nc::Var mean;  // sum / T
  std::size_t tokens = 0;
};

LmLoss lm_loss(nc::Bindings& bind, DecoderParams& params, const AssembledPrompt& prompt);

// Greedy argmax decoding from BOS until EOS or max_len words; ties go to the
// lowest token id.
std::string generate(DecoderParams& params, const Vocabulary& vocab, std::string_view retrieved,
                     const nc::Tensor& projected_prefix, std::size_t max_len);

// ---- freeze contract -------------------------------------------------------

using FreezeMask = std::map<std::string, bool>;  // name → trainable

// Sets requires_grad from the mask. Every visited parameter must appear in
// the mask and vice versa.
void apply_freeze(const std::function<void(const encoder::ParamVisitor&)>& visit_all, const FreezeMask& mask);

}  // namespace dast::gen
