#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dast::pipeline {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  double base_lr = 1e-4;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  int stage = 1;
  bool use_dast_dvaf = true;
  bool use_dmsr = true;
  double lambda = 0.5;
  double tau = 0.07;

  // AdamW
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  // model shape
  std::size_t encoder_width = 32;
  std::size_t encoder_blocks = 2;
  std::size_t refine_layers = 1;
  std::size_t decoder_width = 64;
  std::size_t decoder_heads = 4;
  std::size_t decoder_blocks = 2;
  std::size_t decoder_ffn = 128;
  std::size_t max_text_tokens = 128;

  // Text-only language-model pretraining of the decoder, which stays frozen
  // afterwards.
  std::size_t pretrain_steps = 0;
  double pretrain_lr = 1e-3;
  std::size_t pretrain_warmup = 50;

  // Fusion and projection trained against the frozen decoder before the
  // projection-only phase.
  std::size_t align_steps = 0;
  double align_lr = 1e-3;
  std::size_t align_warmup = 20;

  std::string fusion = "dvaf";  // dvaf | concat | mean (used when use_dast_dvaf)
  std::string gate = "linear";  // linear | sigmoid
  std::string logit_space = "raw";
  std::size_t max_gen_len = 64;

  // Throws ConfigError naming the first violated field.
  void validate() const;
};

// Applies `key = value` lines onto `cfg`. Blank lines and lines starting with
// '#' are skipped. Unknown keys and malformed values are fatal and name the key.
void apply_config_text(TrainConfig& cfg, const std::string& text);
TrainConfig load_config_file(const std::string& path);
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

// Linear warm-up from 0 to base_lr, then cosine decay to 0 at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);
double lr_at(std::size_t step, double base_lr, std::size_t warmup, std::size_t total);

}  // namespace dast::pipeline
