#include "pipeline/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

namespace dast::pipeline {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a real number, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;

template <class T>
Setter size_field(T TrainConfig::*field) {
  return [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = static_cast<T>(parse_uint(k, v)); };
}

Setter real_field(double TrainConfig::*field) {
  return [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = parse_real(k, v); };
}

Setter bool_field(bool TrainConfig::*field) {
  return [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = parse_bool(k, v); };
}

Setter choice_field(std::string TrainConfig::*field, std::vector<std::string> allowed) {
  return [field, allowed](TrainConfig& c, const std::string& k, const std::string& v) {
    for (const auto& a : allowed)
      if (a == v) {
        c.*field = v;
        return;
      }
    throw ConfigError("config key '" + k + "': unsupported value '" + v + "'");
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table{
      {"base_lr", real_field(&TrainConfig::base_lr)},
      {"warmup_steps", size_field(&TrainConfig::warmup_steps)},
      {"total_steps", size_field(&TrainConfig::total_steps)},
      {"batch_size", size_field(&TrainConfig::batch_size)},
      {"seed", size_field(&TrainConfig::seed)},
      {"stage",
       [](TrainConfig& c, const std::string& k, const std::string& v) {
         const auto s = parse_uint(k, v);
         if (s != 1 && s != 2) throw ConfigError("config key 'stage': must be 1 or 2");
         c.stage = static_cast<int>(s);
       }},
      {"use_dast_dvaf", bool_field(&TrainConfig::use_dast_dvaf)},
      {"use_dmsr", bool_field(&TrainConfig::use_dmsr)},
      {"lambda", real_field(&TrainConfig::lambda)},
      {"tau", real_field(&TrainConfig::tau)},
      {"beta1", real_field(&TrainConfig::beta1)},
      {"beta2", real_field(&TrainConfig::beta2)},
      {"eps", real_field(&TrainConfig::eps)},
      {"weight_decay", real_field(&TrainConfig::weight_decay)},
      {"encoder_width", size_field(&TrainConfig::encoder_width)},
      {"encoder_blocks", size_field(&TrainConfig::encoder_blocks)},
      {"refine_layers", size_field(&TrainConfig::refine_layers)},
      {"decoder_width", size_field(&TrainConfig::decoder_width)},
      {"decoder_heads", size_field(&TrainConfig::decoder_heads)},
      {"decoder_blocks", size_field(&TrainConfig::decoder_blocks)},
      {"decoder_ffn", size_field(&TrainConfig::decoder_ffn)},
      {"max_text_tokens", size_field(&TrainConfig::max_text_tokens)},
      {"pretrain_steps", size_field(&TrainConfig::pretrain_steps)},
      {"pretrain_lr", real_field(&TrainConfig::pretrain_lr)},
      {"pretrain_warmup", size_field(&TrainConfig::pretrain_warmup)},
      {"align_steps", size_field(&TrainConfig::align_steps)},
      {"align_lr", real_field(&TrainConfig::align_lr)},
      {"align_warmup", size_field(&TrainConfig::align_warmup)},
      {"fusion", choice_field(&TrainConfig::fusion, {"dvaf", "concat", "mean"})},
      {"gate", choice_field(&TrainConfig::gate, {"linear", "sigmoid"})},
      {"logit_space", choice_field(&TrainConfig::logit_space, {"raw", "probability"})},
      {"max_gen_len", size_field(&TrainConfig::max_gen_len)},
  };
  return table;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("config key 'base_lr': must be positive");
  if (warmup_steps > total_steps) throw ConfigError("config key 'warmup_steps': exceeds total_steps");
  if (batch_size == 0) throw ConfigError("config key 'batch_size': must be positive");
  if (!(tau > 0.0)) throw ConfigError("config key 'tau': must be positive");
  if (lambda < 0.0) throw ConfigError("config key 'lambda': must be non-negative");
  if (!(pretrain_lr > 0.0)) throw ConfigError("config key 'pretrain_lr': must be positive");
  if (pretrain_warmup > pretrain_steps && pretrain_steps > 0) {
    throw ConfigError("config key 'pretrain_warmup': exceeds pretrain_steps");
  }
  if (!(align_lr > 0.0)) throw ConfigError("config key 'align_lr': must be positive");
  if (align_warmup > align_steps && align_steps > 0) {
    throw ConfigError("config key 'align_warmup': exceeds align_steps");
  }
  if (encoder_width == 0 || encoder_blocks == 0 || refine_layers == 0) {
    throw ConfigError("config: encoder dimensions must be positive");
  }
  if (decoder_heads == 0 || decoder_width % decoder_heads != 0) {
    throw ConfigError("config key 'decoder_heads': must divide decoder_width");
  }
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

void apply_config_text(TrainConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    set_config_value(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig cfg;
  apply_config_text(cfg, ss.str());
  return cfg;
}

double lr_at(std::size_t step, double base_lr, std::size_t warmup, std::size_t total) {
  if (step > total) throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps");
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return base_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_at(std::size_t step, const TrainConfig& cfg) { return lr_at(step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps); }

}  // namespace dast::pipeline
