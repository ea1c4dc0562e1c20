#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "numcore/tensor.hpp"

namespace dast::pipeline {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

using NamedParams = std::vector<std::pair<std::string, nc::Tensor*>>;

// Adam moments with decoupled weight decay. Parameters with
// requires_grad == false are skipped and never get state.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  // Throws NumericError before touching anything if a trainable gradient is
  // non-finite. A missing gradient counts as zero.
  void step(const NamedParams& params, double lr);

  std::uint64_t steps() const { return t_; }
  std::size_t state_count() const { return state_.size(); }
  bool has_state(const std::string& name) const { return state_.count(name) > 0; }
  const AdamWOptions& options() const { return opts_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWOptions opts_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace dast::pipeline
