#include "numcore/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace dast::nc {

namespace {

double evaluate(const LossBuilder& f) {
  Tape tape;
  Var loss = f(tape);
  const double v = loss.value().data.at(0);
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss evaluation");
  return v;
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& f, const std::vector<Tensor*>& params, const GradCheckOptions& opts) {
  if (opts.eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
  const std::size_t stride = std::max<std::size_t>(1, opts.stride);

  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t i = 0; i < p.data.size(); i += stride) {
      const double saved = p.data[i];
      p.data[i] = saved + opts.eps;
      const double up = evaluate(f);
      p.data[i] = saved - opts.eps;
      const double down = evaluate(f);
      p.data[i] = saved;
      const double fd = (up - down) / (2.0 * opts.eps);
      const double ad = analytic[pi][i];
      const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace dast::nc
