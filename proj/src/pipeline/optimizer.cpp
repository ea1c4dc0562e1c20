#include "pipeline/optimizer.hpp"

#include <cmath>

namespace dast::pipeline {

void AdamW::step(const NamedParams& params, double lr) {
  for (const auto& [name, p] : params) {
    if (!p->requires_grad || !p->has_grad()) continue;
    if (p->grad.size() != p->data.size()) throw nc::ShapeError("AdamW: gradient size mismatch for '" + name + "'");
    for (double g : p->grad)
      if (!std::isfinite(g)) throw nc::NumericError("AdamW: non-finite gradient in '" + name + "'");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (const auto& [name, p] : params) {
    if (!p->requires_grad) continue;
    auto& st = state_[name];
    if (st.m.empty()) {
      st.m.assign(p->data.size(), 0.0);
      st.v.assign(p->data.size(), 0.0);
    }
    const bool has = p->has_grad();
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double g = has ? p->grad[i] : 0.0;
      st.m[i] = opts_.beta1 * st.m[i] + (1.0 - opts_.beta1) * g;
      st.v[i] = opts_.beta2 * st.v[i] + (1.0 - opts_.beta2) * g * g;
      const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
      p->data[i] -= lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * p->data[i]);
    }
  }
}

}  // namespace dast::pipeline
