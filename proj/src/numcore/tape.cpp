#include "numcore/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace dast::nc {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

CMapR cmap(const Tensor& t) { return CMapR(t.data.data(), t.rows(), t.cols()); }
CMapR cmap(const std::vector<double>& v, std::size_t r, std::size_t c) { return CMapR(v.data(), r, c); }
MapR map(std::vector<double>& v, std::size_t r, std::size_t c) { return MapR(v.data(), r, c); }

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) + ": operands recorded on different tapes");
  }
  return *a.tape;
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_row(Var r, std::size_t n, const char* op) {
  if (r.rows() != 1 || r.cols() != n) {
    throw ShapeError(std::string(op) + ": expected a row of width " + std::to_string(n) + ", got " +
                     shape_str(r.shape()));
  }
}

Tensor make(std::size_t r, std::size_t c) { return Tensor::zeros({r, c}); }

// Accumulate g into input `idx`'s adjoint if that input wants gradients.
bool wants(Tape& t, std::uint32_t id) { return t.requires_grad(id); }

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::param(Tensor& p) {
  p.check_finite("parameter leaf");
  Node n;
  n.op = "param";
  n.value = Tensor(p.shape, p.data);
  n.requires_grad = p.requires_grad;
  n.param = p.requires_grad ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  value.check_finite("constant leaf");
  Node n;
  n.op = "constant";
  value.grad.clear();
  value.requires_grad = false;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(const char* op, Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward) {
  value.check_finite(std::string("output of ") + op);
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(), [&](auto id) { return nodes_[id].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::vector<double>& Tape::grad_buffer(std::uint32_t id) {
  auto& g = nodes_[id].grad;
  if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
  return g;
}

void Tape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) {
    throw std::invalid_argument("backward: loss is detached from this tape");
  }
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(nodes_[loss.id].value.shape));
  }
  if (backward_done_) throw std::logic_error("backward: already run on this recording; reset the tape first");
  backward_done_ = true;

  if (nodes_[loss.id].requires_grad) {
    grad_buffer(loss.id)[0] = 1.0;
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      for (double g : n.grad) {
        if (!std::isfinite(g)) throw NumericError(std::string("non-finite adjoint at ") + n.op);
      }
      n.backward(*this, id);
    }
  }
  // Parameter leaves: accumulate (zeros for parameters the loss never reached).
  for (auto& n : nodes_) {
    if (n.param == nullptr) continue;
    if (n.param->grad.size() != n.param->data.size()) n.param->grad.assign(n.param->data.size(), 0.0);
    if (n.grad.empty()) continue;
    for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
  }
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

Var Bindings::operator()(Tensor& p) {
  for (const auto& [ptr, var] : bound_) {
    if (ptr == &p) return var;
  }
  Var v = tape_.param(p);
  bound_.emplace_back(&p, v);
  return v;
}

// ---- matrix products -------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  Tensor out = make(m, n);
  map(out.data, m, n).noalias() = cmap(a.value()) * cmap(b.value());
  return t.record("matmul", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, m, k, n](Tape& tp, std::uint32_t self) {
    auto g = cmap(tp.grad(self), m, n);
    if (wants(tp, ai)) map(tp.grad_buffer(ai), m, k).noalias() += g * cmap(tp.value(bi)).transpose();
    if (wants(tp, bi)) map(tp.grad_buffer(bi), k, n).noalias() += cmap(tp.value(ai)).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: widths disagree " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = make(m, n);
  map(out.data, m, n).noalias() = cmap(a.value()) * cmap(b.value()).transpose();
  return t.record("matmul_nt", std::move(out), {a.id, b.id},
                  [ai = a.id, bi = b.id, m, k, n](Tape& tp, std::uint32_t self) {
                    auto g = cmap(tp.grad(self), m, n);
                    if (wants(tp, ai)) map(tp.grad_buffer(ai), m, k).noalias() += g * cmap(tp.value(bi));
                    if (wants(tp, bi)) map(tp.grad_buffer(bi), n, k).noalias() += g.transpose() * cmap(tp.value(ai));
                  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make(n, m);
  map(out.data, n, m) = cmap(a.value()).transpose();
  return t.record("transpose", std::move(out), {a.id}, [ai = a.id, m, n](Tape& tp, std::uint32_t self) {
    map(tp.grad_buffer(ai), m, n) += cmap(tp.grad(self), n, m).transpose();
  });
}

// ---- elementwise -------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), a.value().data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return t.record("add", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    for (auto id : {ai, bi}) {
      if (!wants(tp, id)) continue;
      auto& ga = tp.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.value().data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return t.record("sub", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    if (wants(tp, ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants(tp, bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var add_row(Var a, Var r) {
  Tape& t = same_tape(a, r, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  require_row(r, n, "add_row");
  Tensor out(a.shape(), a.value().data);
  const auto& rv = r.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += rv[j];
  return t.record("add_row", std::move(out), {a.id, r.id}, [ai = a.id, ri = r.id, m, n](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    if (wants(tp, ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants(tp, ri)) {
      auto& gr = tp.grad_buffer(ri);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.value().data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return t.record("mul", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    if (wants(tp, ai)) {
      auto& ga = tp.grad_buffer(ai);
      const auto& bv = tp.value(bi).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (wants(tp, bi)) {
      auto& gb = tp.grad_buffer(bi);
      const auto& av = tp.value(ai).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var mul_row(Var a, Var r) {
  Tape& t = same_tape(a, r, "mul_row");
  const std::size_t m = a.rows(), n = a.cols();
  require_row(r, n, "mul_row");
  Tensor out(a.shape(), a.value().data);
  const auto& rv = r.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= rv[j];
  return t.record("mul_row", std::move(out), {a.id, r.id}, [ai = a.id, ri = r.id, m, n](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    if (wants(tp, ai)) {
      auto& ga = tp.grad_buffer(ai);
      const auto& rv2 = tp.value(ri).data;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * rv2[j];
    }
    if (wants(tp, ri)) {
      auto& gr = tp.grad_buffer(ri);
      const auto& av = tp.value(ai).data;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j] * av[i * n + j];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out(a.shape(), a.value().data);
  for (auto& v : out.data) v *= s;
  return a.tape->record("scale", std::move(out), {a.id}, [ai = a.id, s](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Tensor out(a.shape(), a.value().data);
  for (auto& v : out.data) v += s;
  return a.tape->record("add_scalar", std::move(out), {a.id}, [ai = a.id](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// ---- softmax ---------------------------------------------------------------

namespace {

// Softmax over `count` entries spaced `stride` apart starting at `base`.
void softmax_line(const double* x, double* y, std::size_t count, std::size_t stride, const std::uint8_t* mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count; ++i) {
    if (mask && !mask[i * stride]) continue;
    mx = std::max(mx, x[i * stride]);
  }
  if (!std::isfinite(mx)) throw NumericError("softmax: no attendable entries in a row");
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    double e = (mask && !mask[i * stride]) ? 0.0 : std::exp(x[i * stride] - mx);
    y[i * stride] = e;
    total += e;
  }
  for (std::size_t i = 0; i < count; ++i) y[i * stride] /= total;
}

void softmax_line_backward(const double* y, const double* g, double* gx, std::size_t count, std::size_t stride) {
  double dot = 0.0;
  for (std::size_t i = 0; i < count; ++i) dot += y[i * stride] * g[i * stride];
  for (std::size_t i = 0; i < count; ++i) gx[i * stride] += y[i * stride] * (g[i * stride] - dot);
}

}  // namespace

Var softmax(Var x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("softmax: axis out of range for " + shape_str(shape));
  const std::size_t m = x.rows(), n = x.cols();
  const bool over_rows = shape.size() == 2 && axis == 0;  // normalise each column
  Tensor out(shape, std::vector<double>(x.value().size()));
  const double* xv = x.value().data.data();
  if (over_rows) {
    for (std::size_t j = 0; j < n; ++j) softmax_line(xv + j, out.data.data() + j, m, n, nullptr);
  } else {
    for (std::size_t i = 0; i < m; ++i) softmax_line(xv + i * n, out.data.data() + i * n, n, 1, nullptr);
  }
  return x.tape->record("softmax", std::move(out), {x.id}, [xi = x.id, m, n, over_rows](Tape& tp, std::uint32_t self) {
    const double* y = tp.value(self).data.data();
    const double* g = tp.grad(self).data();
    double* gx = tp.grad_buffer(xi).data();
    if (over_rows) {
      for (std::size_t j = 0; j < n; ++j) softmax_line_backward(y + j, g + j, gx + j, m, n);
    } else {
      for (std::size_t i = 0; i < m; ++i) softmax_line_backward(y + i * n, g + i * n, gx + i * n, n, 1);
    }
  });
}

Var masked_softmax_rows(Var x, std::span<const std::uint8_t> mask) {
  const std::size_t m = x.rows(), n = x.cols();
  if (mask.size() != m * n) throw ShapeError("masked_softmax_rows: mask size mismatch");
  Tensor out(x.shape(), std::vector<double>(m * n));
  const double* xv = x.value().data.data();
  for (std::size_t i = 0; i < m; ++i) softmax_line(xv + i * n, out.data.data() + i * n, n, 1, mask.data() + i * n);
  return x.tape->record("masked_softmax", std::move(out), {x.id}, [xi = x.id, m, n](Tape& tp, std::uint32_t self) {
    const double* y = tp.value(self).data.data();
    const double* g = tp.grad(self).data();
    double* gx = tp.grad_buffer(xi).data();
    // Masked entries have y = 0, so they receive no adjoint.
    for (std::size_t i = 0; i < m; ++i) softmax_line_backward(y + i * n, g + i * n, gx + i * n, n, 1);
  });
}

// ---- layer norm ------------------------------------------------------------

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(x, gamma, "layer_norm");
  same_tape(x, beta, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  require_row(gamma, n, "layer_norm gamma");
  require_row(beta, n, "layer_norm beta");
  const auto& xv = x.value().data;
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  Tensor out(x.shape(), std::vector<double>(m * n));
  // Cached normalised values and inverse std per row for the adjoint.
  std::vector<double> xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out.data[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  return t.record(
      "layer_norm", std::move(out), {x.id, gamma.id, beta.id},
      [xi = x.id, gi = gamma.id, bi = beta.id, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& tp, std::uint32_t self) {
        const auto& g = tp.grad(self);
        if (wants(tp, gi)) {
          auto& gg = tp.grad_buffer(gi);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (wants(tp, bi)) {
          auto& gb = tp.grad_buffer(bi);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (wants(tp, xi)) {
          const auto& gam = tp.value(gi).data;
          auto& gx = tp.grad_buffer(xi);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[i * n + j] * gam[j];
              s1 += dxh;
              s2 += dxh * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[i * n + j] * gam[j];
              gx[i * n + j] += inv_std[i] * (dxh - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
            }
          }
        }
      });
}

// ---- nonlinearities --------------------------------------------------------

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double act(Nonlinearity f, double x) {
  switch (f) {
    case Nonlinearity::sigmoid:
      return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    case Nonlinearity::tanh:
      return std::tanh(x);
    case Nonlinearity::gelu:
      return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
  }
  return 0.0;
}

double act_grad(Nonlinearity f, double x, double y) {
  switch (f) {
    case Nonlinearity::sigmoid:
      return y * (1.0 - y);
    case Nonlinearity::tanh:
      return 1.0 - y * y;
    case Nonlinearity::gelu: {
      const double u = kGeluC * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    }
  }
  return 0.0;
}

const char* act_name(Nonlinearity f) {
  switch (f) {
    case Nonlinearity::sigmoid:
      return "sigmoid";
    case Nonlinearity::tanh:
      return "tanh";
    case Nonlinearity::gelu:
      return "gelu";
  }
  return "nonlinearity";
}

}  // namespace

Var apply(Var x, Nonlinearity f) {
  Tensor out(x.shape(), x.value().data);
  for (auto& v : out.data) v = act(f, v);
  return x.tape->record(act_name(f), std::move(out), {x.id}, [xi = x.id, f](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(xi).data;
    const auto& yv = tp.value(self).data;
    auto& gx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * act_grad(f, xv[i], yv[i]);
  });
}

// ---- indexing / layout -----------------------------------------------------

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  const std::size_t rows = table.rows(), n = table.cols();
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor out = make(ids.size(), n);
  const auto& tv = table.value().data;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * n), n, out.data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return table.tape->record("gather_rows", std::move(out), {table.id},
                            [ti = table.id, idx = std::vector<std::size_t>(ids.begin(), ids.end()), n](Tape& tp, std::uint32_t self) {
                              const auto& g = tp.grad(self);
                              auto& gt = tp.grad_buffer(ti);
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                for (std::size_t j = 0; j < n; ++j) gt[idx[i] * n + j] += g[i * n + j];
                            });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Tape& t = *parts[0].tape;
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  for (auto p : parts) {
    same_tape(parts[0], p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: width mismatch");
    offsets.push_back(total);
    total += p.rows();
    ids.push_back(p.id);
  }
  Tensor out = make(total, n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value().data;
    std::copy(pv.begin(), pv.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offsets[k] * n));
  }
  auto input_ids = ids;
  return t.record("concat_rows", std::move(out), std::move(input_ids),
                  [ids = std::move(ids), offsets = std::move(offsets), n](Tape& tp, std::uint32_t self) {
                    const auto& g = tp.grad(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!wants(tp, ids[k])) continue;
                      auto& gp = tp.grad_buffer(ids[k]);
                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] * n + i];
                    }
                  });
}

Var concat_cols(Var a, Var b) {
  Tape& t = same_tape(a, b, "concat_cols");
  const std::size_t m = a.rows(), na = a.cols(), nb = b.cols();
  if (b.rows() != m) throw ShapeError("concat_cols: row count mismatch");
  const std::size_t n = na + nb;
  Tensor out = make(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < na; ++j) out.data[i * n + j] = a.value().data[i * na + j];
    for (std::size_t j = 0; j < nb; ++j) out.data[i * n + na + j] = b.value().data[i * nb + j];
  }
  return t.record("concat_cols", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, m, na, nb](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    const std::size_t n2 = na + nb;
    if (wants(tp, ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * n2 + j];
    }
    if (wants(tp, bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * n2 + na + j];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > m) throw ShapeError("slice_rows: bad range");
  Tensor out = make(end - begin, n);
  const auto& av = a.value().data;
  std::copy(av.begin() + static_cast<std::ptrdiff_t>(begin * n), av.begin() + static_cast<std::ptrdiff_t>(end * n), out.data.begin());
  return a.tape->record("slice_rows", std::move(out), {a.id}, [ai = a.id, begin, n](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n) throw ShapeError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out = make(m, w);
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.data[i * w + j] = av[i * n + begin + j];
  return a.tape->record("slice_cols", std::move(out), {a.id}, [ai = a.id, begin, m, n, w](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += g[i * w + j];
  });
}

// ---- reductions ------------------------------------------------------------

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape->record("sum", Tensor({1}, {s}), {a.id}, [ai = a.id](Tape& tp, std::uint32_t self) {
    const double g = tp.grad(self)[0];
    for (auto& v : tp.grad_buffer(ai)) v += g;
  });
}

Var mean(Var a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape->record("mean", Tensor({1}, {s * inv}), {a.id}, [ai = a.id, inv](Tape& tp, std::uint32_t self) {
    const double g = tp.grad(self)[0] * inv;
    for (auto& v : tp.grad_buffer(ai)) v += g;
  });
}

Var mean_rows(Var a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make(1, n);
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j] += av[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (auto& v : out.data) v *= inv;
  return a.tape->record("mean_rows", std::move(out), {a.id}, [ai = a.id, m, n, inv](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
  });
}

Var sum_cols(Var a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make(m, 1);
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i] += av[i * n + j];
  return a.tape->record("sum_cols", std::move(out), {a.id}, [ai = a.id, m, n](Tape& tp, std::uint32_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
  });
}

// ---- recurrence ------------------------------------------------------------

Var linear_recurrence(Var u, Var decay) {
  Tape& t = same_tape(u, decay, "linear_recurrence");
  const std::size_t m = u.rows(), n = u.cols();
  require_row(decay, n, "linear_recurrence decay");
  const auto& uv = u.value().data;
  const auto& av = decay.value().data;
  Tensor out = make(m, n);
  for (std::size_t j = 0; j < n; ++j) out.data[j] = uv[j];
  for (std::size_t i = 1; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = av[j] * out.data[(i - 1) * n + j] + uv[i * n + j];
  return t.record("linear_recurrence", std::move(out), {u.id, decay.id}, [ui = u.id, di = decay.id, m, n](Tape& tp, std::uint32_t self) {
    // Adjoint state runs right-to-left: λ_i = g_i + a ⊙ λ_{i+1}.
    const auto& g = tp.grad(self);
    const auto& h = tp.value(self).data;
    const auto& a = tp.value(di).data;
    std::vector<double> lambda(n, 0.0);
    std::vector<double>* gu = wants(tp, ui) ? &tp.grad_buffer(ui) : nullptr;
    std::vector<double>* ga = wants(tp, di) ? &tp.grad_buffer(di) : nullptr;
    for (std::size_t i = m; i-- > 0;) {
      for (std::size_t j = 0; j < n; ++j) {
        lambda[j] = g[i * n + j] + a[j] * lambda[j];
        if (gu) (*gu)[i * n + j] += lambda[j];
        if (ga && i > 0) (*ga)[j] += lambda[j] * h[(i - 1) * n + j];
      }
    }
  });
}

// ---- normalisation and losses ------------------------------------------------

Var l2_normalize_rows(Var a) {
  const std::size_t m = a.rows(), n = a.cols();
  const auto& av = a.value().data;
  Tensor out = make(m, n);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = av[i * n + j] / norms[i];
  }
  return a.tape->record("l2_normalize_rows", std::move(out), {a.id},
                        [ai = a.id, m, n, norms = std::move(norms)](Tape& tp, std::uint32_t self) {
                          const auto& g = tp.grad(self);
                          const auto& y = tp.value(self).data;
                          auto& ga = tp.grad_buffer(ai);
                          for (std::size_t i = 0; i < m; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (g[i * n + j] - dot * y[i * n + j]) / norms[i];
                          }
                        });
}

Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) throw ShapeError("cross_entropy_rows: one target per row required");
  const auto& lv = logits.value().data;
  std::vector<double> probs(m * n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw ShapeError("cross_entropy_rows: target out of range");
    const double* row = lv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[i]];
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
  }
  return logits.tape->record(
      "cross_entropy_rows", Tensor({1}, {total}), {logits.id},
      [li = logits.id, m, n, probs = std::move(probs), tg = std::vector<std::size_t>(targets.begin(), targets.end())](
          Tape& tp, std::uint32_t self) {
        const double g = tp.grad(self)[0];
        auto& gl = tp.grad_buffer(li);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += g * probs[i * n + j];
          gl[i * n + tg[i]] -= g;
        }
      });
}

Var bce_with_logits(Var logits, std::span<const double> labels) {
  const auto& lv = logits.value().data;
  if (labels.size() != lv.size()) throw ShapeError("bce_with_logits: label count mismatch");
  const double inv = 1.0 / static_cast<double>(lv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double l = lv[i];
    total += std::max(l, 0.0) - l * labels[i] + std::log1p(std::exp(-std::abs(l)));
  }
  return logits.tape->record("bce_with_logits", Tensor({1}, {total * inv}), {logits.id},
                             [li = logits.id, inv, y = std::vector<double>(labels.begin(), labels.end())](Tape& tp, std::uint32_t self) {
                               const double g = tp.grad(self)[0] * inv;
                               const auto& l = tp.value(li).data;
                               auto& gl = tp.grad_buffer(li);
                               for (std::size_t i = 0; i < l.size(); ++i) {
                                 const double p = act(Nonlinearity::sigmoid, l[i]);
                                 gl[i] += g * (p - y[i]);
                               }
                             });
}

AttentionResult scaled_dot_attention(Var q, Var k, Var v) {
  if (q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows()) {
    throw ShapeError("scaled_dot_attention: width mismatch " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Var scores = scale(matmul_nt(q, k), inv_sqrt);
  Var weights = softmax(scores, 1);
  return {matmul(weights, v), weights};
}

}  // namespace dast::nc
