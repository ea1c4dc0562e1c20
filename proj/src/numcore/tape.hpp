#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "numcore/tensor.hpp"

namespace dast::nc {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid until the tape
// is reset or destroyed.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is already a topological order of the computation. One tape per thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound to an external parameter. If param.requires_grad, backward()
  // accumulates into param.grad.
  Var param(Tensor& p);
  Var constant(Tensor value);

  // Runs the adjoint sweep from a scalar loss. A second call on the same
  // recording throws; call reset() first.
  void backward(Var loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  const std::vector<double>& grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const char* op_name(std::uint32_t id) const { return nodes_[id].op; }
  std::span<const std::uint32_t> inputs(std::uint32_t id) const { return nodes_[id].inputs; }

  // Adjoint buffer of an input, allocated on first touch.
  std::vector<double>& grad_buffer(std::uint32_t id);

  // Used by primitives: append a computed node. Checks finiteness.
  Var record(const char* op, Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward);

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    std::vector<double> grad;
    std::vector<std::uint32_t> inputs;
    bool requires_grad = false;
    Tensor* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Binds each parameter tensor to a single leaf per tape.
class Bindings {
 public:
  explicit Bindings(Tape& tape) : tape_(tape) {}
  Var operator()(Tensor& p);
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  std::vector<std::pair<const Tensor*, Var>> bound_;
};

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b);     // a[m×k] · b[k×n]
Var matmul_nt(Var a, Var b);  // a[m×k] · b[n×k]ᵀ
Var transpose(Var a);

Var add(Var a, Var b);      // same shape
Var sub(Var a, Var b);      // same shape
Var add_row(Var a, Var r);  // a[m×n] + r[1×n] broadcast over rows
Var mul(Var a, Var b);      // elementwise, same shape
Var mul_row(Var a, Var r);  // a[m×n] ⊙ r[1×n] broadcast over rows
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

// Softmax along `axis` (0 or 1 for matrices, 0 for rank-1). With a mask,
// entries whose mask byte is 0 get exactly zero weight.
Var softmax(Var x, std::size_t axis);
Var masked_softmax_rows(Var x, std::span<const std::uint8_t> mask);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

enum class Nonlinearity { sigmoid, tanh, gelu };
Var apply(Var x, Nonlinearity f);

Var gather_rows(Var table, std::span<const std::size_t> ids);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);

Var sum(Var a);        // scalar [1]
Var mean(Var a);       // scalar [1]
Var mean_rows(Var a);  // [1×n], average over rows
Var sum_cols(Var a);   // [m×1], per-row sum

// h_0 = 0, h_i = decay ⊙ h_{i-1} + u_i for rows i of u; decay is [1×n].
Var linear_recurrence(Var u, Var decay);

Var l2_normalize_rows(Var a);

// Σ_i −log softmax(logits_i)[target_i]; returns a scalar.
Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets);

// Mean over all entries of the logistic loss, in max(l,0) − l·y + log1p(e^{−|l|}) form.
Var bce_with_logits(Var logits, std::span<const double> labels);

struct AttentionResult {
  Var output;
  Var weights;
};

// weights = softmax(Q Kᵀ / √C) row-wise; output = weights · V.
AttentionResult scaled_dot_attention(Var q, Var k, Var v);

}  // namespace dast::nc
