#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every differentiable op in execution order. Ops are free
// functions over Var handles; each produces its forward value eagerly and
// registers the vector-Jacobian product used by Tape::backward. Parameters
// enter the tape as leaves and receive accumulated gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "calm/tensor.hpp"

namespace calm {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  int layer_group = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor v, int group)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), layer_group(group) {}
};

void zero_grads(std::span<Parameter> params);

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the op's output and the gradient flowing into it, and must
  /// accumulate contributions into its inputs through Tape::grad.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that reads `p.value` in place; backward accumulates into `p.grad`.
  Var parameter(Parameter& p);
  /// Appends an op node. It requires a gradient iff any input does.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient accumulator of `v`, zero-initialized on first access.
  Tensor& grad(Var v);

  /// Propagates d(loss)/d(node) to every reachable node and accumulates into
  /// the Parameters reached. Throws ContractError unless `loss` is a single
  /// value recorded on this tape.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() noexcept { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Parameter* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Op suite. Every op throws DimensionError naming itself and the offending
// shapes when operands do not conform.

/// a: (..., m, k). b: (k, n) shared across the leading axes of `a`, or
/// (..., k, n) with the same leading axes (batched product).
Var matmul(Var a, Var b);
/// Elementwise sum; `b` may omit leading axes of `a` and is then broadcast.
Var add(Var a, Var b);
/// Elementwise product of equal shapes.
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// Softmax over the last axis.
Var softmax(Var a);
/// Normalizes over the last axis, then applies per-feature gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Exact (erf) GELU.
Var gelu(Var a);
Var tanh(Var a);
/// Rows of `table` (V, d) selected by ids; result shape is `index_shape` + (d).
Var embedding(Var table, std::span<const std::int32_t> ids, const Shape& index_shape);
/// Mean of -log softmax(logits)[target] over rows whose target differs from
/// `ignore_index`. logits: (n, V). Throws EmptyLossError if every row is ignored.
Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t ignore_index = -1);
Var reshape(Var a, Shape shape);
/// Swaps two axes.
Var transpose(Var a, std::size_t axis1, std::size_t axis2);
Var sum(Var a);
/// Selects rows of a (n, d) matrix.
Var gather_rows(Var a, std::span<const std::size_t> rows);

}  // namespace calm
