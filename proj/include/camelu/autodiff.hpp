#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "camelu/tensor.hpp"

namespace camelu {

enum class OpKind {
  leaf,
  matmul,
  add,
  add_bias,
  scale,
  mul,
  gelu,
  layer_norm,
  softmax,
  cross_entropy,
  concat_cols,
  concat_rows,
  gather_rows,
  slice_cols,
  sum,
  mean,
  attention,
};

std::string_view op_name(OpKind kind) noexcept;

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order so parents always
// precede children; backward walks the list in reverse.
class Tape {
 public:
  // out is this node's value and grad_out its gradient; parent_grads[i] is
  // null when parent i does not require a gradient, otherwise an accumulator.
  using BackwardFn = std::function<void(const Tape& tape, const Tensor& out, const Tensor& grad_out,
                                        std::span<Tensor* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(OpKind kind, Tensor value, std::vector<Var> parents, BackwardFn backward);

  const Tensor& value(Var v) const;
  const Tensor& value_at(std::size_t id) const { return nodes_.at(id).value; }
  // Gradient accumulated by the last backward(); zeros for nodes the output
  // does not depend on.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;
  OpKind kind(Var v) const;
  const std::vector<std::size_t>& parents(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  // Output must be scalar-valued (one element).
  void backward(Var output);

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
    Tensor grad;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Differentiable operations. A node records a backward closure only when at
// least one parent requires a gradient.
namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
// rows of a [M x N] + bias [N]
Var add_bias(Var a, Var bias);
Var scale(Var a, double factor);
Var mul(Var a, Var b);
Var gelu(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax(Var x, std::size_t axis);
// Scalar -log softmax(logits)[label] of a single row.
Var cross_entropy(Var logits, std::size_t label);
// Mean cross-entropy over the rows of [Q x N] logits.
Var cross_entropy_mean(Var logits, std::span<const std::size_t> labels);
Var concat_cols(Var a, Var b);
Var concat_rows(Var a, Var b);
// out[i] = table[indices[i]]; table is [R x C] (rank 1 is one row).
Var gather_rows(Var table, std::span<const std::size_t> indices);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var sum(Var a);
Var mean(Var a);
Var block_attention(Var qkv, std::size_t n_seq, std::size_t seq_len, std::size_t heads);

}  // namespace ad

}  // namespace camelu
