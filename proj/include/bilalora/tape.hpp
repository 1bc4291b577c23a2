#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "bilalora/tensor.hpp"

namespace bilalora {

// Index of a node on a Tape. Only meaningful for the tape that issued it.
struct NodeRef {
  std::uint32_t index = 0;
  friend bool operator==(NodeRef, NodeRef) = default;
  friend auto operator<=>(NodeRef, NodeRef) = default;
};

enum class OpKind {
  kLeaf,
  kMatMul,       // [m x k] * [k x n]
  kMatMulNT,     // [m x k] * [n x k]^T
  kMatVec,       // [m x k] * [k] -> [m]
  kAdd,          // elementwise; either side may be a size-1 scalar
  kSub,
  kMul,
  kDiv,          // elementwise; divisor may be a size-1 scalar
  kScale,        // payload[0] * x
  kShift,        // x + payload[0]
  kRelu,
  kSigmoid,
  kL2Norm,       // ||x||_2 over all entries -> scalar
  kRowL2Norm,    // [m x k] -> [m]
  kDot,          // sum_i a_i b_i -> scalar
  kSum,
  kMean,
  kAddBias,      // [m x n] + [n] broadcast over rows
  kSelectRows,   // rows listed in payload, in order
  kClamp,        // clamp to [payload[0], payload[1]]; zero gradient outside
};

std::string_view op_name(OpKind op);

class Tape;

// Reverse-mode adjoints of one backward pass, keyed by node.
class Gradients {
 public:
  bool has(NodeRef node) const;
  const Tensor& of(NodeRef node) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> adjoints_;
};

// Append-only record of eagerly evaluated primitive operations. Inputs always
// refer to earlier nodes, so the recorded graph is acyclic by construction.
// A tape is rebuilt for every forward pass and is not thread-safe.
class Tape {
 public:
  NodeRef leaf(Tensor value, bool trainable = false);

  // Records one primitive. Shapes are validated and the forward value is
  // computed immediately; a non-finite result throws NumericError.
  NodeRef record_op(OpKind op, std::span<const NodeRef> inputs,
                    std::vector<double> payload = {});

  const Tensor& value(NodeRef node) const;
  bool requires_grad(NodeRef node) const;
  std::size_t size() const { return nodes_.size(); }

  // Exact first-order gradients of a scalar node. Every node between the
  // output and a trainable leaf receives an entry; non-trainable leaves and
  // nodes that do not depend on a trainable leaf do not.
  Gradients backward(NodeRef output) const;

  NodeRef matmul(NodeRef a, NodeRef b) { return record_op(OpKind::kMatMul, std::array{a, b}); }
  NodeRef matmul_nt(NodeRef a, NodeRef b) { return record_op(OpKind::kMatMulNT, std::array{a, b}); }
  NodeRef matvec(NodeRef a, NodeRef v) { return record_op(OpKind::kMatVec, std::array{a, v}); }
  NodeRef add(NodeRef a, NodeRef b) { return record_op(OpKind::kAdd, std::array{a, b}); }
  NodeRef sub(NodeRef a, NodeRef b) { return record_op(OpKind::kSub, std::array{a, b}); }
  NodeRef mul(NodeRef a, NodeRef b) { return record_op(OpKind::kMul, std::array{a, b}); }
  NodeRef div(NodeRef a, NodeRef b) { return record_op(OpKind::kDiv, std::array{a, b}); }
  NodeRef scale(NodeRef a, double factor) { return record_op(OpKind::kScale, std::array{a}, {factor}); }
  NodeRef shift(NodeRef a, double offset) { return record_op(OpKind::kShift, std::array{a}, {offset}); }
  NodeRef relu(NodeRef a) { return record_op(OpKind::kRelu, std::array{a}); }
  NodeRef sigmoid(NodeRef a) { return record_op(OpKind::kSigmoid, std::array{a}); }
  NodeRef l2norm(NodeRef a) { return record_op(OpKind::kL2Norm, std::array{a}); }
  NodeRef row_l2norm(NodeRef a) { return record_op(OpKind::kRowL2Norm, std::array{a}); }
  NodeRef dot(NodeRef a, NodeRef b) { return record_op(OpKind::kDot, std::array{a, b}); }
  NodeRef sum(NodeRef a) { return record_op(OpKind::kSum, std::array{a}); }
  NodeRef mean(NodeRef a) { return record_op(OpKind::kMean, std::array{a}); }
  NodeRef add_bias(NodeRef x, NodeRef bias) { return record_op(OpKind::kAddBias, std::array{x, bias}); }
  NodeRef select_rows(NodeRef x, std::span<const std::size_t> rows);
  NodeRef clamp(NodeRef a, double lo, double hi) { return record_op(OpKind::kClamp, std::array{a}, {lo, hi}); }

 private:
  struct Node {
    OpKind op;
    std::vector<NodeRef> inputs;
    std::vector<double> payload;
    Tensor value;
    bool requires_grad;
  };

  const Node& node(NodeRef ref) const;
  Tensor forward(OpKind op, std::span<const NodeRef> inputs,
                 const std::vector<double>& payload) const;
  void accumulate_input_adjoints(const Node& n, const Tensor& adjoint,
                                 std::vector<std::optional<Tensor>>& adj) const;

  std::vector<Node> nodes_;
};

// Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / 2h for every
// coordinate. Throws NumericError if f is non-finite at any probe.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                            const Tensor& x, double step);

}  // namespace bilalora
