#include "bilalora/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bilalora/errors.hpp"

namespace bilalora {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kMatVec: return "matvec";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kScale: return "scale";
    case OpKind::kShift: return "shift";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kL2Norm: return "l2norm";
    case OpKind::kRowL2Norm: return "row_l2norm";
    case OpKind::kDot: return "dot";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kSelectRows: return "select_rows";
    case OpKind::kClamp: return "clamp";
  }
  return "unknown";
}

bool Gradients::has(NodeRef node) const {
  return node.index < adjoints_.size() && adjoints_[node.index].has_value();
}

const Tensor& Gradients::of(NodeRef node) const {
  if (!has(node)) {
    throw RangeError("no gradient recorded for node " + std::to_string(node.index));
  }
  return *adjoints_[node.index];
}

namespace {

std::size_t arity(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return 0;
    case OpKind::kScale:
    case OpKind::kShift:
    case OpKind::kRelu:
    case OpKind::kSigmoid:
    case OpKind::kL2Norm:
    case OpKind::kRowL2Norm:
    case OpKind::kSum:
    case OpKind::kMean:
    case OpKind::kSelectRows:
    case OpKind::kClamp: return 1;
    default: return 2;
  }
}

[[noreturn]] void shape_fail(OpKind op, const Tensor& a, const Tensor* b = nullptr) {
  std::string msg = std::string(op_name(op)) + ": incompatible shape " + shape_to_string(a.shape());
  if (b) msg += " and " + shape_to_string(b->shape());
  throw ShapeError(msg);
}

void require_matrix(OpKind op, const Tensor& t) {
  if (t.rank() != 2) shape_fail(op, t);
}

// Output shape of an elementwise binary op where a size-1 operand broadcasts.
Shape broadcast_shape(OpKind op, const Tensor& a, const Tensor& b, bool allow_left_scalar) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.is_scalar()) return a.shape();
  if (allow_left_scalar && a.is_scalar()) return b.shape();
  shape_fail(op, a, &b);
}

inline double bval(const Tensor& t, std::size_t i) { return t.is_scalar() ? t[0] : t[i]; }

// Reduces a full-size adjoint back onto an operand that may have broadcast.
Tensor reduce_to(Tensor full, const Tensor& operand) {
  if (full.shape() == operand.shape()) return full;
  double s = 0.0;
  for (double v : full.values()) s += v;
  return Tensor(operand.shape(), {s});
}

void add_into(std::optional<Tensor>& slot, Tensor contribution) {
  if (!slot) {
    slot = std::move(contribution);
  } else {
    *slot += contribution;
  }
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tape::Node& Tape::node(NodeRef ref) const {
  if (ref.index >= nodes_.size()) {
    throw RangeError("node " + std::to_string(ref.index) + " is not on this tape");
  }
  return nodes_[ref.index];
}

NodeRef Tape::leaf(Tensor value, bool trainable) {
  if (!value.all_finite()) throw NumericError("leaf value contains non-finite entries");
  nodes_.push_back(Node{OpKind::kLeaf, {}, {}, std::move(value), trainable});
  return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(NodeRef node_ref) const { return node(node_ref).value; }

bool Tape::requires_grad(NodeRef node_ref) const { return node(node_ref).requires_grad; }

NodeRef Tape::select_rows(NodeRef x, std::span<const std::size_t> rows) {
  std::vector<double> payload(rows.begin(), rows.end());
  return record_op(OpKind::kSelectRows, std::array{x}, std::move(payload));
}

NodeRef Tape::record_op(OpKind op, std::span<const NodeRef> inputs, std::vector<double> payload) {
  if (op == OpKind::kLeaf) throw ContractError("use Tape::leaf to create leaves");
  if (inputs.size() != arity(op)) {
    throw ContractError(std::string(op_name(op)) + " expects " + std::to_string(arity(op)) +
                        " inputs, got " + std::to_string(inputs.size()));
  }
  bool needs_grad = false;
  for (auto in : inputs) needs_grad = needs_grad || node(in).requires_grad;
  Tensor out = forward(op, inputs, payload);
  if (!out.all_finite()) {
    throw NumericError(std::string(op_name(op)) + " produced a non-finite value");
  }
  nodes_.push_back(Node{op, {inputs.begin(), inputs.end()}, std::move(payload), std::move(out),
                        needs_grad});
  return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Tape::forward(OpKind op, std::span<const NodeRef> inputs,
                     const std::vector<double>& payload) const {
  const Tensor& a = node(inputs[0]).value;
  const Tensor* bp = inputs.size() > 1 ? &node(inputs[1]).value : nullptr;

  switch (op) {
    case OpKind::kMatMul: {
      const Tensor& b = *bp;
      require_matrix(op, a);
      require_matrix(op, b);
      if (a.dim(1) != b.dim(0)) shape_fail(op, a, &b);
      Tensor out({a.dim(0), b.dim(1)});
      gemm_nn(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
      return out;
    }
    case OpKind::kMatMulNT: {
      const Tensor& b = *bp;
      require_matrix(op, a);
      require_matrix(op, b);
      if (a.dim(1) != b.dim(1)) shape_fail(op, a, &b);
      Tensor out({a.dim(0), b.dim(0)});
      gemm_nt(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(0));
      return out;
    }
    case OpKind::kMatVec: {
      const Tensor& v = *bp;
      require_matrix(op, a);
      if (v.rank() != 1 || v.size() != a.dim(1)) shape_fail(op, a, &v);
      Tensor out({a.dim(0)});
      gemm_nn(a.data(), v.data(), out.data(), a.dim(0), a.dim(1), 1);
      return out;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kDiv: {
      const Tensor& b = *bp;
      Tensor out(broadcast_shape(op, a, b, op != OpKind::kDiv));
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = bval(a, i), y = bval(b, i);
        switch (op) {
          case OpKind::kAdd: out[i] = x + y; break;
          case OpKind::kSub: out[i] = x - y; break;
          case OpKind::kMul: out[i] = x * y; break;
          default:
            if (y == 0.0) throw NumericError("div: division by zero");
            out[i] = x / y;
        }
      }
      return out;
    }
    case OpKind::kScale:
    case OpKind::kShift: {
      if (payload.size() != 1) throw ContractError(std::string(op_name(op)) + " needs one constant");
      Tensor out = a;
      for (auto& v : out.data()) v = op == OpKind::kScale ? v * payload[0] : v + payload[0];
      return out;
    }
    case OpKind::kRelu: {
      Tensor out = a;
      for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case OpKind::kSigmoid: {
      Tensor out = a;
      for (auto& v : out.data()) v = sigmoid_value(v);
      return out;
    }
    case OpKind::kL2Norm: return Tensor::scalar(std::sqrt(squared_norm(a)));
    case OpKind::kRowL2Norm: {
      require_matrix(op, a);
      Tensor out({a.dim(0)});
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.dim(1); ++c) s += a.at(r, c) * a.at(r, c);
        out[r] = std::sqrt(s);
      }
      return out;
    }
    case OpKind::kDot: {
      if (a.size() != bp->size()) shape_fail(op, a, bp);
      return Tensor::scalar(bilalora::dot(a, *bp));
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      double s = 0.0;
      for (double v : a.values()) s += v;
      return Tensor::scalar(op == OpKind::kSum ? s : s / static_cast<double>(a.size()));
    }
    case OpKind::kAddBias: {
      const Tensor& bias = *bp;
      require_matrix(op, a);
      if (bias.rank() != 1 || bias.size() != a.dim(1)) shape_fail(op, a, &bias);
      Tensor out = a;
      for (std::size_t r = 0; r < a.dim(0); ++r)
        for (std::size_t c = 0; c < a.dim(1); ++c) out.at(r, c) += bias[c];
      return out;
    }
    case OpKind::kSelectRows: {
      require_matrix(op, a);
      if (payload.empty()) throw ContractError("select_rows needs at least one row");
      const std::size_t k = a.dim(1);
      Tensor out({payload.size(), k});
      for (std::size_t i = 0; i < payload.size(); ++i) {
        const auto r = static_cast<std::size_t>(payload[i]);
        if (r >= a.dim(0)) throw RangeError("select_rows: row index out of range");
        for (std::size_t c = 0; c < k; ++c) out.at(i, c) = a.at(r, c);
      }
      return out;
    }
    case OpKind::kClamp: {
      if (payload.size() != 2 || !(payload[0] <= payload[1])) {
        throw ContractError("clamp needs bounds lo <= hi");
      }
      Tensor out = a;
      for (auto& v : out.data()) v = std::min(std::max(v, payload[0]), payload[1]);
      return out;
    }
    case OpKind::kLeaf: break;
  }
  throw ContractError("unhandled op");
}

void Tape::accumulate_input_adjoints(const Node& n, const Tensor& g,
                                     std::vector<std::optional<Tensor>>& adj) const {
  auto wants = [&](std::size_t slot) { return nodes_[n.inputs[slot].index].requires_grad; };
  auto slot_of = [&](std::size_t slot) -> std::optional<Tensor>& {
    return adj[n.inputs[slot].index];
  };
  const Tensor& a = nodes_[n.inputs[0].index].value;
  const Tensor* bp = n.inputs.size() > 1 ? &nodes_[n.inputs[1].index].value : nullptr;

  switch (n.op) {
    case OpKind::kMatMul: {
      const Tensor& b = *bp;
      const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
      if (wants(0)) {
        Tensor da(a.shape());
        gemm_nt(g.data(), b.data(), da.data(), m, p, k);
        add_into(slot_of(0), std::move(da));
      }
      if (wants(1)) {
        Tensor db(b.shape());
        gemm_tn(a.data(), g.data(), db.data(), k, m, p);
        add_into(slot_of(1), std::move(db));
      }
      return;
    }
    case OpKind::kMatMulNT: {
      // out = a b^T with a [m x k], b [p x k]
      const Tensor& b = *bp;
      const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(0);
      if (wants(0)) {
        Tensor da(a.shape());
        gemm_nn(g.data(), b.data(), da.data(), m, p, k);
        add_into(slot_of(0), std::move(da));
      }
      if (wants(1)) {
        Tensor db(b.shape());
        gemm_tn(g.data(), a.data(), db.data(), p, m, k);
        add_into(slot_of(1), std::move(db));
      }
      return;
    }
    case OpKind::kMatVec: {
      const Tensor& v = *bp;
      const std::size_t m = a.dim(0), k = a.dim(1);
      if (wants(0)) {
        Tensor da(a.shape());
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < k; ++c) da.at(r, c) = g[r] * v[c];
        add_into(slot_of(0), std::move(da));
      }
      if (wants(1)) {
        Tensor dv(v.shape());
        gemm_tn(a.data(), g.data(), dv.data(), k, m, 1);
        add_into(slot_of(1), std::move(dv));
      }
      return;
    }
    case OpKind::kAdd:
    case OpKind::kSub: {
      if (wants(0)) add_into(slot_of(0), reduce_to(g, a));
      if (wants(1)) {
        Tensor gb = g;
        if (n.op == OpKind::kSub) gb *= -1.0;
        add_into(slot_of(1), reduce_to(std::move(gb), *bp));
      }
      return;
    }
    case OpKind::kMul: {
      const Tensor& b = *bp;
      if (wants(0)) {
        Tensor ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bval(b, i);
        add_into(slot_of(0), reduce_to(std::move(ga), a));
      }
      if (wants(1)) {
        Tensor gb = g;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= bval(a, i);
        add_into(slot_of(1), reduce_to(std::move(gb), b));
      }
      return;
    }
    case OpKind::kDiv: {
      const Tensor& b = *bp;
      if (wants(0)) {
        Tensor ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= bval(b, i);
        add_into(slot_of(0), std::move(ga));
      }
      if (wants(1)) {
        Tensor gb = g;
        for (std::size_t i = 0; i < gb.size(); ++i) {
          const double y = bval(b, i);
          gb[i] *= -a[i] / (y * y);
        }
        add_into(slot_of(1), reduce_to(std::move(gb), b));
      }
      return;
    }
    case OpKind::kScale: {
      Tensor ga = g;
      ga *= n.payload[0];
      add_into(slot_of(0), std::move(ga));
      return;
    }
    case OpKind::kShift: add_into(slot_of(0), g); return;
    case OpKind::kRelu: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (!(a[i] > 0.0)) ga[i] = 0.0;
      add_into(slot_of(0), std::move(ga));
      return;
    }
    case OpKind::kSigmoid: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double s = n.value[i];
        ga[i] *= s * (1.0 - s);
      }
      add_into(slot_of(0), std::move(ga));
      return;
    }
    case OpKind::kL2Norm: {
      // The norm is not differentiable at the origin; use the zero subgradient.
      const double norm = n.value[0];
      Tensor ga(a.shape());
      if (norm > 0.0)
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] = g[0] * a[i] / norm;
      add_into(slot_of(0), std::move(ga));
      return;
    }
    case OpKind::kRowL2Norm: {
      Tensor ga(a.shape());
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        const double norm = n.value[r];
        if (norm <= 0.0) continue;
        for (std::size_t c = 0; c < a.dim(1); ++c) ga.at(r, c) = g[r] * a.at(r, c) / norm;
      }
      add_into(slot_of(0), std::move(ga));
      return;
    }
    case OpKind::kDot: {
      const Tensor& b = *bp;
      if (wants(0)) {
        Tensor ga = b.reshaped(a.shape());
        ga *= g[0];
        add_into(slot_of(0), std::move(ga));
      }
      if (wants(1)) {
        Tensor gb = a.reshaped(b.shape());
        gb *= g[0];
        add_into(slot_of(1), std::move(gb));
      }
      return;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const double v = n.op == OpKind::kSum ? g[0] : g[0] / static_cast<double>(a.size());
      add_into(slot_of(0), Tensor::filled(a.shape(), v));
      return;
    }
    case OpKind::kAddBias: {
      if (wants(0)) add_into(slot_of(0), g);
      if (wants(1)) {
        Tensor gb(bp->shape());
        for (std::size_t r = 0; r < g.dim(0); ++r)
          for (std::size_t c = 0; c < g.dim(1); ++c) gb[c] += g.at(r, c);
        add_into(slot_of(1), std::move(gb));
      }
      return;
    }
    case OpKind::kSelectRows: {
      Tensor ga(a.shape());
      const std::size_t k = a.dim(1);
      for (std::size_t i = 0; i < n.payload.size(); ++i) {
        const auto r = static_cast<std::size_t>(n.payload[i]);
        for (std::size_t c = 0; c < k; ++c) ga.at(r, c) += g.at(i, c);
      }
      add_into(slot_of(0), std::move(ga));
      return;
    }
    case OpKind::kClamp: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (a[i] < n.payload[0] || a[i] > n.payload[1]) ga[i] = 0.0;
      add_into(slot_of(0), std::move(ga));
      return;
    }
    case OpKind::kLeaf: return;
  }
}

Gradients Tape::backward(NodeRef output) const {
  const Node& out = node(output);
  if (!out.value.is_scalar()) {
    throw ShapeError("backward requires a scalar output, got " + shape_to_string(out.value.shape()));
  }
  Gradients grads;
  grads.adjoints_.resize(output.index + 1);
  auto& adj = grads.adjoints_;
  if (!out.requires_grad) return grads;
  adj[output.index] = Tensor(out.value.shape(), {1.0});
  for (std::size_t i = output.index + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!adj[i] || !n.requires_grad || n.op == OpKind::kLeaf) continue;
    accumulate_input_adjoints(n, *adj[i], adj);
  }
  return grads;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double step) {
  if (!(step > 0.0)) throw ContractError("finite difference step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = f(probe);
    probe[i] = x[i] - step;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite difference probe produced a non-finite value");
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace bilalora
