#include "hardproj/tape.hpp"

#include <fmt/format.h>

#include <utility>

#include "hardproj/errors.hpp"

namespace hardproj::ad {

namespace {

Tape* common_tape(const Value& a, const Value& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw PreconditionError("operands belong to different tapes");
  }
  return a.tape();
}

Tape* owner(const Value& a) {
  if (a.tape() == nullptr) throw PreconditionError("value is not attached to a tape");
  return a.tape();
}

void require(bool ok, const char* op, const Value& a, const Value& b) {
  if (!ok) {
    throw DimensionError(fmt::format("{}: incompatible shapes {}x{} and {}x{}", op, a.rows(),
                                     a.cols(), b.rows(), b.cols()));
  }
}

}  // namespace

const Matrix& Gradients::operator[](const Value& parameter) const {
  const int id = parameter.id();
  if (id < 0 || static_cast<std::size_t>(id) >= node_to_slot_.size() || node_to_slot_[id] < 0) {
    throw PreconditionError("value is not a parameter of the differentiated tape");
  }
  return grads_[static_cast<std::size_t>(node_to_slot_[id])];
}

Value Tape::push(Node node) {
  const Index rows = node.value.rows();
  const Index cols = node.value.cols();
  nodes_.push_back(std::move(node));
  return Value(this, static_cast<int>(nodes_.size() - 1), rows, cols);
}

const Tape::Node& Tape::node(const Value& v) const {
  check_owner(v);
  return nodes_[static_cast<std::size_t>(v.id())];
}

void Tape::check_owner(const Value& v) const {
  if (v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
    throw PreconditionError("value does not belong to this tape");
  }
}

Value Tape::constant(Matrix value) {
  Node n{Op::Constant, {}, std::move(value)};
  return push(std::move(n));
}

Value Tape::parameter(Matrix value) {
  Node n{Op::Parameter, {}, std::move(value)};
  n.requires_grad = true;
  Value v = push(std::move(n));
  parameters_.push_back(v.id());
  return v;
}

const Matrix& Tape::value(const Value& v) const { return node(v).value; }

Vector Tape::vector(const Value& v) const {
  const Matrix& m = node(v).value;
  if (m.cols() != 1) throw DimensionError("value is not a vector");
  return m.col(0);
}

double Tape::scalar(const Value& v) const {
  const Matrix& m = node(v).value;
  if (m.size() != 1) throw DimensionError("value is not a scalar");
  return m(0, 0);
}

void Tape::accumulate(std::vector<Matrix>& adjoints, int id, const Matrix& contribution) const {
  if (!nodes_[static_cast<std::size_t>(id)].requires_grad) return;
  Matrix& slot = adjoints[static_cast<std::size_t>(id)];
  if (slot.size() == 0) {
    slot = contribution;
  } else {
    slot += contribution;
  }
}

Gradients Tape::backward(const Value& output) {
  check_owner(output);
  if (!output.is_scalar()) {
    throw PreconditionError(fmt::format("backward needs a scalar output, got {}x{}",
                                        output.rows(), output.cols()));
  }
  std::vector<Matrix> adj(nodes_.size());
  backward_visits_ = 0;
  if (nodes_[static_cast<std::size_t>(output.id())].requires_grad) {
    adj[static_cast<std::size_t>(output.id())] = Matrix::Ones(1, 1);
  }

  for (int id = output.id(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Matrix& gbar = adj[static_cast<std::size_t>(id)];
    if (!n.requires_grad || gbar.size() == 0) continue;
    ++backward_visits_;
    const auto in = [&](std::size_t i) -> const Node& {
      return nodes_[static_cast<std::size_t>(n.inputs[i])];
    };
    const auto wants = [&](std::size_t i) { return in(i).requires_grad; };

    switch (n.op) {
      case Op::Constant:
      case Op::Parameter:
        break;
      case Op::Add:
        accumulate(adj, n.inputs[0], gbar);
        accumulate(adj, n.inputs[1], gbar);
        break;
      case Op::Subtract:
        accumulate(adj, n.inputs[0], gbar);
        if (wants(1)) accumulate(adj, n.inputs[1], -gbar);
        break;
      case Op::Scale:
        accumulate(adj, n.inputs[0], n.scalar * gbar);
        break;
      case Op::MatMul:
        if (wants(0)) accumulate(adj, n.inputs[0], gbar * in(1).value.transpose());
        if (wants(1)) accumulate(adj, n.inputs[1], in(0).value.transpose() * gbar);
        break;
      case Op::MatVec:
        if (wants(0)) accumulate(adj, n.inputs[0], gbar * in(1).value.transpose());
        if (wants(1)) accumulate(adj, n.inputs[1], in(0).value.transpose() * gbar);
        break;
      case Op::TransposeMatVec:
        if (wants(0)) accumulate(adj, n.inputs[0], in(1).value * gbar.transpose());
        if (wants(1)) accumulate(adj, n.inputs[1], in(0).value * gbar);
        break;
      case Op::Transpose:
        accumulate(adj, n.inputs[0], gbar.transpose());
        break;
      case Op::Relu:
        // Subgradient 0 at the kink.
        accumulate(adj, n.inputs[0], (in(0).value.array() > 0.0).select(gbar, 0.0));
        break;
      case Op::Square:
        accumulate(adj, n.inputs[0], 2.0 * in(0).value.cwiseProduct(gbar));
        break;
      case Op::Sum:
        accumulate(adj, n.inputs[0],
                   Matrix::Constant(in(0).value.rows(), in(0).value.cols(), gbar(0, 0)));
        break;
      case Op::Concat: {
        Index row = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const Index r = in(i).value.rows();
          if (wants(i)) accumulate(adj, n.inputs[i], gbar.middleRows(row, r));
          row += r;
        }
        break;
      }
      case Op::Slice: {
        if (!wants(0)) break;
        Matrix& slot = adj[static_cast<std::size_t>(n.inputs[0])];
        if (slot.size() == 0) slot = Matrix::Zero(in(0).value.rows(), in(0).value.cols());
        slot.middleRows(n.offset, gbar.rows()) += gbar;
        break;
      }
      case Op::SpdSolve: {
        const Matrix bbar = n.factor->solve(gbar);
        if (wants(0)) {
          const Matrix outer = bbar * n.value.transpose();
          accumulate(adj, n.inputs[0], -0.5 * (outer + outer.transpose()));
        }
        if (wants(1)) accumulate(adj, n.inputs[1], bbar);
        break;
      }
      case Op::Scatter: {
        if (!wants(0)) break;
        Matrix& slot = adj[static_cast<std::size_t>(n.inputs[0])];
        if (slot.size() == 0) slot = Matrix::Zero(in(0).value.rows(), 1);
        for (const auto& t : n.pattern->terms) {
          slot(t.source, 0) += t.coef * gbar(t.row, t.col);
        }
        break;
      }
    }
    // Intermediate adjoints are no longer needed once propagated.
    if (n.op != Op::Parameter) gbar.resize(0, 0);
  }

  Gradients out;
  out.node_to_slot_.assign(nodes_.size(), -1);
  out.grads_.reserve(parameters_.size());
  for (std::size_t slot = 0; slot < parameters_.size(); ++slot) {
    const int id = parameters_[slot];
    out.node_to_slot_[static_cast<std::size_t>(id)] = static_cast<int>(slot);
    Matrix& g = adj[static_cast<std::size_t>(id)];
    const Matrix& v = nodes_[static_cast<std::size_t>(id)].value;
    out.grads_.push_back(g.size() == 0 ? Matrix::Zero(v.rows(), v.cols()) : std::move(g));
  }
  return out;
}

Value add(const Value& a, const Value& b) {
  Tape* t = common_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
  const auto& na = t->node(a);
  const auto& nb = t->node(b);
  Tape::Node n{Op::Add, {a.id(), b.id()}, na.value + nb.value};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return t->push(std::move(n));
}

Value subtract(const Value& a, const Value& b) {
  Tape* t = common_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "subtract", a, b);
  const auto& na = t->node(a);
  const auto& nb = t->node(b);
  Tape::Node n{Op::Subtract, {a.id(), b.id()}, na.value - nb.value};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return t->push(std::move(n));
}

Value scale(const Value& a, double factor) {
  Tape* t = owner(a);
  const auto& na = t->node(a);
  Tape::Node n{Op::Scale, {a.id()}, factor * na.value};
  n.scalar = factor;
  n.requires_grad = na.requires_grad;
  return t->push(std::move(n));
}

Value matmul(const Value& a, const Value& b) {
  Tape* t = common_tape(a, b);
  require(a.cols() == b.rows(), "matmul", a, b);
  const auto& na = t->node(a);
  const auto& nb = t->node(b);
  Tape::Node n{Op::MatMul, {a.id(), b.id()}, na.value * nb.value};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return t->push(std::move(n));
}

Value matvec(const Value& A, const Value& x) {
  Tape* t = common_tape(A, x);
  require(x.is_vector() && A.cols() == x.rows(), "matvec", A, x);
  const auto& nA = t->node(A);
  const auto& nx = t->node(x);
  Tape::Node n{Op::MatVec, {A.id(), x.id()}, nA.value * nx.value};
  n.requires_grad = nA.requires_grad || nx.requires_grad;
  return t->push(std::move(n));
}

Value transpose_matvec(const Value& A, const Value& x) {
  Tape* t = common_tape(A, x);
  require(x.is_vector() && A.rows() == x.rows(), "transpose_matvec", A, x);
  const auto& nA = t->node(A);
  const auto& nx = t->node(x);
  Tape::Node n{Op::TransposeMatVec, {A.id(), x.id()}, nA.value.transpose() * nx.value};
  n.requires_grad = nA.requires_grad || nx.requires_grad;
  return t->push(std::move(n));
}

Value transpose(const Value& a) {
  Tape* t = owner(a);
  const auto& na = t->node(a);
  Tape::Node n{Op::Transpose, {a.id()}, na.value.transpose()};
  n.requires_grad = na.requires_grad;
  return t->push(std::move(n));
}

Value relu(const Value& a) {
  Tape* t = owner(a);
  const auto& na = t->node(a);
  Tape::Node n{Op::Relu, {a.id()}, na.value.cwiseMax(0.0)};
  n.requires_grad = na.requires_grad;
  return t->push(std::move(n));
}

Value square(const Value& a) {
  Tape* t = owner(a);
  const auto& na = t->node(a);
  Tape::Node n{Op::Square, {a.id()}, na.value.array().square().matrix()};
  n.requires_grad = na.requires_grad;
  return t->push(std::move(n));
}

Value sum(const Value& a) {
  Tape* t = owner(a);
  const auto& na = t->node(a);
  Tape::Node n{Op::Sum, {a.id()}, Matrix::Constant(1, 1, na.value.sum())};
  n.requires_grad = na.requires_grad;
  return t->push(std::move(n));
}

Value concat(std::span<const Value> parts) {
  if (parts.empty()) throw DimensionError("concat needs at least one operand");
  Tape* t = owner(parts.front());
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const Value& p : parts) {
    common_tape(parts.front(), p);
    require(p.cols() == cols, "concat", parts.front(), p);
    rows += p.rows();
  }
  Tape::Node n{Op::Concat, {}, Matrix(rows, cols)};
  Index row = 0;
  for (const Value& p : parts) {
    const auto& np = t->node(p);
    n.value.middleRows(row, p.rows()) = np.value;
    n.inputs.push_back(p.id());
    n.requires_grad = n.requires_grad || np.requires_grad;
    row += p.rows();
  }
  return t->push(std::move(n));
}

Value concat(std::initializer_list<Value> parts) {
  return concat(std::span<const Value>(parts.begin(), parts.size()));
}

Value slice(const Value& x, Index start, Index length) {
  Tape* t = owner(x);
  if (!x.is_vector() || start < 0 || length < 0 || start + length > x.rows()) {
    throw DimensionError(fmt::format("slice [{}, {}) out of range for {}x{}", start,
                                     start + length, x.rows(), x.cols()));
  }
  const auto& nx = t->node(x);
  Tape::Node n{Op::Slice, {x.id()}, nx.value.middleRows(start, length)};
  n.offset = start;
  n.requires_grad = nx.requires_grad;
  return t->push(std::move(n));
}

Value spd_solve(const Value& M, const Value& b) {
  Tape* t = common_tape(M, b);
  require(M.rows() == M.cols() && b.is_vector() && M.rows() == b.rows(), "spd_solve", M, b);
  const auto& nM = t->node(M);
  const auto& nb = t->node(b);
  auto factor = std::make_shared<Eigen::LLT<Matrix>>(nM.value);
  if (factor->info() != Eigen::Success) {
    throw NumericalError("spd_solve: matrix is not symmetric positive definite",
                         static_cast<long>(t->size()));
  }
  Tape::Node n{Op::SpdSolve, {M.id(), b.id()}, factor->solve(nb.value)};
  n.factor = std::move(factor);
  n.requires_grad = nM.requires_grad || nb.requires_grad;
  return t->push(std::move(n));
}

Value scatter(const Value& x, std::shared_ptr<const ScatterPattern> pattern) {
  Tape* t = owner(x);
  if (!pattern || !x.is_vector() || x.rows() != pattern->source_size) {
    throw DimensionError("scatter: source vector does not match the pattern");
  }
  const auto& nx = t->node(x);
  Tape::Node n{Op::Scatter, {x.id()}, Matrix::Zero(pattern->rows, pattern->cols)};
  for (const auto& term : pattern->terms) {
    n.value(term.row, term.col) += term.coef * nx.value(term.source, 0);
  }
  n.pattern = std::move(pattern);
  n.requires_grad = nx.requires_grad;
  return t->push(std::move(n));
}

}  // namespace hardproj::ad
