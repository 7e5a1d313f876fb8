#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cstddef>
#include <memory>
#include <span>
#include <utility>
#include <vector>

namespace hardproj::ad {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

// Handle to a node on a tape. Vectors are n x 1, scalars 1 x 1.
class Value {
 public:
  Value() = default;

  int id() const { return id_; }
  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  bool is_vector() const { return cols_ == 1; }
  bool is_scalar() const { return rows_ == 1 && cols_ == 1; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Value(Tape* tape, int id, Index rows, Index cols)
      : tape_(tape), id_(id), rows_(rows), cols_(cols) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
  Index rows_ = 0;
  Index cols_ = 0;
};

/**
 * Constant linear map from a vector to a matrix: every entry of the output is a
 * sum of coef * x[source] terms. Used to build Jacobians whose entries are
 * linear in y (quadratic constraints).
 */
struct ScatterPattern {
  struct Term {
    Index row;
    Index col;
    Index source;
    double coef;
  };
  Index rows = 0;
  Index cols = 0;
  Index source_size = 0;
  std::vector<Term> terms;
};

enum class Op {
  Constant,
  Parameter,
  Add,
  Subtract,
  Scale,
  MatMul,
  MatVec,
  TransposeMatVec,
  Transpose,
  Relu,
  Square,
  Sum,
  Concat,
  Slice,
  SpdSolve,
  Scatter,
};

// Gradient of a scalar output with respect to every parameter of a tape.
class Gradients {
 public:
  const Matrix& operator[](const Value& parameter) const;
  std::size_t size() const { return grads_.size(); }
  const std::vector<Matrix>& all() const { return grads_; }

 private:
  friend class Tape;
  std::vector<int> node_to_slot_;
  std::vector<Matrix> grads_;
};

/**
 * Append-only record of primitive evaluations. Forward values are computed and
 * cached as nodes are appended, so node order is a topological order.
 *
 * A tape is single-threaded; use one per sample.
 */
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Vectors convert implicitly to n x 1 matrices.
  Value constant(Matrix value);
  Value parameter(Matrix value);

  const Matrix& value(const Value& v) const;
  Vector vector(const Value& v) const;
  double scalar(const Value& v) const;

  // Throws PreconditionError unless output is a scalar on this tape.
  Gradients backward(const Value& output);

  std::size_t size() const { return nodes_.size(); }
  std::size_t num_parameters() const { return parameters_.size(); }
  // Node visits by the most recent backward pass.
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  friend Value add(const Value&, const Value&);
  friend Value subtract(const Value&, const Value&);
  friend Value scale(const Value&, double);
  friend Value matmul(const Value&, const Value&);
  friend Value matvec(const Value&, const Value&);
  friend Value transpose_matvec(const Value&, const Value&);
  friend Value transpose(const Value&);
  friend Value relu(const Value&);
  friend Value square(const Value&);
  friend Value sum(const Value&);
  friend Value concat(std::span<const Value>);
  friend Value slice(const Value&, Index, Index);
  friend Value spd_solve(const Value&, const Value&);
  friend Value scatter(const Value&, std::shared_ptr<const ScatterPattern>);

  struct Node {
    Node(Op kind, std::vector<int> args, Matrix v)
        : op(kind), inputs(std::move(args)), value(std::move(v)) {}

    Op op;
    std::vector<int> inputs;
    Matrix value;
    bool requires_grad = false;
    double scalar = 0.0;
    Index offset = 0;
    std::shared_ptr<const Eigen::LLT<Matrix>> factor;
    std::shared_ptr<const ScatterPattern> pattern;
  };

  Value push(Node node);
  const Node& node(const Value& v) const;
  void check_owner(const Value& v) const;
  void accumulate(std::vector<Matrix>& adjoints, int id, const Matrix& contribution) const;

  std::vector<Node> nodes_;
  std::vector<int> parameters_;
  std::size_t backward_visits_ = 0;
};

// Primitives. Shapes are checked on construction (DimensionError); operands
// must share a tape.
Value add(const Value& a, const Value& b);
Value subtract(const Value& a, const Value& b);
Value scale(const Value& a, double factor);
Value matmul(const Value& a, const Value& b);
Value matvec(const Value& A, const Value& x);
// A^T x.
Value transpose_matvec(const Value& A, const Value& x);
Value transpose(const Value& a);
Value relu(const Value& a);
Value square(const Value& a);
Value sum(const Value& a);
// Vertical stacking of operands with equal column counts.
Value concat(std::span<const Value> parts);
Value concat(std::initializer_list<Value> parts);
// Rows [start, start + length) of a vector.
Value slice(const Value& x, Index start, Index length);
/**
 * z = M^{-1} b for symmetric positive definite M via Cholesky.
 *
 * Adjoint: b_bar = M^{-1} g_bar, M_bar = -1/2 (b_bar z^T + z b_bar^T). The
 * symmetrized form assumes M was built symmetric. Throws NumericalError if the
 * factorization fails.
 */
Value spd_solve(const Value& M, const Value& b);
Value scatter(const Value& x, std::shared_ptr<const ScatterPattern> pattern);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return subtract(a, b); }
inline Value operator*(double s, const Value& a) { return scale(a, s); }

}  // namespace hardproj::ad
