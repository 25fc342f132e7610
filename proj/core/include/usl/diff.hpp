#pragma once

// Reverse-mode automatic differentiation on a flat tape.
//
// Values are dense double matrices (scalars are 1x1).  Building an expression
// appends nodes to a Tape; Tape::backward walks the records in reverse and
// accumulates d(root)/d(node) for every node that can reach the root.  Nodes
// created from Tape::constant never receive gradients.
//
// Fused operations with hand-written backward rules (rasterization, chamfer,
// surface sampling, ...) plug in through Tape::custom.

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace usl::diff {

using Array = Eigen::MatrixXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Array& value() const;
  double scalar() const;
  Eigen::Index rows() const;
  Eigen::Index cols() const;
};

// Adds each parent's share of `grad_out` into `parent_grads[k]` (pre-zeroed;
// null when that parent does not require gradients).
using BackwardFn = std::function<void(const Array& grad_out,
                                      const Array& value,
                                      const std::vector<const Array*>& parent_values,
                                      const std::vector<Array*>& parent_grads)>;

class Gradients {
 public:
  // Gradient of the root w.r.t. `v`; a zero matrix of matching shape when no
  // gradient flowed.
  const Array& grad(Var v) const;
  bool has(Var v) const;

 private:
  friend class Tape;
  std::vector<Array> grads_;
  mutable Array zero_;
  const Tape* tape_ = nullptr;
};

class Tape {
 public:
  Var input(Array value);             // differentiable leaf
  Var input(double value);
  Var constant(Array value);          // non-differentiable leaf
  Var constant(double value);

  // Elementwise binary ops; operands must have equal shapes, or one of the
  // two may be a 1x1 scalar which broadcasts.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);

  Var matmul(Var a, Var b);           // (n,k) x (k,m)
  Var add_rowvec(Var a, Var row);     // (n,c) + broadcast (1,c)
  Var concat_cols(Var a, Var b);
  Var cols(Var a, Eigen::Index start, Eigen::Index n);  // column block

  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var neg(Var a);

  Var sum(Var a);                     // scalar
  Var mean(Var a);                    // scalar
  Var vmin(Var a);                    // scalar; subgradient to first minimizer
  Var squared_norm(Var a);            // scalar sum of squares
  Var product_one_minus(Var a);       // scalar prod(1 - x_i)

  Var sigmoid(Var a);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var pow(Var a, double exponent);
  Var relu(Var a);
  Var clamp(Var a, double lo, double hi);

  Var custom(std::vector<Var> parents, Array value, BackwardFn backward,
             std::string name = "custom");

  // Root must be scalar.  Each call starts from fresh accumulators.
  Gradients backward(Var root) const;

  const Array& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Array value;
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var emplace(Array value, std::vector<int> parents, BackwardFn backward);
  void check_same_tape(Var v) const;

  std::vector<Node> nodes_;
};

// Convenience operators (same-tape operands).
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator+(Var a, double c);
Var operator-(Var a, double c);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator-(Var a);

// Central-difference verification of a scalar function's gradient.
//
// `value_and_grad` evaluates f at a point and returns (f, df/dpoint); the
// analytic gradient is taken once at `point`, the numeric one coordinate by
// coordinate with step `h`.  Relative error uses max(|a|, |n|, 1e-8) in the
// denominator.
struct GradCheckReport {
  bool passed = true;
  double max_rel_err = 0.0;
  Eigen::Index worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  Eigen::Index n_coords = 0;
};

GradCheckReport gradcheck(
    const std::function<std::pair<double, Eigen::VectorXd>(const Eigen::VectorXd&)>& value_and_grad,
    const Eigen::VectorXd& point, double step = 1e-5, double tol = 1e-3);

}  // namespace usl::diff
