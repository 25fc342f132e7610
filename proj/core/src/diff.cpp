#include "usl/diff.hpp"

#include <cassert>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace usl::diff {

namespace {

bool is_scalar(const Array& a) { return a.rows() == 1 && a.cols() == 1; }

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Array& Var::value() const { return tape->value(id); }

double Var::scalar() const {
  const Array& v = value();
  require(is_scalar(v), "Var::scalar: value is not 1x1");
  return v(0, 0);
}

Eigen::Index Var::rows() const { return value().rows(); }
Eigen::Index Var::cols() const { return value().cols(); }

Var Tape::emplace(Array value, std::vector<int> parents, BackwardFn backward) {
#ifndef NDEBUG
  assert(value.allFinite() && "non-finite value recorded on tape");
#endif
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.backward = std::move(backward);
  for (int p : n.parents) {
    if (nodes_[static_cast<size_t>(p)].requires_grad) {
      n.requires_grad = true;
      break;
    }
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_same_tape(Var v) const {
  require(v.valid() && v.tape == this, "operand does not belong to this tape");
}

Var Tape::input(Array value) {
  Var v = emplace(std::move(value), {}, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::input(double value) { return input(Array::Constant(1, 1, value)); }

Var Tape::constant(Array value) { return emplace(std::move(value), {}, nullptr); }

Var Tape::constant(double value) { return constant(Array::Constant(1, 1, value)); }

// ---- elementwise binary with scalar broadcast ----

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out;
  if (is_scalar(av) && !is_scalar(bv))
    out = bv.array() + av(0, 0);
  else if (is_scalar(bv) && !is_scalar(av))
    out = av.array() + bv(0, 0);
  else {
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add: shape mismatch");
    out = av + bv;
  }
  return custom({a, b}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  for (int k = 0; k < 2; ++k) {
                    if (!pg[k]) continue;
                    if (is_scalar(*pv[k]) && !is_scalar(g))
                      (*pg[k])(0, 0) += g.sum();
                    else
                      *pg[k] += g;
                  }
                },
                "add");
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out;
  if (is_scalar(av) && !is_scalar(bv))
    out = (av(0, 0) - bv.array()).matrix();
  else if (is_scalar(bv) && !is_scalar(av))
    out = av.array() - bv(0, 0);
  else {
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "sub: shape mismatch");
    out = av - bv;
  }
  return custom({a, b}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) {
                    if (is_scalar(*pv[0]) && !is_scalar(g))
                      (*pg[0])(0, 0) += g.sum();
                    else
                      *pg[0] += g;
                  }
                  if (pg[1]) {
                    if (is_scalar(*pv[1]) && !is_scalar(g))
                      (*pg[1])(0, 0) -= g.sum();
                    else
                      *pg[1] -= g;
                  }
                },
                "sub");
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out;
  if (is_scalar(av) && !is_scalar(bv))
    out = bv * av(0, 0);
  else if (is_scalar(bv) && !is_scalar(av))
    out = av * bv(0, 0);
  else {
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "mul: shape mismatch");
    out = av.cwiseProduct(bv);
  }
  return custom({a, b}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  const Array& av = *pv[0];
                  const Array& bv = *pv[1];
                  if (pg[0]) {
                    if (is_scalar(av) && !is_scalar(bv))
                      (*pg[0])(0, 0) += g.cwiseProduct(bv).sum();
                    else if (is_scalar(bv) && !is_scalar(av))
                      *pg[0] += g * bv(0, 0);
                    else
                      *pg[0] += g.cwiseProduct(bv);
                  }
                  if (pg[1]) {
                    if (is_scalar(bv) && !is_scalar(av))
                      (*pg[1])(0, 0) += g.cwiseProduct(av).sum();
                    else if (is_scalar(av) && !is_scalar(bv))
                      *pg[1] += g * av(0, 0);
                    else
                      *pg[1] += g.cwiseProduct(av);
                  }
                },
                "mul");
}

Var Tape::div(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out;
  if (is_scalar(av) && !is_scalar(bv))
    out = (av(0, 0) / bv.array()).matrix();
  else if (is_scalar(bv) && !is_scalar(av))
    out = av / bv(0, 0);
  else {
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "div: shape mismatch");
    out = av.cwiseQuotient(bv);
  }
  return custom({a, b}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  const Array& av = *pv[0];
                  const Array& bv = *pv[1];
                  if (pg[0]) {
                    if (is_scalar(av) && !is_scalar(bv))
                      (*pg[0])(0, 0) += g.cwiseQuotient(bv).sum();
                    else if (is_scalar(bv) && !is_scalar(av))
                      *pg[0] += g / bv(0, 0);
                    else
                      *pg[0] += g.cwiseQuotient(bv);
                  }
                  if (pg[1]) {
                    if (is_scalar(bv) && !is_scalar(av)) {
                      (*pg[1])(0, 0) -= g.cwiseProduct(av).sum() / (bv(0, 0) * bv(0, 0));
                    } else if (is_scalar(av) && !is_scalar(bv)) {
                      (*pg[1]).array() -=
                          g.array() * av(0, 0) / (bv.array() * bv.array());
                    } else {
                      (*pg[1]).array() -= g.array() * av.array() / (bv.array() * bv.array());
                    }
                  }
                },
                "div");
}

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Array out = a.value() * b.value();
  return custom({a, b}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) *pg[0] += g * pv[1]->transpose();
                  if (pg[1]) *pg[1] += pv[0]->transpose() * g;
                },
                "matmul");
}

Var Tape::add_rowvec(Var a, Var row) {
  check_same_tape(a);
  check_same_tape(row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_rowvec: shape mismatch");
  Array out = a.value().rowwise() + row.value().row(0);
  return custom({a, row}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) *pg[0] += g;
                  if (pg[1]) pg[1]->row(0) += g.colwise().sum();
                },
                "add_rowvec");
}

Var Tape::concat_cols(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require(a.rows() == b.rows(), "concat_cols: row count differs");
  Array out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  return custom({a, b}, std::move(out),
                [ca](const Array& g, const Array&, const std::vector<const Array*>&,
                     const std::vector<Array*>& pg) {
                  if (pg[0]) *pg[0] += g.leftCols(ca);
                  if (pg[1]) *pg[1] += g.rightCols(g.cols() - ca);
                },
                "concat_cols");
}

Var Tape::cols(Var a, Eigen::Index start, Eigen::Index n) {
  check_same_tape(a);
  require(start >= 0 && n >= 1 && start + n <= a.cols(), "cols: block out of range");
  Array out = a.value().middleCols(start, n);
  return custom({a}, std::move(out),
                [start, n](const Array& g, const Array&, const std::vector<const Array*>&,
                           const std::vector<Array*>& pg) {
                  if (pg[0]) pg[0]->middleCols(start, n) += g;
                },
                "cols");
}

Var Tape::scale(Var a, double c) {
  check_same_tape(a);
  return custom({a}, a.value() * c,
                [c](const Array& g, const Array&, const std::vector<const Array*>&,
                    const std::vector<Array*>& pg) {
                  if (pg[0]) *pg[0] += g * c;
                },
                "scale");
}

Var Tape::add_const(Var a, double c) {
  check_same_tape(a);
  return custom({a}, (a.value().array() + c).matrix(),
                [](const Array& g, const Array&, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) *pg[0] += g;
                },
                "add_const");
}

Var Tape::neg(Var a) {
  check_same_tape(a);
  return custom({a}, -a.value(),
                [](const Array& g, const Array&, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) *pg[0] -= g;
                },
                "neg");
}

Var Tape::sum(Var a) {
  check_same_tape(a);
  return custom({a}, Array::Constant(1, 1, a.value().sum()),
                [](const Array& g, const Array&, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) pg[0]->array() += g(0, 0);
                },
                "sum");
}

Var Tape::mean(Var a) {
  check_same_tape(a);
  const double n = static_cast<double>(a.value().size());
  require(n > 0, "mean: empty operand");
  return custom({a}, Array::Constant(1, 1, a.value().sum() / n),
                [n](const Array& g, const Array&, const std::vector<const Array*>&,
                    const std::vector<Array*>& pg) {
                  if (pg[0]) pg[0]->array() += g(0, 0) / n;
                },
                "mean");
}

Var Tape::vmin(Var a) {
  check_same_tape(a);
  const Array& av = a.value();
  require(av.size() > 0, "vmin: empty operand");
  Eigen::Index r = 0, c = 0;
  double best = av(0, 0);
  // first minimizer in storage order
  for (Eigen::Index j = 0; j < av.cols(); ++j)
    for (Eigen::Index i = 0; i < av.rows(); ++i)
      if (av(i, j) < best) {
        best = av(i, j);
        r = i;
        c = j;
      }
  return custom({a}, Array::Constant(1, 1, best),
                [r, c](const Array& g, const Array&, const std::vector<const Array*>&,
                       const std::vector<Array*>& pg) {
                  if (pg[0]) (*pg[0])(r, c) += g(0, 0);
                },
                "vmin");
}

Var Tape::squared_norm(Var a) {
  check_same_tape(a);
  return custom({a}, Array::Constant(1, 1, a.value().squaredNorm()),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) *pg[0] += 2.0 * g(0, 0) * (*pv[0]);
                },
                "squared_norm");
}

Var Tape::product_one_minus(Var a) {
  check_same_tape(a);
  const Array& av = a.value();
  double p = 1.0;
  for (Eigen::Index j = 0; j < av.cols(); ++j)
    for (Eigen::Index i = 0; i < av.rows(); ++i) p *= 1.0 - av(i, j);
  return custom({a}, Array::Constant(1, 1, p),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  if (!pg[0]) return;
                  // prefix/suffix products over storage order keep the rule
                  // finite even when some factor is exactly zero
                  const Array& x = *pv[0];
                  const Eigen::Index n = x.size();
                  Eigen::VectorXd pref(n), suf(n);
                  double acc = 1.0;
                  for (Eigen::Index k = 0; k < n; ++k) {
                    pref(k) = acc;
                    acc *= 1.0 - x(k);
                  }
                  acc = 1.0;
                  for (Eigen::Index k = n - 1; k >= 0; --k) {
                    suf(k) = acc;
                    acc *= 1.0 - x(k);
                  }
                  for (Eigen::Index k = 0; k < n; ++k)
                    (*pg[0])(k) -= g(0, 0) * pref(k) * suf(k);
                },
                "product_one_minus");
}

Var Tape::sigmoid(Var a) {
  check_same_tape(a);
  Array out = a.value().unaryExpr([](double x) { return stable_sigmoid(x); });
  return custom({a}, std::move(out),
                [](const Array& g, const Array& v, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0])
                    pg[0]->array() += g.array() * v.array() * (1.0 - v.array());
                },
                "sigmoid");
}

Var Tape::tanh(Var a) {
  check_same_tape(a);
  Array out = a.value().array().tanh();
  return custom({a}, std::move(out),
                [](const Array& g, const Array& v, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) pg[0]->array() += g.array() * (1.0 - v.array() * v.array());
                },
                "tanh");
}

Var Tape::exp(Var a) {
  check_same_tape(a);
  Array out = a.value().array().exp();
  return custom({a}, std::move(out),
                [](const Array& g, const Array& v, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) pg[0]->array() += g.array() * v.array();
                },
                "exp");
}

Var Tape::log(Var a) {
  check_same_tape(a);
  if (!(a.value().array() > 0.0).all())
    throw std::domain_error("log: operand must be positive");
  Array out = a.value().array().log();
  return custom({a}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) pg[0]->array() += g.array() / pv[0]->array();
                },
                "log");
}

Var Tape::sqrt(Var a) {
  check_same_tape(a);
  if (!(a.value().array() >= 0.0).all())
    throw std::domain_error("sqrt: operand must be non-negative");
  Array out = a.value().array().sqrt();
  return custom({a}, std::move(out),
                [](const Array& g, const Array& v, const std::vector<const Array*>&,
                   const std::vector<Array*>& pg) {
                  if (pg[0]) pg[0]->array() += g.array() / (2.0 * v.array());
                },
                "sqrt");
}

Var Tape::pow(Var a, double exponent) {
  check_same_tape(a);
  if (exponent != std::floor(exponent) && !(a.value().array() >= 0.0).all())
    throw std::domain_error("pow: fractional exponent needs non-negative base");
  Array out = a.value().array().pow(exponent);
  return custom({a}, std::move(out),
                [exponent](const Array& g, const Array&, const std::vector<const Array*>& pv,
                           const std::vector<Array*>& pg) {
                  if (pg[0])
                    pg[0]->array() +=
                        g.array() * exponent * pv[0]->array().pow(exponent - 1.0);
                },
                "pow");
}

Var Tape::relu(Var a) {
  check_same_tape(a);
  Array out = a.value().cwiseMax(0.0);
  return custom({a}, std::move(out),
                [](const Array& g, const Array&, const std::vector<const Array*>& pv,
                   const std::vector<Array*>& pg) {
                  if (pg[0])
                    pg[0]->array() +=
                        g.array() * (pv[0]->array() > 0.0).cast<double>();
                },
                "relu");
}

Var Tape::clamp(Var a, double lo, double hi) {
  check_same_tape(a);
  require(lo <= hi, "clamp: lo > hi");
  Array out = a.value().cwiseMax(lo).cwiseMin(hi);
  return custom({a}, std::move(out),
                [lo, hi](const Array& g, const Array&, const std::vector<const Array*>& pv,
                         const std::vector<Array*>& pg) {
                  if (pg[0])
                    pg[0]->array() += g.array() *
                                      ((pv[0]->array() > lo) && (pv[0]->array() < hi))
                                          .cast<double>();
                },
                "clamp");
}

Var Tape::custom(std::vector<Var> parents, Array value, BackwardFn backward,
                 std::string name) {
  std::vector<int> ids;
  ids.reserve(parents.size());
  for (Var p : parents) {
    check_same_tape(p);
    ids.push_back(p.id);
  }
  (void)name;
  return emplace(std::move(value), std::move(ids), std::move(backward));
}

Gradients Tape::backward(Var root) const {
  check_same_tape(root);
  require(is_scalar(root.value()), "backward: root must be scalar");

  Gradients out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  std::vector<char> live(nodes_.size(), 0);

  const size_t rid = static_cast<size_t>(root.id);
  if (!nodes_[rid].requires_grad) return out;  // nothing reaches an input

  out.grads_[rid] = Array::Constant(1, 1, 1.0);
  live[rid] = 1;

  std::vector<const Array*> pv;
  std::vector<Array*> pg;
  for (size_t i = rid + 1; i-- > 0;) {
    if (!live[i] || !nodes_[i].backward) continue;
    const Node& n = nodes_[i];
    pv.clear();
    pg.clear();
    for (int p : n.parents) {
      const size_t ps = static_cast<size_t>(p);
      pv.push_back(&nodes_[ps].value);
      if (!nodes_[ps].requires_grad) {
        pg.push_back(nullptr);
        continue;
      }
      if (!live[ps]) {
        out.grads_[ps] = Array::Zero(nodes_[ps].value.rows(), nodes_[ps].value.cols());
        live[ps] = 1;
      }
      pg.push_back(&out.grads_[ps]);
    }
    n.backward(out.grads_[i], n.value, pv, pg);
  }

  // nodes never touched get well-shaped zeros on demand via Gradients::grad
  return out;
}

const Array& Gradients::grad(Var v) const {
  const size_t i = static_cast<size_t>(v.id);
  if (i < grads_.size() && grads_[i].size() > 0) return grads_[i];
  zero_ = Array::Zero(v.rows(), v.cols());
  return zero_;
}

bool Gradients::has(Var v) const {
  const size_t i = static_cast<size_t>(v.id);
  return i < grads_.size() && grads_[i].size() > 0;
}

Var operator+(Var a, Var b) { return a.tape->add(a, b); }
Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
Var operator/(Var a, Var b) { return a.tape->div(a, b); }
Var operator+(Var a, double c) { return a.tape->add_const(a, c); }
Var operator-(Var a, double c) { return a.tape->add_const(a, -c); }
Var operator*(Var a, double c) { return a.tape->scale(a, c); }
Var operator*(double c, Var a) { return a.tape->scale(a, c); }
Var operator-(Var a) { return a.tape->neg(a); }

GradCheckReport gradcheck(
    const std::function<std::pair<double, Eigen::VectorXd>(const Eigen::VectorXd&)>& value_and_grad,
    const Eigen::VectorXd& point, double step, double tol) {
  GradCheckReport rep;
  rep.n_coords = point.size();
  const auto [f0, analytic] = value_and_grad(point);
  if (analytic.size() != point.size())
    throw std::invalid_argument("gradcheck: gradient size mismatch");

  // central differences cannot resolve slopes below the rounding noise of
  // the function values themselves; differences under this floor are
  // indistinguishable from an exact match.
  const double fd_floor = 64.0 * std::numeric_limits<double>::epsilon() *
                          std::max(1.0, std::abs(f0)) / (2.0 * step);

  Eigen::VectorXd x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    x(i) = point(i) + step;
    const double fp = value_and_grad(x).first;
    x(i) = point(i) - step;
    const double fm = value_and_grad(x).first;
    x(i) = point(i);
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic(i);
    const double diff = std::abs(a - numeric);
    const double rel =
        diff <= fd_floor
            ? 0.0
            : diff / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > rep.max_rel_err || rep.worst_coord < 0) {
      rep.max_rel_err = rel;
      rep.worst_coord = i;
      rep.worst_analytic = a;
      rep.worst_numeric = numeric;
    }
  }
  rep.passed = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace usl::diff
