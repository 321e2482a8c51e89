// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace expertflow::ad {

namespace {

[[noreturn]] void shape_error(const char* op, const Mat& a, const Mat& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows()
     << "x" << b.cols();
  throw std::invalid_argument(os.str());
}

void require_same_shape(const char* op, const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

}  // namespace

Var Tape::push(const char* op, std::vector<Var> inputs, Mat value,
               std::function<void(Tape&)> back) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  for (Var in : n.inputs) {
    if (nodes_[static_cast<size_t>(in)].needs_grad) n.needs_grad = true;
  }
  if (n.needs_grad) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.back = std::move(back);
  }
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::leaf(Mat value, bool needs_grad) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

const Mat& Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v)];
  if (!n.needs_grad) throw std::logic_error("grad requested for a node without gradient");
  return n.grad;
}

Var Tape::add(Var a, Var b) {
  require_same_shape("add", val(a), val(b));
  Mat v = val(a) + val(b);
  Var out = push("add", {a, b}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, b, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += g;
    if (t.needs_grad(b)) t.grad_mut(b) += g;
  };
  return out;
}

Var Tape::sub(Var a, Var b) {
  require_same_shape("sub", val(a), val(b));
  Mat v = val(a) - val(b);
  Var out = push("sub", {a, b}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, b, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += g;
    if (t.needs_grad(b)) t.grad_mut(b) -= g;
  };
  return out;
}

Var Tape::mul(Var a, Var b) {
  require_same_shape("mul", val(a), val(b));
  Mat v = val(a).cwiseProduct(val(b));
  Var out = push("mul", {a, b}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, b, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += g.cwiseProduct(t.val(b));
    if (t.needs_grad(b)) t.grad_mut(b) += g.cwiseProduct(t.val(a));
  };
  return out;
}

Var Tape::scale(Var a, double c) {
  Mat v = val(a) * c;
  Var out = push("scale", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, c, out](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a) += c * t.grad(out);
  };
  return out;
}

Var Tape::sqrt(Var a) {
  Mat v = val(a).cwiseSqrt();
  Var out = push("sqrt", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (t.needs_grad(a))
      t.grad_mut(a) += (0.5 * t.grad(out).array() / t.val(out).array()).matrix();
  };
  return out;
}

Var Tape::sigmoid(Var a) {
  Mat v = expertflow::ad::sigmoid(val(a));
  Var out = push("sigmoid", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (t.needs_grad(a)) {
      const auto s = t.val(out).array();
      t.grad_mut(a) += (t.grad(out).array() * s * (1.0 - s)).matrix();
    }
  };
  return out;
}

Var Tape::ste_sign(Var a) {
  Mat v = (val(a).array() > 0.0).cast<double>().matrix();
  Var out = push("ste_sign", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a) += t.grad(out);
  };
  return out;
}

Var Tape::add_rowvec(Var a, Var r) {
  if (val(r).rows() != 1 || val(r).cols() != val(a).cols()) shape_error("add_rowvec", val(a), val(r));
  Mat v = val(a).rowwise() + val(r).row(0);
  Var out = push("add_rowvec", {a, r}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, r, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += g;
    if (t.needs_grad(r)) t.grad_mut(r) += g.colwise().sum();
  };
  return out;
}

Var Tape::mul_rowvec(Var a, Var r) {
  if (val(r).rows() != 1 || val(r).cols() != val(a).cols()) shape_error("mul_rowvec", val(a), val(r));
  Mat v = val(a).array().rowwise() * val(r).row(0).array();
  Var out = push("mul_rowvec", {a, r}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, r, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += (g.array().rowwise() * t.val(r).row(0).array()).matrix();
    if (t.needs_grad(r)) t.grad_mut(r) += g.cwiseProduct(t.val(a)).colwise().sum();
  };
  return out;
}

Var Tape::div_rowvec(Var a, Var r) {
  if (val(r).rows() != 1 || val(r).cols() != val(a).cols()) shape_error("div_rowvec", val(a), val(r));
  Mat v = val(a).array().rowwise() / val(r).row(0).array();
  Var out = push("div_rowvec", {a, r}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, r, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += (g.array().rowwise() / t.val(r).row(0).array()).matrix();
    if (t.needs_grad(r)) {
      Mat num = g.cwiseProduct(t.val(out)).colwise().sum();
      t.grad_mut(r) -= (num.array().rowwise() / t.val(r).row(0).array()).matrix();
    }
  };
  return out;
}

Var Tape::mul_colvec(Var a, Var c) {
  if (val(c).cols() != 1 || val(c).rows() != val(a).rows()) shape_error("mul_colvec", val(a), val(c));
  Mat v = val(a).array().colwise() * val(c).col(0).array();
  Var out = push("mul_colvec", {a, c}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, c, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += (g.array().colwise() * t.val(c).col(0).array()).matrix();
    if (t.needs_grad(c)) t.grad_mut(c) += g.cwiseProduct(t.val(a)).rowwise().sum();
  };
  return out;
}

Var Tape::div_colvec(Var a, Var c) {
  if (val(c).cols() != 1 || val(c).rows() != val(a).rows()) shape_error("div_colvec", val(a), val(c));
  Mat v = val(a).array().colwise() / val(c).col(0).array();
  Var out = push("div_colvec", {a, c}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, c, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += (g.array().colwise() / t.val(c).col(0).array()).matrix();
    if (t.needs_grad(c)) {
      Mat num = g.cwiseProduct(t.val(out)).rowwise().sum();
      t.grad_mut(c) -= (num.array().colwise() / t.val(c).col(0).array()).matrix();
    }
  };
  return out;
}

Var Tape::matmul(Var a, Var b) {
  if (val(a).cols() != val(b).rows()) shape_error("matmul", val(a), val(b));
  Mat v = val(a) * val(b);
  Var out = push("matmul", {a, b}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, b, out](Tape& t) {
    const Mat& g = t.grad(out);
    if (t.needs_grad(a)) t.grad_mut(a) += g * t.val(b).transpose();
    if (t.needs_grad(b)) t.grad_mut(b) += t.val(a).transpose() * g;
  };
  return out;
}

Var Tape::transpose(Var a) {
  Mat v = val(a).transpose();
  Var out = push("transpose", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a) += t.grad(out).transpose();
  };
  return out;
}

Var Tape::rowsum(Var a) {
  Mat v = val(a).rowwise().sum();
  Var out = push("rowsum", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a).colwise() += t.grad(out).col(0);
  };
  return out;
}

Var Tape::colsum(Var a) {
  Mat v = val(a).colwise().sum();
  Var out = push("colsum", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a).rowwise() += t.grad(out).row(0);
  };
  return out;
}

Var Tape::sum(Var a) {
  Mat v(1, 1);
  v(0, 0) = val(a).sum();
  Var out = push("sum", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a).array() += t.grad(out)(0, 0);
  };
  return out;
}

Var Tape::softmax_rows(Var a) {
  Mat v = expertflow::ad::softmax_rows(val(a));
  Var out = push("softmax_rows", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (!t.needs_grad(a)) return;
    const Mat& s = t.val(out);
    const Mat& g = t.grad(out);
    // dx = s .* (g - rowsum(g .* s))
    Mat dot = g.cwiseProduct(s).rowwise().sum();
    t.grad_mut(a) += s.cwiseProduct((g.array().colwise() - dot.col(0).array()).matrix());
  };
  return out;
}

Var Tape::logsumexp_rows(Var a) {
  const Mat& x = val(a);
  Mat m = x.rowwise().maxCoeff();
  Mat v(x.rows(), 1);
  for (Index i = 0; i < x.rows(); ++i)
    v(i, 0) = m(i, 0) + std::log((x.row(i).array() - m(i, 0)).exp().sum());
  Var out = push("logsumexp_rows", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out](Tape& t) {
    if (!t.needs_grad(a)) return;
    Mat sm = expertflow::ad::softmax_rows(t.val(a));
    t.grad_mut(a) += (sm.array().colwise() * t.grad(out).col(0).array()).matrix();
  };
  return out;
}

Var Tape::gather_rows(Var a, std::vector<Index> idx) {
  const Mat& x = val(a);
  Mat v(static_cast<Index>(idx.size()), x.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.rows())
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    v.row(static_cast<Index>(i)) = x.row(idx[i]);
  }
  Var out = push("gather_rows", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out, idx = std::move(idx)](Tape& t) {
    if (!t.needs_grad(a)) return;
    const Mat& g = t.grad(out);
    Mat& ga = t.grad_mut(a);
    for (size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
  };
  return out;
}

Var Tape::scatter_rows(Var a, std::vector<Index> idx, Index n_rows) {
  const Mat& x = val(a);
  if (static_cast<Index>(idx.size()) != x.rows())
    throw std::invalid_argument("scatter_rows: index count does not match row count");
  Mat v = Mat::Zero(n_rows, x.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n_rows)
      throw std::out_of_range("scatter_rows: index " + std::to_string(idx[i]) + " out of range");
    v.row(idx[i]) += x.row(static_cast<Index>(i));
  }
  Var out = push("scatter_rows", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out, idx = std::move(idx)](Tape& t) {
    if (!t.needs_grad(a)) return;
    const Mat& g = t.grad(out);
    Mat& ga = t.grad_mut(a);
    for (size_t i = 0; i < idx.size(); ++i) ga.row(static_cast<Index>(i)) += g.row(idx[i]);
  };
  return out;
}

Var Tape::slice_rows(Var a, Index start, Index count) {
  Mat v = val(a).middleRows(start, count);
  Var out = push("slice_rows", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out, start, count](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a).middleRows(start, count) += t.grad(out);
  };
  return out;
}

Var Tape::slice_cols(Var a, Index start, Index count) {
  Mat v = val(a).middleCols(start, count);
  Var out = push("slice_cols", {a}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [a, out, start, count](Tape& t) {
    if (t.needs_grad(a)) t.grad_mut(a).middleCols(start, count) += t.grad(out);
  };
  return out;
}

Var Tape::nll_sum(Var logits, std::vector<Index> targets) {
  const Mat& x = val(logits);
  if (static_cast<Index>(targets.size()) != x.rows())
    throw std::invalid_argument("nll_sum: one target per logit row required");
  for (Index t : targets) {
    if (t < 0 || t >= x.cols())
      throw std::invalid_argument("nll_sum: target " + std::to_string(t) +
                                  " outside vocabulary of size " + std::to_string(x.cols()));
  }
  double total = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    double lse = m + std::log((x.row(i).array() - m).exp().sum());
    total += lse - x(i, targets[static_cast<size_t>(i)]);
  }
  Mat v(1, 1);
  v(0, 0) = total;
  Var out = push("nll_sum", {logits}, std::move(v), nullptr);
  nodes_[static_cast<size_t>(out)].back = [logits, out, targets = std::move(targets)](Tape& t) {
    if (!t.needs_grad(logits)) return;
    double g = t.grad(out)(0, 0);
    Mat sm = expertflow::ad::softmax_rows(t.val(logits));
    for (size_t i = 0; i < targets.size(); ++i) sm(static_cast<Index>(i), targets[i]) -= 1.0;
    t.grad_mut(logits) += g * sm;
  };
  return out;
}

void Tape::backward(Var loss) {
  Node& ln = nodes_[static_cast<size_t>(loss)];
  if (ln.value.rows() != 1 || ln.value.cols() != 1)
    throw std::invalid_argument("backward: loss must be a 1x1 scalar, got " +
                                std::to_string(ln.value.rows()) + "x" +
                                std::to_string(ln.value.cols()));
  if (!ln.needs_grad) return;
  ln.grad(0, 0) += 1.0;
  for (Var i = loss; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.needs_grad && n.back) n.back(*this);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_)
    if (n.needs_grad) n.grad.setZero();
}

Mat finite_diff(const std::function<double(const Mat&)>& f, const Mat& theta, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff: step must be positive");
  Mat g(theta.rows(), theta.cols());
  Mat probe = theta;
  for (Index i = 0; i < theta.rows(); ++i) {
    for (Index j = 0; j < theta.cols(); ++j) {
      double orig = probe(i, j);
      probe(i, j) = orig + h;
      double fp = f(probe);
      probe(i, j) = orig - h;
      double fm = f(probe);
      probe(i, j) = orig;
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  }
  return g;
}

Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    Eigen::ArrayXd e = (x.row(i).array() - m).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

Mat sigmoid(const Mat& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
  });
}

}  // namespace expertflow::ad
