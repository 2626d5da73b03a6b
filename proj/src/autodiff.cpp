#include "xlkd/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "xlkd/errors.hpp"

namespace xlkd::ad {

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::constant_ref(const Matrix* value) {
  Node n;
  n.ref = value;
  nodes_.push_back(std::move(n));
  return {static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(std::size_t index, const Matrix* value) {
  Node n;
  n.ref = value;
  n.param = static_cast<std::ptrdiff_t>(index);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[idx(v)];
  return n.ref != nullptr ? *n.ref : n.owned;
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) throw ContractError("scalar(): node is not 1x1");
  return m(0, 0);
}

Var Tape::push(Matrix value, std::span<const Var> inputs, Backprop backprop) {
  Node n;
  n.owned = std::move(value);
  for (auto in : inputs) n.needs_grad = n.needs_grad || nodes_[idx(in)].needs_grad;
  if (n.needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return {static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[idx(v)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Matrix& Tape::grad_slot(Var v) {
  Node& n = nodes_[idx(v)];
  if (n.grad.size() == 0) {
    const Matrix& val = value(v);
    n.grad = Matrix::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

void Tape::backward(Var loss, std::vector<Matrix>& grads) {
  if (value(loss).size() != 1) throw ContractError("backward(): loss must be 1x1");
  if (!std::isfinite(scalar(loss))) throw NumericError("backward(): non-finite loss");
  if (!nodes_[idx(loss)].needs_grad) return;
  nodes_[idx(loss)].grad = Matrix::Ones(1, 1);
  for (std::size_t i = idx(loss) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.param >= 0) {
      const auto p = static_cast<std::size_t>(n.param);
      if (grads.size() <= p) grads.resize(p + 1);
      if (grads[p].size() == 0) {
        grads[p] = n.grad;
      } else {
        grads[p] += n.grad;
      }
    } else if (n.backprop) {
      n.backprop(*this, n.grad);
    }
    n.grad.resize(0, 0);
  }
}

Var add(Tape& t, Var a, Var b) {
  const Var in[] = {a, b};
  return t.push(t.value(a) + t.value(b), in, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_row(Tape& t, Var a, Var row) {
  Matrix out = t.value(a);
  out.rowwise() += t.value(row).row(0);
  const Var in[] = {a, row};
  return t.push(std::move(out), in, [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var matmul(Tape& t, Var a, Var b) {
  const Var in[] = {a, b};
  return t.push(t.value(a) * t.value(b), in, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Var in[] = {a, b};
  return t.push(t.value(a) * t.value(b).transpose(), in, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b));
    if (tp.requires_grad(b)) tp.accumulate(b, g.transpose() * tp.value(a));
  });
}

Var scale(Tape& t, Var a, double s) {
  const Var in[] = {a};
  return t.push(t.value(a) * s, in, [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, g * s); });
}

Var mul_const(Tape& t, Var a, Matrix mask) {
  Matrix out = t.value(a).cwiseProduct(mask);
  const Var in[] = {a};
  return t.push(std::move(out), in,
                [a, m = std::move(mask)](Tape& tp, const Matrix& g) { tp.accumulate(a, g.cwiseProduct(m)); });
}

Var gather_rows(Tape& t, Var table, std::span<const int> rows) {
  const Matrix& src = t.value(table);
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= src.rows()) throw ContractError("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(r)) = src.row(rows[r]);
  }
  const Var in[] = {table};
  return t.push(std::move(out), in, [table, idx = std::vector<int>(rows.begin(), rows.end())](Tape& tp, const Matrix& g) {
    Matrix& slot = tp.grad_slot(table);
    for (std::size_t r = 0; r < idx.size(); ++r) slot.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  Eigen::Index rows = 0, cols = -1;
  for (auto p : parts) {
    const Matrix& v = t.value(p);
    if (v.rows() == 0) continue;
    if (cols >= 0 && v.cols() != cols) throw ContractError("concat_rows: column mismatch");
    cols = v.cols();
    rows += v.rows();
  }
  Matrix out(rows, std::max<Eigen::Index>(cols, 0));
  Eigen::Index at = 0;
  for (auto p : parts) {
    const Matrix& v = t.value(p);
    if (v.rows() == 0) continue;
    out.middleRows(at, v.rows()) = v;
    at += v.rows();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return t.push(std::move(out), parts, [in](Tape& tp, const Matrix& g) {
    Eigen::Index at = 0;
    for (auto p : in) {
      const Eigen::Index r = tp.value(p).rows();
      if (r == 0) continue;
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(at, r));
      at += r;
    }
  });
}

Var slice_cols(Tape& t, Var a, int start, int count) {
  const Var in[] = {a};
  return t.push(t.value(a).middleCols(start, count), in, [a, start, count](Tape& tp, const Matrix& g) {
    tp.grad_slot(a).middleCols(start, count) += g;
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  Eigen::Index cols = 0;
  const Eigen::Index rows = t.value(parts.front()).rows();
  for (auto p : parts) cols += t.value(p).cols();
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (auto p : parts) {
    const Matrix& v = t.value(p);
    out.middleCols(at, v.cols()) = v;
    at += v.cols();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return t.push(std::move(out), parts, [in](Tape& tp, const Matrix& g) {
    Eigen::Index at = 0;
    for (auto p : in) {
      const Eigen::Index c = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = t.value(x);
  const Eigen::Index n = xv.rows(), d = xv.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * rstd(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= t.value(gamma).row(0).array();
  out.rowwise() += t.value(beta).row(0);
  const Var in[] = {x, gamma, beta};
  return t.push(std::move(out), in, [x, gamma, beta, xhat, rstd](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(gamma)) tp.accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
    if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
    if (!tp.requires_grad(x)) return;
    Matrix dxhat = g;
    dxhat.array().rowwise() *= tp.value(gamma).row(0).array();
    Matrix dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double m1 = dxhat.row(r).mean();
      const double m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
      dx.row(r) = rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
    }
    tp.accumulate(x, dx);
  });
}

Var gelu(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  const Matrix cdf = xv.unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2)); });
  Matrix out = xv.cwiseProduct(cdf);
  const Var in[] = {x};
  return t.push(std::move(out), in, [x, cdf](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(x);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = cdf + xv.unaryExpr([&](double v) { return v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
    tp.accumulate(x, g.cwiseProduct(d));
  });
}

Var masked_softmax(Tape& t, Var x, std::span<const std::uint8_t> key_valid) {
  const Matrix& xv = t.value(x);
  if (static_cast<Eigen::Index>(key_valid.size()) != xv.cols()) throw ContractError("masked_softmax: mask width mismatch");
  Matrix out = Matrix::Zero(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < xv.cols(); ++c)
      if (key_valid[static_cast<std::size_t>(c)]) mx = std::max(mx, xv(r, c));
    double z = 0.0;
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      if (!key_valid[static_cast<std::size_t>(c)]) continue;
      out(r, c) = std::exp(xv(r, c) - mx);
      z += out(r, c);
    }
    out.row(r) /= z;
  }
  const Var in[] = {x};
  Matrix saved = out;
  return t.push(std::move(out), in, [x, y = std::move(saved)](Tape& tp, const Matrix& g) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(g.row(r));
      dx.row(r) = y.row(r).array() * (g.row(r).array() - dot);
    }
    tp.accumulate(x, dx);
  });
}

Var weighted_row_mse(Tape& t, Var student, const Matrix& teacher, std::span<const RowPair> pairs) {
  const Matrix& s = t.value(student);
  if (s.cols() != teacher.cols()) throw ContractError("weighted_row_mse: hidden size mismatch");
  const double inv_d = 1.0 / static_cast<double>(s.cols());
  double total = 0.0;
  for (const auto& p : pairs) total += p.weight * (s.row(p.student_row) - teacher.row(p.teacher_row)).squaredNorm() * inv_d;
  Matrix out(1, 1);
  out(0, 0) = total;
  const Var in[] = {student};
  return t.push(std::move(out), in,
                [student, teacher, ps = std::vector<RowPair>(pairs.begin(), pairs.end()), inv_d](Tape& tp, const Matrix& g) {
                  Matrix& slot = tp.grad_slot(student);
                  const Matrix& s = tp.value(student);
                  for (const auto& p : ps) {
                    slot.row(p.student_row) +=
                        (g(0, 0) * p.weight * 2.0 * inv_d) * (s.row(p.student_row) - teacher.row(p.teacher_row));
                  }
                });
}

Var weighted_sum(Tape& t, std::span<const Var> scalars, std::span<const double> weights) {
  double total = 0.0;
  for (std::size_t k = 0; k < scalars.size(); ++k) total += weights[k] * t.scalar(scalars[k]);
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.push(std::move(out), scalars,
                [in = std::vector<Var>(scalars.begin(), scalars.end()), w = std::vector<double>(weights.begin(), weights.end())](
                    Tape& tp, const Matrix& g) {
                  for (std::size_t k = 0; k < in.size(); ++k) tp.accumulate(in[k], g * w[k]);
                });
}

Var softmax_cross_entropy(Tape& t, Var logits, int target) {
  const Matrix& z = t.value(logits);
  if (z.rows() != 1 || target < 0 || target >= z.cols()) throw ContractError("softmax_cross_entropy: bad target");
  const double mx = z.maxCoeff();
  Matrix p = (z.array() - mx).exp().matrix();
  const double sum = p.sum();
  p /= sum;
  Matrix out(1, 1);
  out(0, 0) = std::log(sum) + mx - z(0, target);
  const Var in[] = {logits};
  return t.push(std::move(out), in, [logits, p, target](Tape& tp, const Matrix& g) {
    Matrix d = p;
    d(0, target) -= 1.0;
    tp.accumulate(logits, d * g(0, 0));
  });
}

Var bce_with_logits(Tape& t, Var logits, const RowVector& targets) {
  const Matrix& z = t.value(logits);
  if (z.rows() != 1 || z.cols() != targets.size()) throw ContractError("bce_with_logits: shape mismatch");
  double total = 0.0;
  Matrix sig(1, z.cols());
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    const double v = z(0, c);
    total += std::max(v, 0.0) - v * targets(c) + std::log1p(std::exp(-std::abs(v)));
    sig(0, c) = 1.0 / (1.0 + std::exp(-v));
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  const Var in[] = {logits};
  return t.push(std::move(out), in, [logits, sig, targets](Tape& tp, const Matrix& g) {
    tp.accumulate(logits, (sig - targets) * g(0, 0));
  });
}

}  // namespace xlkd::ad
