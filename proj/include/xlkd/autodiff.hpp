#pragma once

// Minimal reverse-mode differentiation over dense row-major-by-convention
// matrices (rows = sequence positions, columns = features).

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace xlkd::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Matrix& grad_out)>;

  Var constant(Matrix value);
  // Leaf that aliases `value`; the referent must outlive the tape.
  Var constant_ref(const Matrix* value);
  // Tracked leaf whose gradient lands in grads[index] on backward().
  Var parameter(std::size_t index, const Matrix* value);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[idx(v)].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // `loss` must be 1x1. Gradients are added (not assigned) into `grads`,
  // which is resized as needed; entries never reached stay untouched.
  void backward(Var loss, std::vector<Matrix>& grads);

  // Op-author interface.
  Var push(Matrix value, std::span<const Var> inputs, Backprop backprop);
  void accumulate(Var v, const Matrix& g);
  Matrix& grad_slot(Var v);

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    Backprop backprop;
    std::ptrdiff_t param = -1;
    bool needs_grad = false;
  };
  static std::size_t idx(Var v) { return static_cast<std::size_t>(v.id); }
  std::vector<Node> nodes_;
};

Var add(Tape& t, Var a, Var b);
// a + row, with `row` (1 x cols) broadcast over every row of a.
Var add_row(Tape& t, Var a, Var row);
Var matmul(Tape& t, Var a, Var b);
// a * b^T
Var matmul_nt(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
// Elementwise product with a constant (dropout masks).
Var mul_const(Tape& t, Var a, Matrix mask);
Var gather_rows(Tape& t, Var table, std::span<const int> rows);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var slice_cols(Tape& t, Var a, int start, int count);
Var concat_cols(Tape& t, std::span<const Var> parts);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-12);
// Exact (erf) GELU.
Var gelu(Tape& t, Var x);
// Row softmax restricted to columns whose key_valid entry is nonzero;
// excluded columns get probability exactly 0.
Var masked_softmax(Tape& t, Var x, std::span<const std::uint8_t> key_valid);

struct RowPair {
  int student_row = 0;
  int teacher_row = 0;
  double weight = 1.0;
};
// sum_p weight_p * mean_d (S[i_p, d] - T[j_p, d])^2, T constant. Returns 1x1.
Var weighted_row_mse(Tape& t, Var student, const Matrix& teacher, std::span<const RowPair> pairs);
// sum_k weight_k * s_k over 1x1 inputs.
Var weighted_sum(Tape& t, std::span<const Var> scalars, std::span<const double> weights);
// -log softmax(logits)[target]; logits is 1 x C.
Var softmax_cross_entropy(Tape& t, Var logits, int target);
// sum_c BCE(sigmoid(z_c), y_c); logits and targets are 1 x C.
Var bce_with_logits(Tape& t, Var logits, const RowVector& targets);

}  // namespace xlkd::ad
