#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace trisk::ad {

using Matrix = Eigen::MatrixXd;

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Minimal matrix-valued reverse-mode tape. Nodes are recorded in creation
/// order, so replaying them backwards is a valid topological order.
///
/// Parameter leaves reference external storage: their value is not copied
/// and their gradient accumulates directly into a caller-owned sink (or is
/// dropped when the sink is null).
class Tape {
 public:
  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf whose gradient is kept on the tape (read it with grad()).
  Var input(Matrix value);
  Var parameter(const Matrix& value, Matrix* grad_sink);

  const Matrix& value(Var v) const;
  /// Gradient accumulated on a non-parameter node after backward().
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);     // a * b
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // a + broadcast 1 x n row
  Var scale(Var a, double s);
  Var tanh(Var a);
  Var gelu(Var a);  // exact erf form
  /// Row-wise layer normalisation with 1 x n gain and bias.
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  /// Row-wise softmax over columns whose key_mask entry is non-zero; masked
  /// columns get probability exactly 0.
  Var masked_softmax(Var a, std::span<const char> key_mask);
  /// Elementwise product with a constant mask.
  Var mask_multiply(Var a, const Matrix& mask);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
  Var gather_rows(Var table, std::span<const int> rows);
  Var row(Var a, Eigen::Index r);
  Var sum(Var a);

  /// Seeds d(out) = seed and propagates to every node that requires grad.
  void backward(Var out, const Matrix& seed);
  void backward(Var out);  // seed of ones

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Matrix* sink = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Var push(Matrix value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward);
  bool any_requires(std::initializer_list<Var> vars) const;
  /// Accumulation target for a node's gradient (the sink for parameters).
  Matrix& grad_target(Var v);
  const Matrix& upstream(std::size_t id) const { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

}  // namespace trisk::ad
