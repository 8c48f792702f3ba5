#include "trisk/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace trisk::ad {

namespace {

const double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

Var Tape::push(Matrix value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

bool Tape::any_requires(std::initializer_list<Var> vars) const {
  for (Var v : vars)
    if (nodes_[v.id].requires_grad) return true;
  return false;
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::input(Matrix value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(const Matrix& value, Matrix* grad_sink) {
  Node node;
  node.external = &value;
  node.sink = grad_sink;
  node.requires_grad = grad_sink != nullptr;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external ? *n.external : n.value;
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  check(n.sink == nullptr, "grad() on a parameter node; read its sink instead");
  check(n.has_grad, "node has no gradient");
  return n.grad;
}

Matrix& Tape::grad_target(Var v) {
  Node& n = nodes_[v.id];
  if (n.sink) return *n.sink;
  if (!n.has_grad) {
    const Matrix& val = n.external ? *n.external : n.value;
    n.grad = Matrix::Zero(val.rows(), val.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Var Tape::matmul(Var a, Var b) {
  check(value(a).cols() == value(b).rows(), "matmul shape mismatch");
  Matrix out = value(a) * value(b);
  return push(std::move(out), any_requires({a, b}), [a, b](Tape& t, std::size_t id) {
    const Matrix& g = t.upstream(id);
    if (t.requires_grad(a)) t.grad_target(a).noalias() += g * t.value(b).transpose();
    if (t.requires_grad(b)) t.grad_target(b).noalias() += t.value(a).transpose() * g;
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  check(value(a).cols() == value(b).cols(), "matmul_nt shape mismatch");
  Matrix out = value(a) * value(b).transpose();
  return push(std::move(out), any_requires({a, b}), [a, b](Tape& t, std::size_t id) {
    const Matrix& g = t.upstream(id);
    if (t.requires_grad(a)) t.grad_target(a).noalias() += g * t.value(b);
    if (t.requires_grad(b)) t.grad_target(b).noalias() += g.transpose() * t.value(a);
  });
}

Var Tape::add(Var a, Var b) {
  check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add shape mismatch");
  Matrix out = value(a) + value(b);
  return push(std::move(out), any_requires({a, b}), [a, b](Tape& t, std::size_t id) {
    const Matrix& g = t.upstream(id);
    if (t.requires_grad(a)) t.grad_target(a) += g;
    if (t.requires_grad(b)) t.grad_target(b) += g;
  });
}

Var Tape::add_row(Var a, Var row) {
  check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row shape mismatch");
  Matrix out = value(a).rowwise() + value(row).row(0);
  return push(std::move(out), any_requires({a, row}), [a, row](Tape& t, std::size_t id) {
    const Matrix& g = t.upstream(id);
    if (t.requires_grad(a)) t.grad_target(a) += g;
    if (t.requires_grad(row)) t.grad_target(row) += g.colwise().sum();
  });
}

Var Tape::scale(Var a, double s) {
  Matrix out = value(a) * s;
  return push(std::move(out), any_requires({a}), [a, s](Tape& t, std::size_t id) {
    t.grad_target(a) += t.upstream(id) * s;
  });
}

Var Tape::tanh(Var a) {
  Matrix out = value(a).array().tanh().matrix();
  return push(std::move(out), any_requires({a}), [a](Tape& t, std::size_t id) {
    const Matrix& y = t.nodes_[id].value;
    t.grad_target(a).array() += t.upstream(id).array() * (1.0 - y.array().square());
  });
}

Var Tape::gelu(Var a) {
  const Matrix& x = value(a);
  Matrix out = (0.5 * x.array() * (1.0 + (x.array() * kInvSqrt2).unaryExpr([](double v) { return std::erf(v); }))).matrix();
  return push(std::move(out), any_requires({a}), [a](Tape& t, std::size_t id) {
    const auto x = t.value(a).array();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    const auto cdf = 0.5 * (1.0 + (x * kInvSqrt2).unaryExpr([](double v) { return std::erf(v); }));
    const auto pdf = inv_sqrt_2pi * (-0.5 * x.square()).exp();
    t.grad_target(a).array() += t.upstream(id).array() * (cdf + x * pdf);
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& in = value(x);
  const Eigen::Index n = in.cols();
  check(value(gain).rows() == 1 && value(gain).cols() == n, "layer_norm gain shape");
  check(value(bias).rows() == 1 && value(bias).cols() == n, "layer_norm bias shape");
  Eigen::VectorXd mean = in.rowwise().mean();
  Matrix centered = in.colwise() - mean;
  Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt().matrix();
  Matrix normed = centered.array().colwise() * inv_std.array();
  Matrix out = (normed.array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
  return push(std::move(out), any_requires({x, gain, bias}),
              [x, gain, bias, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t, std::size_t id) {
                const Matrix& g = t.upstream(id);
                if (t.requires_grad(gain)) t.grad_target(gain) += (g.array() * normed.array()).colwise().sum().matrix();
                if (t.requires_grad(bias)) t.grad_target(bias) += g.colwise().sum();
                if (t.requires_grad(x)) {
                  const double n = static_cast<double>(g.cols());
                  Matrix gy = g.array().rowwise() * t.value(gain).row(0).array();
                  Eigen::VectorXd mean_gy = gy.rowwise().sum() / n;
                  Eigen::VectorXd mean_gy_norm = (gy.array() * normed.array()).rowwise().sum().matrix() / n;
                  Matrix dx = gy.colwise() - mean_gy;
                  dx -= (normed.array().colwise() * mean_gy_norm.array()).matrix();
                  t.grad_target(x) += (dx.array().colwise() * inv_std.array()).matrix();
                }
              });
}

Var Tape::masked_softmax(Var a, std::span<const char> key_mask) {
  const Matrix& in = value(a);
  check(static_cast<Eigen::Index>(key_mask.size()) == in.cols(), "softmax mask length");
  Matrix out = Matrix::Zero(in.rows(), in.cols());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < in.cols(); ++c)
      if (key_mask[static_cast<std::size_t>(c)]) peak = std::max(peak, in(r, c));
    double total = 0.0;
    for (Eigen::Index c = 0; c < in.cols(); ++c) {
      if (!key_mask[static_cast<std::size_t>(c)]) continue;
      out(r, c) = std::exp(in(r, c) - peak);
      total += out(r, c);
    }
    if (total > 0.0) out.row(r) /= total;
  }
  return push(std::move(out), any_requires({a}), [a](Tape& t, std::size_t id) {
    const Matrix& p = t.nodes_[id].value;
    const Matrix& g = t.upstream(id);
    Eigen::VectorXd dot = (g.array() * p.array()).rowwise().sum();
    t.grad_target(a).array() += p.array() * (g.colwise() - dot).array();
  });
}

Var Tape::mask_multiply(Var a, const Matrix& mask) {
  check(mask.rows() == value(a).rows() && mask.cols() == value(a).cols(), "mask shape");
  Matrix out = value(a).cwiseProduct(mask);
  return push(std::move(out), any_requires({a}), [a, mask](Tape& t, std::size_t id) {
    t.grad_target(a) += t.upstream(id).cwiseProduct(mask);
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  check(!parts.empty(), "concat of nothing");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool needs = false;
  for (Var p : parts) {
    check(value(p).rows() == rows, "concat row mismatch");
    cols += value(p).cols();
    needs = needs || requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return push(std::move(out), needs, [saved](Tape& t, std::size_t id) {
    const Matrix& g = t.upstream(id);
    Eigen::Index at = 0;
    for (Var p : saved) {
      const Eigen::Index w = t.value(p).cols();
      if (t.requires_grad(p)) t.grad_target(p) += g.middleCols(at, w);
      at += w;
    }
  });
}

Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  check(start >= 0 && start + count <= value(a).cols(), "slice out of range");
  Matrix out = value(a).middleCols(start, count);
  return push(std::move(out), any_requires({a}), [a, start, count](Tape& t, std::size_t id) {
    t.grad_target(a).middleCols(start, count) += t.upstream(id);
  });
}

Var Tape::gather_rows(Var table, std::span<const int> rows) {
  const Matrix& tab = value(table);
  Matrix out(static_cast<Eigen::Index>(rows.size()), tab.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    check(rows[i] >= 0 && rows[i] < tab.rows(), "gather index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tab.row(rows[i]);
  }
  std::vector<int> saved(rows.begin(), rows.end());
  return push(std::move(out), any_requires({table}), [table, saved](Tape& t, std::size_t id) {
    const Matrix& g = t.upstream(id);
    Matrix& target = t.grad_target(table);
    for (std::size_t i = 0; i < saved.size(); ++i) target.row(saved[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var Tape::row(Var a, Eigen::Index r) {
  check(r >= 0 && r < value(a).rows(), "row out of range");
  Matrix out = value(a).row(r);
  return push(std::move(out), any_requires({a}), [a, r](Tape& t, std::size_t id) {
    t.grad_target(a).row(r) += t.upstream(id).row(0);
  });
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(std::move(out), any_requires({a}), [a](Tape& t, std::size_t id) {
    t.grad_target(a).array() += t.upstream(id)(0, 0);
  });
}

void Tape::backward(Var out, const Matrix& seed) {
  check(seed.rows() == value(out).rows() && seed.cols() == value(out).cols(), "seed shape");
  if (!requires_grad(out)) return;
  grad_target(out) += seed;
  for (std::size_t id = out.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.has_grad || !n.backward) continue;
    n.backward(*this, id);
  }
}

void Tape::backward(Var out) {
  backward(out, Matrix::Ones(value(out).rows(), value(out).cols()));
}

}  // namespace trisk::ad
