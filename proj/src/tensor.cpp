#include "mora/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace mora {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << rows << "x" << cols << ']';
  return os.str();
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  check_finite(value, "tensor construction");
  node_->value = std::move(value);
  set_requires_grad(requires_grad);
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return Tensor(std::move(m));
}

Tensor::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(rows(), cols()));
  return value()(0, 0);
}

void Tensor::set_requires_grad(bool flag) {
  Node& n = node();
  n.requires_grad = flag;
  if (flag) {
    if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  } else {
    n.grad.resize(0, 0);
  }
}

const Matrix& Tensor::grad() const {
  if (!requires_grad()) throw ContractError("grad() on a tensor that does not require grad");
  Node& n = node();
  if (n.grad.size() != n.value.size()) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tensor::zero_grad() {
  Node& n = node();
  if (n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
}

Tensor Tensor::clone() const {
  Tensor t(value(), requires_grad());
  return t;
}

void Tensor::accumulate(const Matrix& g) const {
  Node& n = node();
  if (!n.requires_grad) return;
  if (n.grad.size() != n.value.size())
    n.grad = g;
  else
    n.grad += g;
}

void check_finite(const Matrix& m, const char* where) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite value produced by ") + where);
}

Tensor Graph::record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn backward,
                     const char* name) {
  return record(std::move(value), std::vector<Tensor>(inputs), std::move(backward), name);
}

Tensor Graph::record(Matrix value, std::vector<Tensor> inputs, BackwardFn backward,
                     const char* name) {
  check_finite(value, name);
  Tensor out;
  out.node_ = std::make_shared<Tensor::Node>();
  out.node_->value = std::move(value);
  const bool needs_grad =
      record_ && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs_grad) return out;
  out.node_->requires_grad = true;
  out.node_->is_leaf = false;
  ops_.push_back(Op{std::move(inputs), out, std::move(backward)});
  return out;
}

void Graph::accumulate(const Tensor& t, const Matrix& g) { t.accumulate(g); }

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward requires a scalar loss, got " + shape_string(loss.rows(), loss.cols()));
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any trainable tensor");
  const Matrix one = Matrix::Ones(1, 1);
  if (loss.node().is_leaf) {
    loss.accumulate(one);
    return;
  }
  for (Op& op : ops_) op.output.node().grad.resize(0, 0);
  loss.node().grad = one;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    const Matrix& g = it->output.node().grad;
    if (g.size() == 0) continue;
    it->backward(g);
  }
}

void backward(const Tensor& loss, Graph& graph) { graph.backward(loss); }

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                         " vs " + shape_string(b.rows(), b.cols()));
}

}  // namespace

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.rows(), a.cols()) + " · " +
                         shape_string(b.rows(), b.cols()));
  Matrix out = a.value() * b.value();
  return g.record(std::move(out), {a, b},
                  [a, b](const Matrix& go) {
                    if (a.requires_grad()) Graph::accumulate(a, go * b.value().transpose());
                    if (b.requires_grad()) Graph::accumulate(b, a.value().transpose() * go);
                  },
                  "matmul");
}

Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner extents differ, " + shape_string(a.rows(), a.cols()) +
                         " · " + shape_string(b.rows(), b.cols()) + "ᵀ");
  Matrix out = a.value() * b.value().transpose();
  return g.record(std::move(out), {a, b},
                  [a, b](const Matrix& go) {
                    if (a.requires_grad()) Graph::accumulate(a, go * b.value());
                    if (b.requires_grad()) Graph::accumulate(b, go.transpose() * a.value());
                  },
                  "matmul_nt");
}

Tensor transpose(Graph& g, const Tensor& a) {
  Matrix out = a.value().transpose();
  return g.record(std::move(out), {a},
                  [a](const Matrix& go) { Graph::accumulate(a, go.transpose()); }, "transpose");
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return g.record(std::move(out), {a, b},
                  [a, b](const Matrix& go) {
                    Graph::accumulate(a, go);
                    Graph::accumulate(b, go);
                  },
                  "add");
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return g.record(std::move(out), {a, b},
                  [a, b](const Matrix& go) {
                    Graph::accumulate(a, go);
                    if (b.requires_grad()) Graph::accumulate(b, -go);
                  },
                  "sub");
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return g.record(std::move(out), {a, b},
                  [a, b](const Matrix& go) {
                    if (a.requires_grad()) Graph::accumulate(a, go.cwiseProduct(b.value()));
                    if (b.requires_grad()) Graph::accumulate(b, go.cwiseProduct(a.value()));
                  },
                  "mul");
}

Tensor scale(Graph& g, const Tensor& a, double s) {
  Matrix out = a.value() * s;
  return g.record(std::move(out), {a}, [a, s](const Matrix& go) { Graph::accumulate(a, go * s); },
                  "scale");
}

Tensor add_row(Graph& g, const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw DimensionError("add_row: row " + shape_string(row.rows(), row.cols()) +
                         " does not broadcast over " + shape_string(a.rows(), a.cols()));
  Matrix out = a.value().rowwise() + row.value().row(0);
  return g.record(std::move(out), {a, row},
                  [a, row](const Matrix& go) {
                    Graph::accumulate(a, go);
                    if (row.requires_grad()) Graph::accumulate(row, go.colwise().sum());
                  },
                  "add_row");
}

Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.cols() != weight.cols())
    throw DimensionError("linear: input " + shape_string(x.rows(), x.cols()) +
                         " does not match weight " + shape_string(weight.rows(), weight.cols()));
  Matrix out = x.value() * weight.value().transpose();
  if (bias.defined()) {
    if (bias.rows() != 1 || bias.cols() != weight.rows())
      throw DimensionError("linear: bias " + shape_string(bias.rows(), bias.cols()) +
                           " does not match weight " + shape_string(weight.rows(), weight.cols()));
    out.rowwise() += bias.value().row(0);
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return g.record(std::move(out), std::move(inputs),
                  [x, weight, bias](const Matrix& go) {
                    if (x.requires_grad()) Graph::accumulate(x, go * weight.value());
                    if (weight.requires_grad()) Graph::accumulate(weight, go.transpose() * x.value());
                    if (bias.defined() && bias.requires_grad()) Graph::accumulate(bias, go.colwise().sum());
                  },
                  "linear");
}

Tensor sum(Graph& g, const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), {a},
                  [a](const Matrix& go) {
                    Graph::accumulate(a, Matrix::Constant(a.rows(), a.cols(), go(0, 0)));
                  },
                  "sum");
}

Tensor mean(Graph& g, const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty tensor");
  const double n = static_cast<double>(a.size());
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return g.record(std::move(out), {a},
                  [a, n](const Matrix& go) {
                    Graph::accumulate(a, Matrix::Constant(a.rows(), a.cols(), go(0, 0) / n));
                  },
                  "mean");
}

Tensor slice_cols(Graph& g, const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_string(a.rows(), a.cols()));
  Matrix out = a.value().middleCols(start, count);
  return g.record(std::move(out), {a},
                  [a, start, count](const Matrix& go) {
                    Matrix full = Matrix::Zero(a.rows(), a.cols());
                    full.middleCols(start, count) = go;
                    Graph::accumulate(a, full);
                  },
                  "slice_cols");
}

Tensor slice_rows(Graph& g, const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_string(a.rows(), a.cols()));
  Matrix out = a.value().middleRows(start, count);
  return g.record(std::move(out), {a},
                  [a, start, count](const Matrix& go) {
                    Matrix full = Matrix::Zero(a.rows(), a.cols());
                    full.middleRows(start, count) = go;
                    Graph::accumulate(a, full);
                  },
                  "slice_rows");
}

Tensor concat_cols(Graph& g, std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row count " + std::to_string(p.rows()) + " vs " +
                           std::to_string(rows));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Tensor& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return g.record(std::move(out), inputs,
                  [inputs](const Matrix& go) {
                    Index offset = 0;
                    for (const Tensor& p : inputs) {
                      if (p.requires_grad()) Graph::accumulate(p, go.middleCols(offset, p.cols()));
                      offset += p.cols();
                    }
                  },
                  "concat_cols");
}

Tensor concat_rows(Graph& g, std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != cols)
      throw DimensionError("concat_rows: column count " + std::to_string(p.cols()) + " vs " +
                           std::to_string(cols));
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Tensor& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return g.record(std::move(out), inputs,
                  [inputs](const Matrix& go) {
                    Index offset = 0;
                    for (const Tensor& p : inputs) {
                      if (p.requires_grad()) Graph::accumulate(p, go.middleRows(offset, p.rows()));
                      offset += p.rows();
                    }
                  },
                  "concat_rows");
}

Tensor softmax_rows(Graph& g, const Tensor& a) {
  check_finite(a.value(), "softmax_rows input");
  Matrix out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  Matrix y = out;
  return g.record(std::move(out), {a},
                  [a, y](const Matrix& go) {
                    Eigen::VectorXd dots = go.cwiseProduct(y).rowwise().sum();
                    Matrix dx = y.cwiseProduct(go - dots.replicate(1, go.cols()));
                    Graph::accumulate(a, dx);
                  },
                  "softmax_rows");
}

Tensor layer_norm(Graph& g, const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const Index n = a.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw DimensionError("layer_norm: gain " + shape_string(gain.rows(), gain.cols()) + " / bias " +
                         shape_string(bias.rows(), bias.cols()) + " do not match width " +
                         std::to_string(n));
  const Matrix& x = a.value();
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return g.record(std::move(out), {a, gain, bias},
                  [a, gain, bias, xhat, inv_std, n](const Matrix& go) {
                    if (gain.requires_grad())
                      Graph::accumulate(gain, go.cwiseProduct(xhat).colwise().sum());
                    if (bias.requires_grad()) Graph::accumulate(bias, go.colwise().sum());
                    if (!a.requires_grad()) return;
                    Matrix dxhat = go.array().rowwise() * gain.value().row(0).array();
                    Matrix dx(dxhat.rows(), n);
                    const double dn = static_cast<double>(n);
                    for (Index i = 0; i < dxhat.rows(); ++i) {
                      const double s1 = dxhat.row(i).sum();
                      const double s2 = dxhat.row(i).dot(xhat.row(i));
                      dx.row(i) = (inv_std(i) / dn) *
                                  (dn * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2).matrix();
                    }
                    Graph::accumulate(a, dx);
                  },
                  "layer_norm");
}

namespace {

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

double gelu_grad_scalar(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor gelu(Graph& g, const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double v) { return gelu_scalar(v); });
  return g.record(std::move(out), {a},
                  [a](const Matrix& go) {
                    Matrix d = a.value().unaryExpr([](double v) { return gelu_grad_scalar(v); });
                    Graph::accumulate(a, go.cwiseProduct(d));
                  },
                  "gelu");
}

Tensor bce_with_logits(Graph& g, const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  const Matrix& y = targets.value();
  for (Index i = 0; i < y.size(); ++i) {
    const double t = y.data()[i];
    if (t != 0.0 && t != 1.0)
      throw ValidationError("bce_with_logits: target " + std::to_string(t) + " is not 0 or 1");
  }
  const Matrix& z = logits.value();
  const double n = static_cast<double>(z.size());
  double total = 0;
  for (Index i = 0; i < z.size(); ++i) {
    const double zi = z.data()[i];
    total += std::max(zi, 0.0) - zi * y.data()[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  Matrix out(1, 1);
  out(0, 0) = total / n;
  return g.record(std::move(out), {logits, targets},
                  [logits, targets, n](const Matrix& go) {
                    if (!logits.requires_grad()) return;
                    Matrix d = logits.value().unaryExpr([](double v) { return sigmoid(v); }) - targets.value();
                    Graph::accumulate(logits, d * (go(0, 0) / n));
                  },
                  "bce_with_logits");
}

}  // namespace mora
