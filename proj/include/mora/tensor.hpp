#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mora/error.hpp"

namespace mora {

using Index = Eigen::Index;

/// Row-major dense matrix, the storage of every tensor in the library.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;

std::string shape_string(Index rows, Index cols);

/// Dense rank-2 tensor handle. Vectors are stored as 1×n rows and scalars as
/// 1×1. Copies share the underlying node, so a parameter held by a model and
/// the same parameter seen by an optimizer are one object; use clone() for a
/// deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return static_cast<bool>(node_); }

  Index rows() const { return node().value.rows(); }
  Index cols() const { return node().value.cols(); }
  Index size() const { return node().value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }

  const Matrix& value() const { return node().value; }
  double item() const;

  /// In-place write access for optimizers and finite differencing.
  Matrix& mutable_value() { return node().value; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool flag);

  /// Same-shape accumulator. Present (allocated) only when requires_grad.
  bool has_grad() const { return node().grad.size() == node().value.size() && node().grad.size() > 0; }
  const Matrix& grad() const;
  void zero_grad();

  Tensor clone() const;

  const void* id() const noexcept { return node_.get(); }

 private:
  friend class Graph;

  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool is_leaf = true;
  };

  Node& node() const;
  void accumulate(const Matrix& g) const;

  std::shared_ptr<Node> node_;
};

/// Eager NaN/Inf check; `where` names the operation for the error message.
void check_finite(const Matrix& m, const char* where);

/// Tape of executed operations. Operations whose inputs need no gradient are
/// evaluated but not recorded. A Graph is single-threaded.
class Graph {
 public:
  using BackwardFn = std::function<void(const Matrix& grad_out)>;

  /// With record=false the graph never stores operations (inference mode).
  explicit Graph(bool record = true) : record_(record) {}

  /// Wraps `value` as the output of an operation on `inputs`. The backward
  /// rule receives d(loss)/d(output) and must route it to the inputs through
  /// Graph::accumulate.
  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn backward,
                const char* name);
  Tensor record(Matrix value, std::vector<Tensor> inputs, BackwardFn backward, const char* name);

  /// Adds `g` to the gradient of `t` when t participates in differentiation.
  static void accumulate(const Tensor& t, const Matrix& g);

  /// Reverse sweep from a scalar loss. Intermediate gradients are reset at the
  /// start of each call; leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return ops_.size(); }
  bool recording() const noexcept { return record_; }
  void clear() { ops_.clear(); }

 private:
  struct Op {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Op> ops_;
};

// Differentiable operations. Each validates shapes (DimensionError) and the
// finiteness of its result (NumericError).

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
/// a · bᵀ without materializing the transpose.
Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b);
Tensor transpose(Graph& g, const Tensor& a);
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, double s);
/// Adds a 1×n row to every row of an m×n tensor.
Tensor add_row(Graph& g, const Tensor& a, const Tensor& row);
/// x · Wᵀ + bias, with W stored as [out×in] and bias as 1×out (may be undefined).
Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor sum(Graph& g, const Tensor& a);
Tensor mean(Graph& g, const Tensor& a);
Tensor slice_cols(Graph& g, const Tensor& a, Index start, Index count);
Tensor slice_rows(Graph& g, const Tensor& a, Index start, Index count);
Tensor concat_cols(Graph& g, std::span<const Tensor> parts);
Tensor concat_rows(Graph& g, std::span<const Tensor> parts);

Tensor softmax_rows(Graph& g, const Tensor& a);
Tensor layer_norm(Graph& g, const Tensor& a, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(Graph& g, const Tensor& a);
/// Mean over all entries of the per-label binary cross-entropy, computed in the
/// max(z,0) − z·y + log1p(exp(−|z|)) form. Targets must be exactly 0 or 1.
Tensor bce_with_logits(Graph& g, const Tensor& logits, const Tensor& targets);

/// tanh-approximation GELU on a plain scalar.
double gelu_scalar(double x);
double sigmoid(double x);

void backward(const Tensor& loss, Graph& graph);

}  // namespace mora
