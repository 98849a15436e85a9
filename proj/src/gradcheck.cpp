#include "mora/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mora {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  Graph g(false);
  return f(g, x).item();
}

}  // namespace

double finite_diff_check(const ScalarFn& f, Tensor x, double h) {
  if (!(h > 0)) throw ContractError("finite_diff_check: step must be positive");
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();

  Matrix analytic = Matrix::Zero(x.rows(), x.cols());
  {
    Graph g;
    Tensor y = f(g, x);
    if (y.size() != 1) throw ContractError("finite_diff_check: function is not scalar-valued");
    if (y.requires_grad()) {
      g.backward(y);
      analytic = x.grad();
    }
  }

  double worst = 0;
  Matrix& v = x.mutable_value();
  for (Index i = 0; i < v.size(); ++i) {
    const double saved = v.data()[i];
    v.data()[i] = saved + h;
    const double up = evaluate(f, x);
    v.data()[i] = saved - h;
    const double down = evaluate(f, x);
    v.data()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }

  x.zero_grad();
  x.set_requires_grad(had_grad);
  return worst;
}

}  // namespace mora
