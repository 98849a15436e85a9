#pragma once

#include <functional>

#include "mora/tensor.hpp"

namespace mora {

/// Scalar-valued function of one tensor, built on the supplied graph.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

/// Compares the reverse-mode gradient of f at x against central differences
/// with step h. Returns max over coordinates of
///   |analytic − numeric| / max(1, |analytic|, |numeric|).
/// x is perturbed in place and restored; its gradient is left zeroed. Closures
/// that capture x (e.g. a model parameter) see the perturbation too.
double finite_diff_check(const ScalarFn& f, Tensor x, double h = 1e-5);

}  // namespace mora
