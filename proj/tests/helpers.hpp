#pragma once

#include <initializer_list>

#include "mora/random.hpp"
#include "mora/tensor.hpp"

namespace mora::testing {

inline Matrix random_matrix(Rng& rng, Index r, Index c, double s = 1.0) {
  Matrix m(r, c);
  fill_normal(m, rng, s);
  return m;
}

// Reduces a tensor to a scalar through fixed random weights so that every
// output coordinate affects the loss.
inline Tensor weighted_sum(Graph& g, const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return sum(g, mul(g, t, Tensor(random_matrix(rng, t.rows(), t.cols()))));
}

inline Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace mora::testing
