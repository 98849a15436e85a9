#pragma once

#include <vector>

#include <Eigen/Core>

#include "mora/error.hpp"
#include "mora/tensor.hpp"

namespace mora {

struct LabelScores {
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  double macro_f1 = 0;
};

/// Per-label precision, recall and F1 of binary predictions (rows are samples,
/// columns labels). Every 0/0 ratio is taken as 0, so a label that is never
/// predicted and never true scores F1 = 0.
template <typename DerivedP, typename DerivedT>
LabelScores label_scores(const Eigen::MatrixBase<DerivedP>& preds, const Eigen::MatrixBase<DerivedT>& truth) {
  if (preds.rows() != truth.rows() || preds.cols() != truth.cols())
    throw ContractError("label_scores: predictions " + shape_string(preds.rows(), preds.cols()) +
                        " vs truth " + shape_string(truth.rows(), truth.cols()));
  LabelScores out;
  const Index labels = preds.cols();
  out.precision.resize(static_cast<std::size_t>(labels));
  out.recall.resize(static_cast<std::size_t>(labels));
  out.f1.resize(static_cast<std::size_t>(labels));
  auto ratio = [](double num, double den) { return den == 0 ? 0.0 : num / den; };
  double total = 0;
  for (Index l = 0; l < labels; ++l) {
    double tp = 0, fp = 0, fn = 0;
    for (Index i = 0; i < preds.rows(); ++i) {
      const bool p = preds(i, l) != 0;
      const bool t = truth(i, l) != 0;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    const double precision = ratio(tp, tp + fp);
    const double recall = ratio(tp, tp + fn);
    const auto k = static_cast<std::size_t>(l);
    out.precision[k] = precision;
    out.recall[k] = recall;
    out.f1[k] = ratio(2 * precision * recall, precision + recall);
    total += out.f1[k];
  }
  out.macro_f1 = labels == 0 ? 0.0 : total / static_cast<double>(labels);
  return out;
}

/// Unweighted mean over labels of per-label F1.
template <typename DerivedP, typename DerivedT>
double f1_macro(const Eigen::MatrixBase<DerivedP>& preds, const Eigen::MatrixBase<DerivedT>& truth) {
  return label_scores(preds, truth).macro_f1;
}

/// Sample mean and (n−1) standard deviation; std is 0 for fewer than two values.
struct MeanStd {
  double mean = 0;
  double std = 0;
};
MeanStd mean_std(const std::vector<double>& values);

}  // namespace mora
