#include "mora/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mora/random.hpp"

namespace mora {

void TrainConfig::validate() const {
  if (!(max_lr > 0)) throw ConfigError("train.max_lr must be positive");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be at least 1");
  if (patience < 1) throw ConfigError("train.patience must be at least 1");
  if (!(warmup_fraction > 0 && warmup_fraction < 1)) throw ConfigError("train.warmup_fraction must lie in (0, 1)");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
}

long warmup_steps(long total_steps, const TrainConfig& cfg) {
  // The small offset keeps products like 0.02·100 = 2.0000000000000004 from rounding up.
  const auto w = static_cast<long>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps) - 1e-9));
  return std::clamp(w, 1L, std::max(1L, total_steps));
}

double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw ContractError("lr_at: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  const long warmup = warmup_steps(total_steps, cfg);
  if (step <= warmup) return cfg.max_lr * static_cast<double>(step) / static_cast<double>(warmup);
  return cfg.max_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

OptimizerState init_optimizer_state(std::span<const TrainableParam> params) {
  OptimizerState state;
  for (const TrainableParam& p : params) {
    state.first_moment.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    state.second_moment.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
  }
  return state;
}

void adamw_step(std::span<const TrainableParam> params, OptimizerState& state, double lr, const TrainConfig& cfg) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw ContractError("adamw_step: optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params[i].tensor;
    if (!t.requires_grad()) throw ContractError("adamw_step: parameter without gradient");
    if (state.first_moment[i].rows() != t.rows() || state.first_moment[i].cols() != t.cols())
      throw ContractError("adamw_step: moment shape does not match parameter");
    if (!t.grad().allFinite()) throw NumericError("adamw_step: non-finite gradient");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    const Matrix& g = t.grad();
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    Matrix& p = t.mutable_value();
    if (params[i].decay && cfg.weight_decay != 0) p *= 1.0 - lr * cfg.weight_decay;
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  }
}

std::vector<TrainableParam> trainable_params(const MultimodalEncoder& model) {
  std::vector<TrainableParam> out;
  for (const NamedTensor& p : model.trainable_parameters()) out.push_back({p.tensor, p.decay});
  return out;
}

Tensor batch_loss(Graph& g, const MultimodalEncoder& model, std::span<const Sample* const> batch) {
  if (batch.empty()) throw ContractError("batch_loss: empty batch");
  std::vector<Tensor> logits;
  logits.reserve(batch.size());
  Matrix targets(static_cast<Index>(batch.size()), model.config().num_labels);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    logits.push_back(model.forward(g, *batch[i]));
    if (batch[i]->labels.size() != targets.cols())
      throw DimensionError("sample has " + std::to_string(batch[i]->labels.size()) + " labels, model expects " +
                           std::to_string(targets.cols()));
    targets.row(static_cast<Index>(i)) = batch[i]->labels;
  }
  return bce_with_logits(g, concat_rows(g, logits), Tensor(std::move(targets)));
}

Matrix predict_logits(const MultimodalEncoder& model, const Dataset& ds) {
  Matrix out(static_cast<Index>(ds.size()), model.config().num_labels);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Graph g(false);
    out.row(static_cast<Index>(i)) = model.forward(g, ds.samples[i]).value().row(0);
  }
  return out;
}

double dataset_loss(const MultimodalEncoder& model, const Dataset& ds) {
  if (ds.empty()) throw ContractError("dataset_loss: empty dataset");
  std::vector<const Sample*> all;
  for (const Sample& s : ds.samples) all.push_back(&s);
  Graph g(false);
  return batch_loss(g, model, all).item();
}

MetricsReport evaluate(const MultimodalEncoder& model, const Dataset& ds, double threshold) {
  MetricsReport report;
  if (ds.empty()) return report;
  const Matrix logits = predict_logits(model, ds);
  Matrix truth(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.samples[i].labels.size() != logits.cols())
      throw DimensionError("evaluate: label width does not match model output");
    truth.row(static_cast<Index>(i)) = ds.samples[i].labels;
  }
  const Matrix preds = logits.unaryExpr([threshold](double z) { return sigmoid(z) >= threshold ? 1.0 : 0.0; });
  LabelScores scores = label_scores(preds, truth);
  report.precision = std::move(scores.precision);
  report.recall = std::move(scores.recall);
  report.f1 = std::move(scores.f1);
  report.macro_f1 = scores.macro_f1;
  Graph g(false);
  report.loss = bce_with_logits(g, Tensor(logits), Tensor(truth)).item();
  return report;
}

TrainResult train(MultimodalEncoder& model, const Dataset& train_ds, const Dataset& val_ds, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (train_ds.empty()) throw ConfigError("train: training set is empty");
  if (val_ds.empty() && !hooks.validation_score) throw ConfigError("train: validation set is empty");
  if (!model.backbone_frozen()) throw ContractError("train: backbone must be frozen before fine-tuning");

  std::vector<TrainableParam> params = trainable_params(model);
  if (params.empty()) throw ContractError("train: model has no trainable tensors");
  OptimizerState state = init_optimizer_state(params);

  const auto n = train_ds.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + batch - 1) / batch);
  const long total_steps = steps_per_epoch * cfg.max_epochs;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));

  TrainResult result;
  MetricsReport& report = result.report;
  double best = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  long step = 0;
  std::vector<const Sample*> members;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      members.clear();
      for (std::size_t i = start; i < std::min(n, start + batch); ++i) members.push_back(&train_ds.samples[order[i]]);
      for (TrainableParam& p : params) p.tensor.zero_grad();
      Graph g;
      Tensor loss = batch_loss(g, model, members);
      g.backward(loss);
      ++step;
      adamw_step(params, state, lr_at(step, total_steps, cfg), cfg);
      report.step_loss.push_back(loss.item());
      epoch_loss += loss.item();
      if (hooks.on_step) hooks.on_step(step, loss.item());
    }
    report.epoch_train_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));

    const double score =
        hooks.validation_score ? hooks.validation_score(model, epoch) : evaluate(model, val_ds).macro_f1;
    report.epoch_val_macro_f1.push_back(score);
    report.epochs_run = epoch;
    if (score > best) {
      best = score;
      report.best_epoch = epoch;
      result.best = model.state(true);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  for (TrainableParam& p : params) p.tensor.zero_grad();
  model.load_state(result.best);
  if (!val_ds.empty()) {
    const MetricsReport val = evaluate(model, val_ds);
    report.precision = val.precision;
    report.recall = val.recall;
    report.f1 = val.f1;
    report.macro_f1 = val.macro_f1;
    report.loss = val.loss;
  }
  return result;
}

}  // namespace mora
