#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mora/checkpoint.hpp"
#include "mora/data.hpp"
#include "mora/metrics.hpp"
#include "mora/model.hpp"

namespace mora {

struct TrainConfig {
  double max_lr = 5e-3;
  double weight_decay = 2e-2;
  Index batch_size = 4;
  int max_epochs = 40;
  int patience = 5;
  double warmup_fraction = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// ceil(warmup_fraction · total_steps), at least 1.
long warmup_steps(long total_steps, const TrainConfig& cfg);

/// Linear ramp 0 → max_lr over the warmup steps, then linear decay to 0 at
/// total_steps. Throws ContractError for step outside [0, total_steps].
double lr_at(long step, long total_steps, const TrainConfig& cfg);

struct TrainableParam {
  Tensor tensor;
  bool decay = false;
};

struct OptimizerState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long step = 0;
};

OptimizerState init_optimizer_state(std::span<const TrainableParam> params);

/// One AdamW update with bias correction. Decoupled weight decay multiplies a
/// parameter by (1 − lr·weight_decay) before the Adam step, and only for
/// params flagged `decay`. Gradients are read from each tensor; a non-finite
/// gradient aborts the step before anything is modified.
void adamw_step(std::span<const TrainableParam> params, OptimizerState& state, double lr, const TrainConfig& cfg);

struct MetricsReport {
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  double macro_f1 = 0;
  double loss = 0;

  // Filled by train().
  std::vector<double> step_loss;
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_macro_f1;
  int best_epoch = 0;  // 1-based
  int epochs_run = 0;
};

struct TrainHooks {
  /// Replaces validation macro-F1 as the early-stopping score when set.
  std::function<double(const MultimodalEncoder&, int epoch)> validation_score;
  /// Called after every optimizer step with the 1-based step and batch loss.
  std::function<void(long step, double loss)> on_step;
};

struct TrainResult {
  Checkpoint best;  // trainable tensors at the best validation epoch
  MetricsReport report;
};

/// Mean BCE over a batch of samples, each forwarded with its own pattern.
Tensor batch_loss(Graph& g, const MultimodalEncoder& model, std::span<const Sample* const> batch);

/// Fine-tunes the trainable tensors with shuffled mini-batches, the warmup /
/// linear-decay schedule and AdamW, evaluating validation macro-F1 after each
/// epoch. Stops after `patience` epochs without strict improvement. The best
/// epoch's state is loaded back into `model` before returning.
TrainResult train(MultimodalEncoder& model, const Dataset& train_ds, const Dataset& val_ds, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// [n×L] logits.
Matrix predict_logits(const MultimodalEncoder& model, const Dataset& ds);

/// Binary predictions sigmoid(logit) ≥ threshold scored against the labels.
MetricsReport evaluate(const MultimodalEncoder& model, const Dataset& ds, double threshold = 0.5);

/// Mean BCE over the whole dataset.
double dataset_loss(const MultimodalEncoder& model, const Dataset& ds);

std::vector<TrainableParam> trainable_params(const MultimodalEncoder& model);

}  // namespace mora
