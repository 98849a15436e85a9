#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mora/config.hpp"
#include "mora/model.hpp"

namespace mora {

/// One (seed, train spec, test spec) evaluation.
struct RunCell {
  std::uint64_t seed = 0;
  MissingSpec train;
  MissingSpec test;
  double macro_f1 = 0;
  int best_epoch = 0;
  int epochs_run = 0;
};

struct CellSummary {
  MissingSpec train;
  MissingSpec test;
  double mean_f1 = 0;
  double std_f1 = 0;
  std::size_t n = 0;
};

/// One trained configuration (a rank, a block set, or the base config).
struct RunVariant {
  std::string label;
  AdapterKind method = AdapterKind::mora;
  Index rank = 0;
  std::vector<int> blocks;
  ParamCounts params;
  std::vector<RunCell> cells;
  std::vector<CellSummary> summary;
  /// Per-seed, per-epoch mean training loss, keyed by cell order of training.
  std::vector<std::vector<double>> epoch_train_loss;
};

struct RunReport {
  std::string command;
  std::string spec_hash;
  nlohmann::json config;
  std::vector<std::uint64_t> seeds;
  std::vector<RunVariant> variants;
  double wall_clock_seconds = 0;

  std::size_t models_trained = 0;
};

/// Effective seeds for a run: overrides the config when `cli_seeds` is set.
struct RunOptions {
  std::filesystem::path out_dir;
  std::vector<std::uint64_t> seeds;  // empty: use the config's
  std::optional<AdapterKind> method;  // unset: use the config's
  bool write_checkpoints = true;
};

/// Everything one seed produces for one training configuration.
struct SeedRun {
  std::vector<double> test_macro_f1;  // aligned with the test specs
  MetricsReport train_report;
  Checkpoint checkpoint;              // full model state after training
  ParamCounts params;
};

/// Builds data for `seed`, applies the train spec to train/val and each test
/// spec to the test split, trains from a freshly frozen encoder, and evaluates.
SeedRun run_seed(const ExperimentSpec& spec, const ModelConfig& model_cfg, const MissingSpec& train_spec,
                 const std::vector<MissingSpec>& test_specs, std::uint64_t seed);

/// Train/val/test datasets for one seed before any missing spec is applied.
DatasetSplits seed_splits(const ExperimentSpec& spec, std::uint64_t seed);

RunReport cmd_train(const ExperimentSpec& spec, const RunOptions& opts);
RunReport cmd_sweep_missing(const ExperimentSpec& spec, const RunOptions& opts);
RunReport cmd_ablate_rank(const ExperimentSpec& spec, const RunOptions& opts);
RunReport cmd_ablate_blocks(const ExperimentSpec& spec, const RunOptions& opts);

/// Merges every report.json under run_dir into `out_dir/summary.csv` and
/// `out_dir/fig2_series.csv`. Returns the number of reports merged.
std::size_t cmd_report(const std::filesystem::path& run_dir, const std::filesystem::path& out_dir);

nlohmann::json to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& doc);

/// Report JSON with the wall-clock field removed, for determinism checks.
std::string stable_report_text(const RunReport& report);

}  // namespace mora
