#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mora/data.hpp"
#include "mora/model.hpp"
#include "mora/training.hpp"

namespace mora {

/// Grid axes for the sweep commands.
struct SweepConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<MissingSpec> train_specs;  // sweep-missing; empty means {missing.train}
  std::vector<double> etas;              // extra symmetric test specs, a = 1 − eta/2
  std::vector<Index> ranks;              // ablate-rank; empty means {1, 2, 4, 16, d}
  std::vector<std::vector<int>> block_sets;  // ablate-blocks; empty means {{0}, {0,1}, {last}}
};

struct ExperimentSpec {
  ModelConfig model;  // model.adapter.kind is the method
  TrainConfig train;
  SyntheticTaskSpec task;  // num_labels and vocab_size follow the model
  std::size_t n_samples = 600;
  std::array<double, 3> split{0.6, 0.2, 0.2};
  MissingSpec train_missing{0.65, 0.65, 0};
  std::vector<MissingSpec> test_missing{{0.65, 0.65, 0}};
  SweepConfig sweep;

  /// Throws ConfigError on the first violated invariant.
  void validate() const;
};

/// Parses the sectioned JSON config. Unknown keys and wrong types raise
/// ParseError naming the field path (e.g. "model.hidden_dim").
ExperimentSpec parse_experiment(const nlohmann::json& doc);
ExperimentSpec load_experiment(const std::filesystem::path& path);

/// Canonical JSON form with every field explicit.
nlohmann::json to_json(const ExperimentSpec& spec);

/// Hex FNV-1a of the canonical JSON.
std::string spec_hash(const ExperimentSpec& spec);

/// Parses "1,2,3".
std::vector<std::uint64_t> parse_seed_list(const std::string& csv);

}  // namespace mora
