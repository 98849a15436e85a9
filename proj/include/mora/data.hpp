#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mora/adapters.hpp"
#include "mora/tensor.hpp"

namespace mora {

/// Fixed geometry of one sample: P image patches of patch_dim values each and
/// text_len token ids.
struct SampleShape {
  Index patches = 16;
  Index patch_dim = 8;
  Index text_len = 8;
};

inline constexpr int kPadToken = 0;

struct Sample {
  Matrix image;            // [P×patch_dim]; zeros when image is absent
  std::vector<int> text;   // text_len ids; all kPadToken when text is absent
  MissingPattern pattern = MissingPattern::complete();
  RowVector labels;        // 0/1 per label
};

struct Dataset {
  SampleShape shape;
  Index num_labels = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Generator of a two-modality multi-label task whose labels leave a
/// controllable trace in each modality.
struct SyntheticTaskSpec {
  Index num_labels = 4;
  std::vector<double> prevalence;  // one per label; empty means 0.3 for all
  double s_img = 1.0;              // scale of label-dependent patch means
  double s_txt = 2.0;              // tilt of label-dependent token distributions
  double noise = 1.0;              // patch noise standard deviation
  Index vocab_size = 64;
  std::uint64_t seed = 0;
};

/// Labels ~ Bernoulli(prevalence). Patch p of the image is
///   s_img · Σ_l y_l·u_{l,p} + noise·ε,  ε ~ N(0, I),
/// and each token is drawn from softmax(s_txt · Σ_l y_l·θ_l) over ids
/// 1..vocab_size−1. Directions u and tilts θ are fixed by the seed.
Dataset generate_synthetic(const SyntheticTaskSpec& task, const SampleShape& shape, std::size_t n);

/// Target availability of each modality; their sum must be at least 1 so no
/// sample loses both.
struct MissingSpec {
  double avail_img = 1.0;
  double avail_txt = 1.0;
  std::uint64_t seed = 0;

  double total_missing_rate() const { return 2.0 - avail_img - avail_txt; }
};

/// Symmetric availability with total missing rate eta: a = 1 − eta/2.
MissingSpec missing_spec_for_eta(double eta, std::uint64_t seed = 0);

struct PatternCounts {
  std::size_t complete = 0;
  std::size_t image_only = 0;
  std::size_t text_only = 0;

  std::size_t total() const { return complete + image_only + text_only; }
  double missing_rate() const;
  friend bool operator==(const PatternCounts&, const PatternCounts&) = default;
};

PatternCounts count_patterns(const Dataset& ds);

/// Exact pattern counts for n samples: fractions complete = a_i + a_t − 1,
/// image-only = 1 − a_t, text-only = 1 − a_i, rounded by largest remainder.
PatternCounts pattern_counts_for(const MissingSpec& spec, std::size_t n);

/// Reassigns every sample's pattern per `spec` by a seeded shuffle and
/// installs dummies (zero image, pad text) for absent modalities. Labels and
/// present content are untouched.
Dataset apply_missing(const Dataset& ds, const MissingSpec& spec);

/// Replaces absent-modality content with the dummy for this shape.
void install_dummies(Sample& s, const SampleShape& shape);

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Pattern-stratified, seed-deterministic partition. Fractions must sum to 1.
DatasetSplits split(const Dataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed);

/// JSONL: one object per line, {"image": [flat floats] | null, "text": [ints] | null,
/// "labels": [0/1, ...]}. Null marks an absent modality.
Dataset load_jsonl(const std::filesystem::path& path, const SampleShape& shape);
void write_jsonl(const std::filesystem::path& path, const Dataset& ds);

/// Largest-remainder apportionment of n items by `fractions`.
std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& fractions);

}  // namespace mora
