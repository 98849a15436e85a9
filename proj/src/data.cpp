#include "mora/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mora/random.hpp"

namespace mora {

using nlohmann::json;

std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& fractions) {
  std::vector<std::size_t> counts(fractions.size(), 0);
  std::vector<double> remainders(fractions.size(), 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = std::max(0.0, fractions[i]) * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainders[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(fractions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
  for (std::size_t k = 0; assigned < n && !order.empty(); ++k, ++assigned) counts[order[k % order.size()]] += 1;
  while (assigned > n) {
    // Only reachable if the fractions sum above 1 by more than rounding.
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  return counts;
}

Dataset generate_synthetic(const SyntheticTaskSpec& task, const SampleShape& shape, std::size_t n) {
  if (n < 1) throw ConfigError("generate_synthetic: n must be at least 1");
  if (task.num_labels < 1) throw ConfigError("task.num_labels must be at least 1");
  if (task.vocab_size < 2) throw ConfigError("task.vocab_size must be at least 2 (id 0 is padding)");
  if (task.s_img < 0 || task.s_txt < 0) throw ConfigError("task signal strengths must be non-negative");
  if (task.noise < 0) throw ConfigError("task.noise must be non-negative");
  if (shape.patches < 1 || shape.patch_dim < 1 || shape.text_len < 1)
    throw ConfigError("sample shape extents must be positive");
  std::vector<double> prevalence = task.prevalence;
  if (prevalence.empty()) prevalence.assign(static_cast<std::size_t>(task.num_labels), 0.3);
  if (static_cast<Index>(prevalence.size()) != task.num_labels)
    throw ConfigError("task.prevalence has " + std::to_string(prevalence.size()) + " entries for " +
                      std::to_string(task.num_labels) + " labels");
  for (double p : prevalence)
    if (!(p > 0 && p < 1)) throw ConfigError("task.prevalence entries must lie in (0, 1)");

  const Index L = task.num_labels;
  const Index P = shape.patches;
  const Index D = shape.patch_dim;
  const Index V = task.vocab_size - 1;  // non-pad ids

  Rng structure_rng(derive_seed(task.seed, "task.structure"));
  // directions[l] is [P×D] with unit-norm rows
  std::vector<Matrix> directions(static_cast<std::size_t>(L), Matrix(P, D));
  for (Matrix& u : directions) {
    fill_normal(u, structure_rng, 1.0);
    u.rowwise().normalize();
  }
  Matrix tilts(L, V);
  fill_normal(tilts, structure_rng, 1.0);

  Rng rng(derive_seed(task.seed, "task.samples"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  Dataset ds;
  ds.shape = shape;
  ds.num_labels = L;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.labels = RowVector::Zero(L);
    for (Index l = 0; l < L; ++l) s.labels(l) = uniform(rng) < prevalence[static_cast<std::size_t>(l)] ? 1.0 : 0.0;

    s.image = Matrix::Zero(P, D);
    for (Index l = 0; l < L; ++l)
      if (s.labels(l) == 1.0) s.image += task.s_img * directions[static_cast<std::size_t>(l)];
    for (Index k = 0; k < s.image.size(); ++k) s.image.data()[k] += task.noise * normal(rng);

    RowVector logits = task.s_txt * (s.labels * tilts);
    logits.array() -= logits.maxCoeff();
    std::vector<double> weights(logits.data(), logits.data() + V);
    for (double& w : weights) w = std::exp(w);
    std::discrete_distribution<int> tokens(weights.begin(), weights.end());
    s.text.resize(static_cast<std::size_t>(shape.text_len));
    for (int& t : s.text) t = 1 + tokens(rng);

    s.pattern = MissingPattern::complete();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

MissingSpec missing_spec_for_eta(double eta, std::uint64_t seed) {
  if (!(eta >= 0 && eta <= 1)) throw ConfigError("total missing rate must lie in [0, 1]");
  const double a = 1.0 - eta / 2.0;
  return MissingSpec{a, a, seed};
}

double PatternCounts::missing_rate() const {
  const std::size_t n = total();
  return n == 0 ? 0.0 : static_cast<double>(image_only + text_only) / static_cast<double>(n);
}

PatternCounts count_patterns(const Dataset& ds) {
  PatternCounts c;
  for (const Sample& s : ds.samples) {
    if (s.pattern.is_complete())
      ++c.complete;
    else if (s.pattern == MissingPattern::image_only())
      ++c.image_only;
    else if (s.pattern == MissingPattern::text_only())
      ++c.text_only;
  }
  return c;
}

namespace {

void validate(const MissingSpec& spec) {
  if (!(spec.avail_img > 0 && spec.avail_img <= 1) || !(spec.avail_txt > 0 && spec.avail_txt <= 1))
    throw ConfigError("availability rates must lie in (0, 1]");
  if (spec.avail_img + spec.avail_txt < 1.0 - 1e-12)
    throw ConfigError("infeasible missing spec: avail_img + avail_txt = " +
                      std::to_string(spec.avail_img + spec.avail_txt) + " < 1 would leave samples with no modality");
}

}  // namespace

PatternCounts pattern_counts_for(const MissingSpec& spec, std::size_t n) {
  validate(spec);
  const auto counts = apportion(
      n, {spec.avail_img + spec.avail_txt - 1.0, 1.0 - spec.avail_txt, 1.0 - spec.avail_img});
  return PatternCounts{counts[0], counts[1], counts[2]};
}

void install_dummies(Sample& s, const SampleShape& shape) {
  if (!s.pattern.has(Modality::image)) s.image = Matrix::Zero(shape.patches, shape.patch_dim);
  if (!s.pattern.has(Modality::text)) s.text.assign(static_cast<std::size_t>(shape.text_len), kPadToken);
}

Dataset apply_missing(const Dataset& ds, const MissingSpec& spec) {
  const PatternCounts counts = pattern_counts_for(spec, ds.size());
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(spec.seed, "missing"));
  std::shuffle(order.begin(), order.end(), rng);

  Dataset out = ds;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    Sample& s = out.samples[order[rank]];
    if (rank < counts.complete)
      s.pattern = MissingPattern::complete();
    else if (rank < counts.complete + counts.image_only)
      s.pattern = MissingPattern::image_only();
    else
      s.pattern = MissingPattern::text_only();
    install_dummies(s, out.shape);
  }
  return out;
}

DatasetSplits split(const Dataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (!(f >= 0 && f <= 1)) throw ConfigError("split fractions must lie in [0, 1]");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");

  std::array<std::vector<std::size_t>, 4> groups;
  for (std::size_t i = 0; i < ds.size(); ++i) groups[ds.samples[i].pattern.bits() & 0b11].push_back(i);

  std::array<std::vector<std::size_t>, 3> members;
  Rng rng(derive_seed(seed, "split"));
  for (auto& group : groups) {
    std::shuffle(group.begin(), group.end(), rng);
    const auto counts = apportion(group.size(), {fractions[0], fractions[1], fractions[2]});
    std::size_t at = 0;
    for (std::size_t part = 0; part < 3; ++part)
      for (std::size_t k = 0; k < counts[part]; ++k) members[part].push_back(group[at++]);
  }

  auto build = [&](std::vector<std::size_t>& idx) {
    std::sort(idx.begin(), idx.end());
    Dataset out;
    out.shape = ds.shape;
    out.num_labels = ds.num_labels;
    out.samples.reserve(idx.size());
    for (std::size_t i : idx) out.samples.push_back(ds.samples[i]);
    return out;
  };
  return DatasetSplits{build(members[0]), build(members[1]), build(members[2])};
}

Dataset load_jsonl(const std::filesystem::path& path, const SampleShape& shape) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  Dataset ds;
  ds.shape = shape;
  std::string line;
  std::size_t line_no = 0;
  const std::string where = path.string() + ":";
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string at = where + std::to_string(line_no) + ": ";
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw IngestionError(at + "malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw IngestionError(at + "expected a JSON object");
    for (const auto& [key, _] : obj.items())
      if (key != "image" && key != "text" && key != "labels") throw IngestionError(at + "unknown field '" + key + "'");
    if (!obj.contains("labels") || !obj["labels"].is_array()) throw IngestionError(at + "missing labels array");

    Sample s;
    s.pattern = MissingPattern::complete();
    const json& image = obj.contains("image") ? obj["image"] : json(nullptr);
    const json& text = obj.contains("text") ? obj["text"] : json(nullptr);
    if (image.is_null() && text.is_null()) throw IngestionError(at + "both modalities are null");

    if (image.is_null()) {
      s.pattern = s.pattern.with(Modality::image, false);
    } else {
      if (!image.is_array() || static_cast<Index>(image.size()) != shape.patches * shape.patch_dim)
        throw IngestionError(at + "image must be an array of " + std::to_string(shape.patches * shape.patch_dim) +
                             " numbers");
      s.image.resize(shape.patches, shape.patch_dim);
      for (std::size_t k = 0; k < image.size(); ++k) {
        if (!image[k].is_number()) throw IngestionError(at + "image entry " + std::to_string(k) + " is not a number");
        s.image.data()[k] = image[k].get<double>();
      }
      if (!s.image.allFinite()) throw IngestionError(at + "image contains non-finite values");
    }

    if (text.is_null()) {
      s.pattern = s.pattern.with(Modality::text, false);
    } else {
      if (!text.is_array() || static_cast<Index>(text.size()) > shape.text_len)
        throw IngestionError(at + "text must be an array of at most " + std::to_string(shape.text_len) + " ids");
      for (const json& t : text) {
        if (!t.is_number_integer() || t.get<long long>() < 0)
          throw IngestionError(at + "text ids must be non-negative integers");
        s.text.push_back(t.get<int>());
      }
      s.text.resize(static_cast<std::size_t>(shape.text_len), kPadToken);
    }

    const json& labels = obj["labels"];
    if (ds.num_labels == 0) ds.num_labels = static_cast<Index>(labels.size());
    if (static_cast<Index>(labels.size()) != ds.num_labels || labels.empty())
      throw IngestionError(at + "expected " + std::to_string(ds.num_labels) + " labels, got " +
                           std::to_string(labels.size()));
    s.labels = RowVector::Zero(ds.num_labels);
    for (std::size_t l = 0; l < labels.size(); ++l) {
      if (!labels[l].is_number_integer() || (labels[l].get<long long>() != 0 && labels[l].get<long long>() != 1))
        throw IngestionError(at + "label " + std::to_string(l) + " is " + labels[l].dump() + ", expected 0 or 1");
      s.labels(static_cast<Index>(l)) = static_cast<double>(labels[l].get<int>());
    }

    install_dummies(s, shape);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_jsonl(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const Sample& s : ds.samples) {
    json obj;
    if (s.pattern.has(Modality::image))
      obj["image"] = std::vector<double>(s.image.data(), s.image.data() + s.image.size());
    else
      obj["image"] = nullptr;
    if (s.pattern.has(Modality::text))
      obj["text"] = s.text;
    else
      obj["text"] = nullptr;
    std::vector<int> labels(static_cast<std::size_t>(s.labels.size()));
    for (Index l = 0; l < s.labels.size(); ++l) labels[static_cast<std::size_t>(l)] = static_cast<int>(s.labels(l));
    obj["labels"] = labels;
    os << obj.dump() << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace mora
