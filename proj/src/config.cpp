#include "mora/config.hpp"

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "mora/random.hpp"

namespace mora {

using nlohmann::json;

namespace {

/// Typed access to one JSON object; remembers which keys were consumed so the
/// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ParseError(path_ + ": expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& raw(const std::string& key) { return (seen_.insert(key), obj_.at(key)); }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(obj_.at(key), at(key));
  }

  void finish() const {
    for (const auto& [key, _] : obj_.items())
      if (!seen_.count(key)) throw ParseError(at(key) + ": unknown key");
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ParseError(where + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ParseError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ParseError(where + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<long long>() < 0) throw ParseError(where + ": expected a non-negative integer");
      }
      return v.get<T>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  template <typename T>
  static std::vector<T> convert_list(const json& v, const std::string& where) {
    if (!v.is_array()) throw ParseError(where + ": expected an array");
    std::vector<T> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<T>(v[i], where + "[" + std::to_string(i) + "]"));
    return out;
  }

  template <typename T>
  void read_list(const std::string& key, std::vector<T>& out) {
    if (!has(key)) return;
    out = convert_list<T>(obj_.at(key), at(key));
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

MissingSpec parse_missing(const json& v, const std::string& where) {
  Section s(v, where);
  MissingSpec m;
  s.read("image", m.avail_img);
  s.read("text", m.avail_txt);
  s.finish();
  return m;
}

json missing_json(const MissingSpec& m) { return json{{"image", m.avail_img}, {"text", m.avail_txt}}; }

}  // namespace

void ExperimentSpec::validate() const {
  model.validate();
  train.validate();
  if (n_samples < 3) throw ConfigError("task.n_samples must be at least 3");
  auto check_missing = [](const MissingSpec& m, const std::string& where) {
    if (!(m.avail_img > 0 && m.avail_img <= 1) || !(m.avail_txt > 0 && m.avail_txt <= 1))
      throw ConfigError(where + ": availability rates must lie in (0, 1]");
    if (m.avail_img + m.avail_txt < 1.0 - 1e-12)
      throw ConfigError(where + ": infeasible spec, image + text availability is below 1");
  };
  check_missing(train_missing, "missing.train");
  if (test_missing.empty() && sweep.etas.empty()) throw ConfigError("missing.test must list at least one spec");
  for (std::size_t i = 0; i < test_missing.size(); ++i)
    check_missing(test_missing[i], "missing.test[" + std::to_string(i) + "]");
  for (std::size_t i = 0; i < sweep.train_specs.size(); ++i)
    check_missing(sweep.train_specs[i], "sweep.train_specs[" + std::to_string(i) + "]");
  for (double eta : sweep.etas)
    if (!(eta >= 0 && eta <= 1)) throw ConfigError("sweep.etas entries must lie in [0, 1]");
  if (sweep.seeds.empty()) throw ConfigError("sweep.seeds must list at least one seed");
  for (Index r : sweep.ranks)
    if (r < 1 || r > model.hidden_dim)
      throw ConfigError("sweep.ranks entry " + std::to_string(r) + " outside [1, hidden_dim=" +
                        std::to_string(model.hidden_dim) + "]");
  for (const auto& set : sweep.block_sets)
    for (int b : set)
      if (b < 0 || b >= model.num_blocks)
        throw ConfigError("sweep.block_sets contains invalid block index " + std::to_string(b));
}

ExperimentSpec parse_experiment(const json& doc) {
  ExperimentSpec spec;
  Section root(doc, "");

  if (root.has("model")) {
    Section s(root.raw("model"), "model");
    ModelConfig& m = spec.model;
    s.read("hidden_dim", m.hidden_dim);
    s.read("num_blocks", m.num_blocks);
    s.read("num_heads", m.num_heads);
    s.read("mlp_ratio", m.mlp_ratio);
    s.read("vocab_size", m.vocab_size);
    s.read("max_text_len", m.max_text_len);
    s.read("image_grid", m.image_grid);
    s.read("patch_dim", m.patch_dim);
    s.read("num_labels", m.num_labels);
    s.read("init_std", m.init_std);
    s.read("ln_eps", m.ln_eps);
    s.finish();
  }

  if (root.has("adapter")) {
    Section s(root.raw("adapter"), "adapter");
    AdapterConfig& a = spec.model.adapter;
    if (s.has("method")) {
      try {
        a.kind = adapter_kind_from_string(Section::convert<std::string>(s.raw("method"), s.at("method")));
      } catch (const ConfigError& e) {
        throw ParseError(s.at("method") + ": " + e.what());
      }
    }
    s.read("rank", a.rank);
    if (s.has("target_blocks")) {
      const auto blocks = Section::convert_list<int>(s.raw("target_blocks"), s.at("target_blocks"));
      a.target_blocks = std::set<int>(blocks.begin(), blocks.end());
    }
    if (s.has("target_projections")) {
      a.target_projections.clear();
      for (const std::string& name :
           Section::convert_list<std::string>(s.raw("target_projections"), s.at("target_projections"))) {
        try {
          a.target_projections.insert(projection_from_string(name));
        } catch (const ConfigError& e) {
          throw ParseError(s.at("target_projections") + ": " + e.what());
        }
      }
    }
    s.read("init_std", a.init_std);
    s.finish();
  }

  if (root.has("train")) {
    Section s(root.raw("train"), "train");
    TrainConfig& t = spec.train;
    s.read("max_lr", t.max_lr);
    s.read("weight_decay", t.weight_decay);
    s.read("batch_size", t.batch_size);
    s.read("max_epochs", t.max_epochs);
    s.read("patience", t.patience);
    s.read("warmup_fraction", t.warmup_fraction);
    if (s.has("betas")) {
      const auto betas = Section::convert_list<double>(s.raw("betas"), s.at("betas"));
      if (betas.size() != 2) throw ParseError(s.at("betas") + ": expected two numbers");
      t.beta1 = betas[0];
      t.beta2 = betas[1];
    }
    s.read("eps", t.eps);
    s.finish();
  }

  if (root.has("task")) {
    Section s(root.raw("task"), "task");
    SyntheticTaskSpec& t = spec.task;
    s.read("n_samples", spec.n_samples);
    if (s.has("split")) {
      const auto parts = Section::convert_list<double>(s.raw("split"), s.at("split"));
      if (parts.size() != 3) throw ParseError(s.at("split") + ": expected three fractions");
      spec.split = {parts[0], parts[1], parts[2]};
    }
    s.read_list("prevalence", t.prevalence);
    s.read("s_img", t.s_img);
    s.read("s_txt", t.s_txt);
    s.read("noise", t.noise);
    s.read("seed", t.seed);
    s.finish();
  }

  if (root.has("missing")) {
    Section s(root.raw("missing"), "missing");
    if (s.has("train")) spec.train_missing = parse_missing(s.raw("train"), s.at("train"));
    if (s.has("test")) {
      const json& list = s.raw("test");
      if (!list.is_array()) throw ParseError(s.at("test") + ": expected an array");
      spec.test_missing.clear();
      for (std::size_t i = 0; i < list.size(); ++i)
        spec.test_missing.push_back(parse_missing(list[i], s.at("test") + "[" + std::to_string(i) + "]"));
    }
    s.finish();
  }

  if (root.has("sweep")) {
    Section s(root.raw("sweep"), "sweep");
    SweepConfig& w = spec.sweep;
    s.read_list("seeds", w.seeds);
    if (s.has("train_specs")) {
      const json& list = s.raw("train_specs");
      if (!list.is_array()) throw ParseError(s.at("train_specs") + ": expected an array");
      for (std::size_t i = 0; i < list.size(); ++i)
        w.train_specs.push_back(parse_missing(list[i], s.at("train_specs") + "[" + std::to_string(i) + "]"));
    }
    s.read_list("etas", w.etas);
    s.read_list("ranks", w.ranks);
    if (s.has("block_sets")) {
      const json& list = s.raw("block_sets");
      if (!list.is_array()) throw ParseError(s.at("block_sets") + ": expected an array");
      for (std::size_t i = 0; i < list.size(); ++i)
        w.block_sets.push_back(Section::convert_list<int>(list[i], s.at("block_sets") + "[" + std::to_string(i) + "]"));
    }
    s.finish();
  }

  root.finish();
  spec.task.num_labels = spec.model.num_labels;
  spec.task.vocab_size = spec.model.vocab_size;
  spec.validate();
  return spec;
}

ExperimentSpec load_experiment(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return parse_experiment(doc);
}

json to_json(const ExperimentSpec& spec) {
  const ModelConfig& m = spec.model;
  const AdapterConfig& a = m.adapter;
  const TrainConfig& t = spec.train;
  json projections = json::array();
  for (Projection p : a.target_projections) projections.push_back(std::string(to_string(p)));
  json test = json::array();
  for (const MissingSpec& s : spec.test_missing) test.push_back(missing_json(s));
  json train_specs = json::array();
  for (const MissingSpec& s : spec.sweep.train_specs) train_specs.push_back(missing_json(s));

  return json{
      {"model",
       {{"hidden_dim", m.hidden_dim}, {"num_blocks", m.num_blocks}, {"num_heads", m.num_heads},
        {"mlp_ratio", m.mlp_ratio}, {"vocab_size", m.vocab_size}, {"max_text_len", m.max_text_len},
        {"image_grid", m.image_grid}, {"patch_dim", m.patch_dim}, {"num_labels", m.num_labels},
        {"init_std", m.init_std}, {"ln_eps", m.ln_eps}}},
      {"adapter",
       {{"method", std::string(to_string(a.kind))}, {"rank", a.rank},
        {"target_blocks", std::vector<int>(a.target_blocks.begin(), a.target_blocks.end())},
        {"target_projections", projections}, {"init_std", a.init_std}}},
      {"train",
       {{"max_lr", t.max_lr}, {"weight_decay", t.weight_decay}, {"batch_size", t.batch_size},
        {"max_epochs", t.max_epochs}, {"patience", t.patience}, {"warmup_fraction", t.warmup_fraction},
        {"betas", {t.beta1, t.beta2}}, {"eps", t.eps}}},
      {"task",
       {{"n_samples", spec.n_samples}, {"split", spec.split}, {"prevalence", spec.task.prevalence},
        {"s_img", spec.task.s_img}, {"s_txt", spec.task.s_txt}, {"noise", spec.task.noise},
        {"seed", spec.task.seed}}},
      {"missing", {{"train", missing_json(spec.train_missing)}, {"test", test}}},
      {"sweep",
       {{"seeds", spec.sweep.seeds}, {"train_specs", train_specs}, {"etas", spec.sweep.etas},
        {"ranks", spec.sweep.ranks}, {"block_sets", spec.sweep.block_sets}}},
  };
}

std::string spec_hash(const ExperimentSpec& spec) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(to_json(spec).dump());
  return os.str();
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    item = first == std::string::npos ? "" : item.substr(first, item.find_last_not_of(" \t") - first + 1);
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ParseError("--seeds: '" + item + "' is not a non-negative integer");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ParseError("--seeds: empty list");
  return out;
}

}  // namespace mora
