#include "mora/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "mora/metrics.hpp"
#include "mora/random.hpp"

namespace mora {

using nlohmann::json;
namespace fs = std::filesystem;

DatasetSplits seed_splits(const ExperimentSpec& spec, std::uint64_t seed) {
  SyntheticTaskSpec task = spec.task;
  task.num_labels = spec.model.num_labels;
  task.vocab_size = spec.model.vocab_size;
  task.seed = derive_seed(spec.task.seed, "run", seed);
  const Dataset all = generate_synthetic(task, spec.model.sample_shape(), spec.n_samples);
  return split(all, spec.split, derive_seed(seed, "split"));
}

SeedRun run_seed(const ExperimentSpec& spec, const ModelConfig& model_cfg, const MissingSpec& train_spec,
                 const std::vector<MissingSpec>& test_specs, std::uint64_t seed) {
  const DatasetSplits parts = seed_splits(spec, seed);
  if (parts.train.empty() || parts.val.empty() || parts.test.empty())
    throw ConfigError("task.n_samples and task.split leave an empty train, validation or test set");

  auto with_seed = [](MissingSpec m, std::uint64_t s) {
    m.seed = s;
    return m;
  };
  const Dataset train_ds = apply_missing(parts.train, with_seed(train_spec, derive_seed(seed, "missing.train")));
  const Dataset val_ds = apply_missing(parts.val, with_seed(train_spec, derive_seed(seed, "missing.val")));

  MultimodalEncoder model(model_cfg, derive_seed(seed, "model"));
  model.freeze_backbone();
  TrainConfig tc = spec.train;
  tc.seed = derive_seed(seed, "train");

  SeedRun out;
  out.params = model.count_params();
  out.train_report = train(model, train_ds, val_ds, tc).report;
  for (const MissingSpec& test : test_specs) {
    const Dataset test_ds = apply_missing(parts.test, with_seed(test, derive_seed(seed, "missing.test")));
    out.test_macro_f1.push_back(evaluate(model, test_ds).macro_f1);
  }
  out.checkpoint = model.state();
  return out;
}

namespace {

bool same_spec(const MissingSpec& a, const MissingSpec& b) {
  return a.avail_img == b.avail_img && a.avail_txt == b.avail_txt;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string sanitize(const std::string& label) {
  std::string out;
  for (char c : label) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out;
}

std::vector<CellSummary> summarize(const std::vector<RunCell>& cells) {
  std::vector<CellSummary> out;
  std::vector<std::vector<double>> values;
  for (const RunCell& c : cells) {
    auto it = std::find_if(out.begin(), out.end(), [&](const CellSummary& s) {
      return same_spec(s.train, c.train) && same_spec(s.test, c.test);
    });
    if (it == out.end()) {
      out.push_back(CellSummary{c.train, c.test, 0, 0, 0});
      values.emplace_back();
      it = out.end() - 1;
    }
    values[static_cast<std::size_t>(it - out.begin())].push_back(c.macro_f1);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const MeanStd ms = mean_std(values[i]);
    out[i].mean_f1 = ms.mean;
    out[i].std_f1 = ms.std;
    out[i].n = values[i].size();
  }
  return out;
}

struct VariantPlan {
  std::string label;
  ModelConfig model;
};

RunVariant run_variant(const ExperimentSpec& spec, const VariantPlan& plan, const std::vector<MissingSpec>& train_specs,
                       const std::vector<MissingSpec>& test_specs, const std::vector<std::uint64_t>& seeds,
                       const RunOptions& opts, RunReport& report) {
  RunVariant v;
  v.label = plan.label;
  v.method = plan.model.adapter.kind;
  v.rank = v.method == AdapterKind::none ? 0 : plan.model.adapter.rank;
  if (v.method != AdapterKind::none)
    v.blocks.assign(plan.model.adapter.target_blocks.begin(), plan.model.adapter.target_blocks.end());
  v.params = count_params(parameter_layout(plan.model));

  for (std::size_t ti = 0; ti < train_specs.size(); ++ti) {
    for (std::uint64_t seed : seeds) {
      SeedRun run = run_seed(spec, plan.model, train_specs[ti], test_specs, seed);
      ++report.models_trained;
      for (std::size_t j = 0; j < test_specs.size(); ++j)
        v.cells.push_back(RunCell{seed, train_specs[ti], test_specs[j], run.test_macro_f1[j],
                                  run.train_report.best_epoch, run.train_report.epochs_run});
      v.epoch_train_loss.push_back(run.train_report.epoch_train_loss);
      if (opts.write_checkpoints && !opts.out_dir.empty()) {
        const fs::path dir = opts.out_dir / "checkpoints";
        ensure_dir(dir);
        save_checkpoint(dir / (sanitize(plan.label) + "_train" + std::to_string(ti) + "_seed" + std::to_string(seed) +
                               ".ckpt"),
                        run.checkpoint);
      }
    }
  }
  v.summary = summarize(v.cells);
  return v;
}

// shortest text that reads back to the same double
std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// 2 - 0.8 - 0.8 lands a few ulps off 0.4
double eta_of(const MissingSpec& s) { return std::round(s.total_missing_rate() * 1e9) / 1e9; }

std::string blocks_string(const std::vector<int>& blocks) {
  std::string s = "[";
  for (std::size_t i = 0; i < blocks.size(); ++i) s += (i ? "," : "") + std::to_string(blocks[i]);
  return s + "]";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

void write_outputs(const RunReport& report, const RunOptions& opts) {
  if (opts.out_dir.empty()) return;
  ensure_dir(opts.out_dir);
  write_text(opts.out_dir / "report.json", to_json(report).dump(2) + "\n");

  std::ostringstream csv;
  csv << "variant,method,rank,blocks,seed,train_img,train_txt,test_img,test_txt,eta,macro_f1\n";
  for (const RunVariant& v : report.variants)
    for (const RunCell& c : v.cells)
      csv << v.label << ',' << to_string(v.method) << ',' << v.rank << ",\"" << blocks_string(v.blocks) << "\","
          << c.seed << ',' << fmt(c.train.avail_img) << ',' << fmt(c.train.avail_txt) << ','
          << fmt(c.test.avail_img) << ',' << fmt(c.test.avail_txt) << ',' << fmt(eta_of(c.test)) << ','
          << fmt(c.macro_f1) << '\n';
  write_text(opts.out_dir / "report.csv", csv.str());
}

std::vector<std::uint64_t> effective_seeds(const ExperimentSpec& spec, const RunOptions& opts) {
  return opts.seeds.empty() ? spec.sweep.seeds : opts.seeds;
}

ModelConfig effective_model(const ExperimentSpec& spec, const RunOptions& opts) {
  ModelConfig m = spec.model;
  if (opts.method) m.adapter.kind = *opts.method;
  return m;
}

RunReport start_report(const std::string& command, const ExperimentSpec& spec, const RunOptions& opts) {
  ExperimentSpec effective = spec;
  effective.model = effective_model(spec, opts);
  effective.sweep.seeds = effective_seeds(spec, opts);
  effective.validate();
  // fail before any training if the output location is unusable
  if (!opts.out_dir.empty()) ensure_dir(opts.out_dir);
  RunReport r;
  r.command = command;
  r.config = to_json(effective);
  r.spec_hash = spec_hash(effective);
  r.seeds = effective.sweep.seeds;
  return r;
}

std::vector<MissingSpec> test_specs_of(const ExperimentSpec& spec) {
  std::vector<MissingSpec> out = spec.test_missing;
  for (double eta : spec.sweep.etas) out.push_back(missing_spec_for_eta(eta));
  return out;
}

template <typename Body>
RunReport timed(Body&& body) {
  const auto start = std::chrono::steady_clock::now();
  RunReport r = body();
  r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace

RunReport cmd_train(const ExperimentSpec& spec, const RunOptions& opts) {
  RunReport r = timed([&] {
    RunReport r = start_report("train", spec, opts);
    const ModelConfig model = effective_model(spec, opts);
    r.variants.push_back(
        run_variant(spec, {"default", model}, {spec.train_missing}, test_specs_of(spec), r.seeds, opts, r));
    return r;
  });
  write_outputs(r, opts);
  return r;
}

RunReport cmd_sweep_missing(const ExperimentSpec& spec, const RunOptions& opts) {
  RunReport r = timed([&] {
    RunReport r = start_report("sweep-missing", spec, opts);
    const ModelConfig model = effective_model(spec, opts);
    const std::vector<MissingSpec> train_specs =
        spec.sweep.train_specs.empty() ? std::vector<MissingSpec>{spec.train_missing} : spec.sweep.train_specs;
    r.variants.push_back(run_variant(spec, {"grid", model}, train_specs, test_specs_of(spec), r.seeds, opts, r));
    return r;
  });
  write_outputs(r, opts);
  if (!opts.out_dir.empty()) {
    std::ostringstream grid;
    grid << "train_img,train_txt,test_img,test_txt,seed,macro_f1\n";
    for (const RunCell& c : r.variants.front().cells)
      grid << fmt(c.train.avail_img) << ',' << fmt(c.train.avail_txt) << ',' << fmt(c.test.avail_img) << ','
           << fmt(c.test.avail_txt) << ',' << c.seed << ',' << fmt(c.macro_f1) << '\n';
    write_text(opts.out_dir / "grid.csv", grid.str());
  }
  return r;
}

RunReport cmd_ablate_rank(const ExperimentSpec& spec, const RunOptions& opts) {
  RunReport r = timed([&] {
    RunReport r = start_report("ablate-rank", spec, opts);
    ModelConfig model = effective_model(spec, opts);
    const Index d = model.hidden_dim;
    std::vector<Index> ranks = spec.sweep.ranks;
    if (ranks.empty()) {
      for (Index rank : {Index{1}, Index{2}, Index{4}, Index{16}, d})
        if (rank <= d && std::find(ranks.begin(), ranks.end(), rank) == ranks.end()) ranks.push_back(rank);
    }
    for (Index rank : ranks) {
      if (rank < 1 || rank > d)
        throw ConfigError("ablate-rank: rank " + std::to_string(rank) + " outside [1, " + std::to_string(d) + "]");
      model.adapter.rank = rank;
      r.variants.push_back(run_variant(spec, {"rank=" + std::to_string(rank), model}, {spec.train_missing},
                                       test_specs_of(spec), r.seeds, opts, r));
    }
    return r;
  });
  write_outputs(r, opts);
  return r;
}

RunReport cmd_ablate_blocks(const ExperimentSpec& spec, const RunOptions& opts) {
  RunReport r = timed([&] {
    RunReport r = start_report("ablate-blocks", spec, opts);
    ModelConfig model = effective_model(spec, opts);
    const int last = static_cast<int>(model.num_blocks) - 1;
    std::vector<std::vector<int>> sets = spec.sweep.block_sets;
    if (sets.empty()) {
      sets = {{0}};
      if (last >= 1) sets.push_back({0, 1});
      if (last >= 1) sets.push_back({last});
    }
    for (const auto& set : sets) {
      for (int b : set)
        if (b < 0 || b > last) throw ConfigError("ablate-blocks: invalid block index " + std::to_string(b));
      model.adapter.target_blocks = std::set<int>(set.begin(), set.end());
      r.variants.push_back(run_variant(spec, {"blocks=" + blocks_string(set), model}, {spec.train_missing},
                                       test_specs_of(spec), r.seeds, opts, r));
    }
    return r;
  });
  write_outputs(r, opts);
  return r;
}

json to_json(const RunReport& report) {
  json variants = json::array();
  for (const RunVariant& v : report.variants) {
    json cells = json::array();
    for (const RunCell& c : v.cells)
      cells.push_back({{"seed", c.seed},
                       {"train_img", c.train.avail_img},
                       {"train_txt", c.train.avail_txt},
                       {"test_img", c.test.avail_img},
                       {"test_txt", c.test.avail_txt},
                       {"eta", eta_of(c.test)},
                       {"macro_f1", c.macro_f1},
                       {"best_epoch", c.best_epoch},
                       {"epochs_run", c.epochs_run}});
    json summary = json::array();
    for (const CellSummary& s : v.summary)
      summary.push_back({{"train_img", s.train.avail_img},
                         {"train_txt", s.train.avail_txt},
                         {"test_img", s.test.avail_img},
                         {"test_txt", s.test.avail_txt},
                         {"eta", eta_of(s.test)},
                         {"mean_f1", s.mean_f1},
                         {"std_f1", s.std_f1},
                         {"n", s.n}});
    variants.push_back({{"label", v.label},
                        {"method", std::string(to_string(v.method))},
                        {"rank", v.rank},
                        {"blocks", v.blocks},
                        {"params",
                         {{"total", v.params.total}, {"trainable", v.params.trainable}, {"ratio", v.params.ratio()}}},
                        {"cells", cells},
                        {"summary", summary},
                        {"epoch_train_loss", v.epoch_train_loss}});
  }
  return json{{"command", report.command},
              {"spec_hash", report.spec_hash},
              {"config", report.config},
              {"seeds", report.seeds},
              {"models_trained", report.models_trained},
              {"variants", variants},
              {"wall_clock_seconds", report.wall_clock_seconds}};
}

RunReport report_from_json(const json& doc) {
  RunReport r;
  try {
    r.command = doc.at("command").get<std::string>();
    r.spec_hash = doc.at("spec_hash").get<std::string>();
    r.config = doc.at("config");
    r.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    r.models_trained = doc.at("models_trained").get<std::size_t>();
    r.wall_clock_seconds = doc.at("wall_clock_seconds").get<double>();
    for (const json& jv : doc.at("variants")) {
      RunVariant v;
      v.label = jv.at("label").get<std::string>();
      v.method = adapter_kind_from_string(jv.at("method").get<std::string>());
      v.rank = jv.at("rank").get<Index>();
      v.blocks = jv.at("blocks").get<std::vector<int>>();
      v.params.total = jv.at("params").at("total").get<std::int64_t>();
      v.params.trainable = jv.at("params").at("trainable").get<std::int64_t>();
      for (const json& jc : jv.at("cells")) {
        RunCell c;
        c.seed = jc.at("seed").get<std::uint64_t>();
        c.train = {jc.at("train_img").get<double>(), jc.at("train_txt").get<double>(), 0};
        c.test = {jc.at("test_img").get<double>(), jc.at("test_txt").get<double>(), 0};
        c.macro_f1 = jc.at("macro_f1").get<double>();
        c.best_epoch = jc.at("best_epoch").get<int>();
        c.epochs_run = jc.at("epochs_run").get<int>();
        v.cells.push_back(c);
      }
      for (const json& js : jv.at("summary")) {
        CellSummary s;
        s.train = {js.at("train_img").get<double>(), js.at("train_txt").get<double>(), 0};
        s.test = {js.at("test_img").get<double>(), js.at("test_txt").get<double>(), 0};
        s.mean_f1 = js.at("mean_f1").get<double>();
        s.std_f1 = js.at("std_f1").get<double>();
        s.n = js.at("n").get<std::size_t>();
        v.summary.push_back(s);
      }
      v.epoch_train_loss = jv.at("epoch_train_loss").get<std::vector<std::vector<double>>>();
      r.variants.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed report: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string stable_report_text(const RunReport& report) {
  json doc = to_json(report);
  doc.erase("wall_clock_seconds");
  return doc.dump(2);
}

std::size_t cmd_report(const fs::path& run_dir, const fs::path& out_dir) {
  if (!fs::is_directory(run_dir)) throw IoError("run directory " + run_dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir))
    if (entry.is_regular_file() && entry.path().filename() == "report.json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no report.json found under " + run_dir.string());

  std::ostringstream summary;
  summary << "command,variant,method,rank,blocks,train_img,train_txt,test_img,test_txt,eta,n_seeds,mean_f1,std_f1,"
             "trainable_ratio,source\n";
  // (method, eta) → per-seed values for the missing-rate series.
  std::map<std::pair<std::string, double>, std::vector<double>> series;

  for (const fs::path& file : files) {
    RunReport r;
    try {
      std::ifstream is(file);
      if (!is) throw IoError("cannot open");
      r = report_from_json(json::parse(is));
    } catch (const std::exception& e) {
      throw ParseError("corrupt report " + file.string() + ": " + e.what());
    }
    const std::string source = fs::relative(file, run_dir).string();
    for (const RunVariant& v : r.variants) {
      const std::vector<CellSummary> recomputed = summarize(v.cells);
      if (recomputed.size() != v.summary.size())
        throw ParseError("corrupt report " + file.string() + ": summary does not match cells");
      for (std::size_t i = 0; i < recomputed.size(); ++i) {
        const CellSummary& s = recomputed[i];
        if (std::abs(s.mean_f1 - v.summary[i].mean_f1) > 1e-12 || std::abs(s.std_f1 - v.summary[i].std_f1) > 1e-12)
          throw ParseError("corrupt report " + file.string() + ": stored mean/std disagree with per-seed cells");
        summary << r.command << ',' << v.label << ',' << to_string(v.method) << ',' << v.rank << ",\""
                << blocks_string(v.blocks) << "\"," << fmt(s.train.avail_img) << ',' << fmt(s.train.avail_txt) << ','
                << fmt(s.test.avail_img) << ',' << fmt(s.test.avail_txt) << ',' << fmt(eta_of(s.test))
                << ',' << s.n << ',' << fmt(s.mean_f1) << ',' << fmt(s.std_f1) << ',' << fmt(v.params.ratio()) << ','
                << source << '\n';
      }
      if (r.command != "train" && r.command != "sweep-missing") continue;
      for (const RunCell& c : v.cells) {
        if (c.test.avail_img != c.test.avail_txt) continue;
        const double eta = eta_of(c.test);
        series[{std::string(to_string(v.method)), eta}].push_back(c.macro_f1);
      }
    }
  }

  ensure_dir(out_dir);
  write_text(out_dir / "summary.csv", summary.str());
  std::ostringstream fig;
  fig << "eta,method,mean_f1,std_f1\n";
  std::vector<std::tuple<double, std::string, MeanStd>> rows;
  for (const auto& [key, values] : series) rows.emplace_back(key.second, key.first, mean_std(values));
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b)); });
  for (const auto& [eta, method, ms] : rows) fig << fmt(eta) << ',' << method << ',' << fmt(ms.mean) << ',' << fmt(ms.std) << '\n';
  write_text(out_dir / "fig2_series.csv", fig.str());
  return files.size();
}

}  // namespace mora
