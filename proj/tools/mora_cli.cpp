// Experiment driver: train, missing-rate sweeps, rank/block ablations, report merging.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mora/harness.hpp"

namespace {

int exit_code(mora::ErrorCategory category) {
  switch (category) {
    case mora::ErrorCategory::config:
    case mora::ErrorCategory::parse:
    case mora::ErrorCategory::validation:
      return 2;
    case mora::ErrorCategory::ingestion:
      return 3;
    case mora::ErrorCategory::numeric:
    case mora::ErrorCategory::dimension:
    case mora::ErrorCategory::contract:
      return 4;
    case mora::ErrorCategory::io:
      return 5;
  }
  return 1;
}

void print_summary(const mora::RunReport& report) {
  std::cout << report.command << " (spec " << report.spec_hash << "): " << report.models_trained
            << " models in " << report.wall_clock_seconds << " s\n";
  for (const auto& v : report.variants) {
    std::cout << "  " << v.label << " [" << mora::to_string(v.method) << "] trainable " << v.params.trainable << " / "
              << v.params.total << " (" << 100.0 * v.params.ratio() << "%)\n";
    for (const auto& s : v.summary)
      std::cout << "    train " << s.train.avail_img << "/" << s.train.avail_txt << "  test " << s.test.avail_img
                << "/" << s.test.avail_txt << "  macro-F1 " << s.mean_f1 << " ± " << s.std_f1 << " (n=" << s.n
                << ")\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-aware low-rank adaptation experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "runs";
  std::string seeds_csv;
  std::string method;
  std::string run_dir;

  auto add_run_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out_dir, "Output directory")->capture_default_str();
    cmd->add_option("--seeds", seeds_csv, "Comma-separated seeds overriding sweep.seeds");
    cmd->add_option("--method", method, "Adapter method overriding adapter.method")
        ->check(CLI::IsMember({"mora", "lora", "none"}));
  };

  CLI::App* train = app.add_subcommand("train", "Train per seed and evaluate on every test missing spec");
  CLI::App* sweep = app.add_subcommand("sweep-missing", "Train/test missing-rate grid");
  CLI::App* rank = app.add_subcommand("ablate-rank", "Sweep the adapter rank");
  CLI::App* blocks = app.add_subcommand("ablate-blocks", "Sweep the set of adapted blocks");
  for (CLI::App* cmd : {train, sweep, rank, blocks}) add_run_flags(cmd);

  CLI::App* report = app.add_subcommand("report", "Merge report.json files into summary.csv and fig2_series.csv");
  report->add_option("run_dir", run_dir, "Directory searched recursively for report.json")->required();
  report->add_option("--out", out_dir, "Output directory (defaults to run_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage errors share the config category
  }

  try {
    if (report->parsed()) {
      const std::string dest = report->count("--out") ? out_dir : run_dir;
      const std::size_t n = mora::cmd_report(run_dir, dest);
      std::cout << "merged " << n << " report(s) into " << dest << "\n";
      return 0;
    }

    const mora::ExperimentSpec spec = mora::load_experiment(config_path);
    mora::RunOptions opts;
    opts.out_dir = out_dir;
    if (!seeds_csv.empty()) opts.seeds = mora::parse_seed_list(seeds_csv);
    if (!method.empty()) opts.method = mora::adapter_kind_from_string(method);

    mora::RunReport result;
    if (train->parsed())
      result = mora::cmd_train(spec, opts);
    else if (sweep->parsed())
      result = mora::cmd_sweep_missing(spec, opts);
    else if (rank->parsed())
      result = mora::cmd_ablate_rank(spec, opts);
    else
      result = mora::cmd_ablate_blocks(spec, opts);
    print_summary(result);
    std::cout << "wrote " << out_dir << "/report.json\n";
    return 0;
  } catch (const mora::Error& e) {
    std::cerr << mora::to_string(e.category()) << ": " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
