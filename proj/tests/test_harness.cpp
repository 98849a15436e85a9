#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "mora/error.hpp"
#include "mora/harness.hpp"

using namespace mora;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_config() {
  return json::parse(R"({
    "model": {"hidden_dim": 16, "num_blocks": 2, "num_heads": 2, "vocab_size": 32, "max_text_len": 4,
              "image_grid": 2, "patch_dim": 4, "num_labels": 3},
    "adapter": {"method": "mora", "rank": 2},
    "train": {"max_epochs": 2},
    "task": {"n_samples": 40, "s_img": 1.5, "s_txt": 2.5, "seed": 7},
    "missing": {"train": {"image": 0.65, "text": 0.65}, "test": [{"image": 0.65, "text": 0.65}]},
    "sweep": {"seeds": [0, 1]}
  })");
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

class HarnessTest : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    dir = fs::temp_directory_path() / ("mora_harness_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  RunOptions opts(const std::string& sub) const {
    RunOptions o;
    o.out_dir = dir / sub;
    return o;
  }
};

void expect_parse_error(const json& doc, const std::string& needle) {
  try {
    parse_experiment(doc);
    ADD_FAILURE() << "accepted " << doc.dump();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const ExperimentSpec s = parse_experiment(json::object());
  EXPECT_EQ(s.model.hidden_dim, 32);
  EXPECT_EQ(s.model.num_blocks, 2);
  EXPECT_EQ(s.model.adapter.kind, AdapterKind::mora);
  EXPECT_EQ(s.model.adapter.rank, 4);
  EXPECT_EQ(s.model.adapter.target_blocks, std::set<int>{0});
  EXPECT_EQ(s.train.max_lr, 5e-3);
  EXPECT_EQ(s.train.weight_decay, 2e-2);
  EXPECT_EQ(s.train.batch_size, 4);
  EXPECT_EQ(s.train.max_epochs, 40);
  EXPECT_EQ(s.train.patience, 5);
  EXPECT_EQ(s.train.warmup_fraction, 0.02);
  EXPECT_EQ(s.sweep.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_DOUBLE_EQ(s.train_missing.avail_img, 0.65);
}

TEST(Config, ReadsEverySection) {
  const ExperimentSpec s = parse_experiment(json::parse(R"({
    "model": {"hidden_dim": 24, "num_heads": 3},
    "adapter": {"method": "lora", "rank": 3, "target_blocks": [0, 1], "target_projections": ["value"]},
    "train": {"betas": [0.8, 0.99], "max_epochs": 7},
    "task": {"n_samples": 90, "split": [0.5, 0.25, 0.25], "prevalence": [0.2, 0.3, 0.4, 0.5], "s_txt": 3.5},
    "missing": {"train": {"image": 1.0, "text": 0.3}, "test": [{"image": 0.3, "text": 1.0}]},
    "sweep": {"seeds": [4], "etas": [0, 0.8], "ranks": [1, 2], "block_sets": [[0], [1]],
              "train_specs": [{"image": 1.0, "text": 1.0}]}
  })"));
  EXPECT_EQ(s.model.hidden_dim, 24);
  EXPECT_EQ(s.model.adapter.kind, AdapterKind::lora);
  EXPECT_EQ(s.model.adapter.target_projections, std::set<Projection>{Projection::value});
  EXPECT_EQ(s.model.adapter.target_blocks, (std::set<int>{0, 1}));
  EXPECT_EQ(s.train.beta1, 0.8);
  EXPECT_EQ(s.train.beta2, 0.99);
  EXPECT_EQ(s.n_samples, 90u);
  EXPECT_EQ(s.split[1], 0.25);
  EXPECT_EQ(s.task.prevalence.size(), 4u);
  EXPECT_EQ(s.task.s_txt, 3.5);
  EXPECT_EQ(s.train_missing.avail_txt, 0.3);
  ASSERT_EQ(s.test_missing.size(), 1u);
  EXPECT_EQ(s.test_missing[0].avail_img, 0.3);
  EXPECT_EQ(s.sweep.etas, (std::vector<double>{0, 0.8}));
  EXPECT_EQ(s.sweep.block_sets.size(), 2u);
  EXPECT_EQ(s.sweep.train_specs.size(), 1u);
}

TEST(Config, UnknownKeysAndWrongTypesNameTheField) {
  expect_parse_error(json::parse(R"({"model": {"hiden_dim": 8}})"), "model.hiden_dim");
  expect_parse_error(json::parse(R"({"modle": {}})"), "modle");
  expect_parse_error(json::parse(R"({"train": {"max_lr": "fast"}})"), "train.max_lr");
  expect_parse_error(json::parse(R"({"train": {"betas": [0.9]}})"), "train.betas");
  expect_parse_error(json::parse(R"({"adapter": {"method": "prefix"}})"), "adapter.method");
  expect_parse_error(json::parse(R"({"missing": {"test": [{"image": 1, "txt": 1}]}})"), "missing.test[0].txt");
  expect_parse_error(json::parse(R"({"sweep": {"seeds": [1, -2]}})"), "sweep.seeds[1]");
  expect_parse_error(json::parse(R"({"model": {"num_blocks": 1.5}})"), "model.num_blocks");
}

TEST(Config, InvalidValuesAreConfigErrors) {
  json doc = tiny_config();
  doc["missing"]["train"] = {{"image", 0.4}, {"text", 0.5}};
  EXPECT_THROW(parse_experiment(doc).validate(), ConfigError);
  doc = tiny_config();
  doc["adapter"]["rank"] = 17;
  EXPECT_THROW(parse_experiment(doc).validate(), ConfigError);
  doc = tiny_config();
  doc["adapter"]["target_blocks"] = {5};
  EXPECT_THROW(parse_experiment(doc).validate(), ConfigError);
}

TEST(Config, CanonicalJsonRoundTripsAndHashes) {
  const ExperimentSpec s = parse_experiment(tiny_config());
  const json canon = to_json(s);
  EXPECT_EQ(to_json(parse_experiment(canon)), canon);
  EXPECT_EQ(spec_hash(parse_experiment(canon)), spec_hash(s));
  ExperimentSpec other = s;
  other.train.max_epochs = 3;
  EXPECT_NE(spec_hash(other), spec_hash(s));
}

TEST(Config, SeedListParsing) {
  EXPECT_EQ(parse_seed_list("1,2,3"), (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(parse_seed_list(" 4 , 5"), (std::vector<std::uint64_t>{4, 5}));
  EXPECT_THROW(parse_seed_list("1,x"), ParseError);
  EXPECT_THROW(parse_seed_list(""), ParseError);
}

TEST_F(HarnessTest, TrainWritesReportCsvAndCheckpoints) {
  const ExperimentSpec spec = parse_experiment(tiny_config());
  const RunReport r = cmd_train(spec, opts("train"));
  ASSERT_EQ(r.variants.size(), 1u);
  EXPECT_EQ(r.models_trained, 2u);
  EXPECT_EQ(r.variants[0].cells.size(), 2u);
  ASSERT_EQ(r.variants[0].summary.size(), 1u);
  EXPECT_EQ(r.variants[0].summary[0].n, 2u);
  EXPECT_TRUE(fs::exists(dir / "train" / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "train" / "report.csv"));
  EXPECT_TRUE(fs::exists(dir / "train" / "checkpoints" / "default_train0_seed0.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "train" / "checkpoints" / "default_train0_seed1.ckpt"));
  EXPECT_EQ(lines_of(dir / "train" / "report.csv").size(), 3u);

  const json doc = json::parse(read_file(dir / "train" / "report.json"));
  EXPECT_EQ(doc["command"], "train");
  EXPECT_EQ(doc["spec_hash"], spec_hash(spec));
  EXPECT_GT(doc["variants"][0]["params"]["ratio"].get<double>(), 0.0);
  EXPECT_EQ(stable_report_text(report_from_json(doc)), stable_report_text(r));

  const Checkpoint ck = load_checkpoint(dir / "train" / "checkpoints" / "default_train0_seed0.ckpt");
  EXPECT_NE(ck.find("mora.0.query.B_img"), nullptr);
  EXPECT_NE(ck.find("blocks.1.mlp.fc2.weight"), nullptr);
}

TEST_F(HarnessTest, SameConfigAndSeedsAreByteStable) {
  const ExperimentSpec spec = parse_experiment(tiny_config());
  const RunReport a = cmd_train(spec, opts("a"));
  const RunReport b = cmd_train(spec, opts("b"));
  EXPECT_EQ(stable_report_text(a), stable_report_text(b));
  for (const char* name : {"default_train0_seed0.ckpt", "default_train0_seed1.ckpt"})
    EXPECT_EQ(read_file(dir / "a" / "checkpoints" / name), read_file(dir / "b" / "checkpoints" / name)) << name;
}

TEST_F(HarnessTest, MethodAndSeedOverridesApply) {
  const ExperimentSpec spec = parse_experiment(tiny_config());
  RunOptions o = opts("none");
  o.method = AdapterKind::none;
  o.seeds = {5};
  const RunReport r = cmd_train(spec, o);
  EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{5}));
  EXPECT_EQ(r.variants[0].method, AdapterKind::none);
  EXPECT_EQ(r.variants[0].rank, 0);
  const ModelConfig& m = spec.model;
  const std::int64_t classifier = 2 * m.hidden_dim * m.hidden_dim + 2 * m.hidden_dim + m.num_labels * 2 * m.hidden_dim +
                                  m.num_labels;
  EXPECT_EQ(r.variants[0].params.trainable, classifier);
  EXPECT_EQ(r.config["adapter"]["method"], "none");
  EXPECT_NE(r.spec_hash, spec_hash(spec));
}

TEST_F(HarnessTest, SweepMissingCoversTheGrid) {
  json doc = tiny_config();
  doc["sweep"]["seeds"] = {3};
  doc["sweep"]["train_specs"] = json::parse(R"([{"image": 1.0, "text": 0.3}, {"image": 0.3, "text": 1.0},
                                                  {"image": 0.65, "text": 0.65}])");
  doc["missing"]["test"] = doc["sweep"]["train_specs"];
  const ExperimentSpec spec = parse_experiment(doc);
  const RunReport r = cmd_sweep_missing(spec, opts("grid"));
  EXPECT_EQ(r.models_trained, 3u);
  EXPECT_EQ(r.variants[0].cells.size(), 9u);
  EXPECT_EQ(r.variants[0].summary.size(), 9u);
  std::size_t diagonal = 0;
  for (const RunCell& c : r.variants[0].cells)
    diagonal += c.train.avail_img == c.test.avail_img && c.train.avail_txt == c.test.avail_txt;
  EXPECT_EQ(diagonal, 3u);
  const auto grid = lines_of(dir / "grid" / "grid.csv");
  ASSERT_EQ(grid.size(), 10u);
  EXPECT_EQ(grid[0], "train_img,train_txt,test_img,test_txt,seed,macro_f1");
}

TEST_F(HarnessTest, EtaSweepAddsSymmetricTestSpecs) {
  json doc = tiny_config();
  doc["sweep"]["seeds"] = {0};
  doc["sweep"]["etas"] = {0.0, 0.4, 0.8};
  const RunReport r = cmd_train(parse_experiment(doc), opts("eta"));
  ASSERT_EQ(r.variants[0].cells.size(), 4u);
  EXPECT_DOUBLE_EQ(r.variants[0].cells[1].test.avail_img, 1.0);
  EXPECT_DOUBLE_EQ(r.variants[0].cells[2].test.avail_img, 0.8);
  EXPECT_DOUBLE_EQ(r.variants[0].cells[3].test.avail_txt, 0.6);
}

TEST_F(HarnessTest, RankAblationCountsMatchClosedForm) {
  json doc = tiny_config();
  doc["sweep"]["seeds"] = {0};
  doc["train"]["max_epochs"] = 1;
  const ExperimentSpec spec = parse_experiment(doc);
  const RunReport r = cmd_ablate_rank(spec, opts("rank"));
  std::vector<Index> ranks;
  for (const RunVariant& v : r.variants) ranks.push_back(v.rank);
  EXPECT_EQ(ranks, (std::vector<Index>{1, 2, 4, 16}));
  const std::int64_t d = spec.model.hidden_dim;
  const std::int64_t classifier = 2 * d * d + 2 * d + spec.model.num_labels * 2 * d + spec.model.num_labels;
  for (const RunVariant& v : r.variants) {
    EXPECT_EQ(v.label, "rank=" + std::to_string(v.rank));
    EXPECT_EQ(v.params.trainable, classifier + 2 * (v.rank * d + 2 * d * v.rank)) << v.label;
  }
}

TEST_F(HarnessTest, BlockAblationDefaultsAndMonotoneCounts) {
  json doc = tiny_config();
  doc["sweep"]["seeds"] = {0};
  doc["train"]["max_epochs"] = 1;
  const RunReport r = cmd_ablate_blocks(parse_experiment(doc), opts("blocks"));
  ASSERT_EQ(r.variants.size(), 3u);
  EXPECT_EQ(r.variants[0].label, "blocks=[0]");
  EXPECT_EQ(r.variants[1].label, "blocks=[0,1]");
  EXPECT_EQ(r.variants[2].label, "blocks=[1]");
  EXPECT_LT(r.variants[0].params.trainable, r.variants[1].params.trainable);
  EXPECT_LT(r.variants[0].params.ratio(), r.variants[1].params.ratio());
  EXPECT_EQ(r.variants[0].params.trainable, r.variants[2].params.trainable);
}

TEST_F(HarnessTest, EmptyBlockSetMatchesNoAdapterBaseline) {
  json doc = tiny_config();
  doc["sweep"]["seeds"] = {0};
  doc["sweep"]["block_sets"] = json::array({json::array()});
  const ExperimentSpec spec = parse_experiment(doc);
  RunOptions quiet;
  const RunReport blocks = cmd_ablate_blocks(spec, quiet);
  RunOptions none;
  none.method = AdapterKind::none;
  const RunReport base = cmd_train(spec, none);
  ASSERT_EQ(blocks.variants.size(), 1u);
  EXPECT_EQ(blocks.variants[0].params.trainable, base.variants[0].params.trainable);
  EXPECT_EQ(blocks.variants[0].cells[0].macro_f1, base.variants[0].cells[0].macro_f1);
  EXPECT_EQ(blocks.variants[0].epoch_train_loss, base.variants[0].epoch_train_loss);
}

TEST_F(HarnessTest, InvalidAblationSetsAreConfigErrors) {
  json doc = tiny_config();
  doc["sweep"]["block_sets"] = json::array({json::array({2})});
  EXPECT_THROW(cmd_ablate_blocks(parse_experiment(doc), RunOptions{}), ConfigError);
  doc = tiny_config();
  doc["sweep"]["ranks"] = {17};
  EXPECT_THROW(cmd_ablate_rank(parse_experiment(doc), RunOptions{}), ConfigError);
}

TEST_F(HarnessTest, ReportMergesWithHandStatistics) {
  // three seeds with F1 0.5, 0.6, 0.9: mean 2/3, squared deviations sum to 13/150
  RunReport r;
  r.command = "train";
  r.spec_hash = "abc";
  r.config = json::object();
  r.seeds = {0, 1, 2};
  RunVariant v;
  v.label = "default";
  v.method = AdapterKind::mora;
  v.rank = 4;
  v.blocks = {0};
  v.params = {1000, 16};
  const MissingSpec train{0.65, 0.65, 0}, test{0.6, 0.6, 0};
  const double f[3] = {0.5, 0.6, 0.9};
  for (std::uint64_t s = 0; s < 3; ++s) v.cells.push_back(RunCell{s, train, test, f[s], 1, 2});
  const double mean = (0.5 + 0.6 + 0.9) / 3;
  const double sd =
      std::sqrt(((0.5 - mean) * (0.5 - mean) + (0.6 - mean) * (0.6 - mean) + (0.9 - mean) * (0.9 - mean)) / 2);
  v.summary.push_back(CellSummary{train, test, mean, sd, 3});
  v.epoch_train_loss = {{0.7}, {0.7}, {0.7}};
  r.variants.push_back(v);
  fs::create_directories(dir / "runs" / "one");
  std::ofstream(dir / "runs" / "one" / "report.json") << to_json(r).dump(2);

  EXPECT_EQ(cmd_report(dir / "runs", dir / "merged"), 1u);
  const auto summary = lines_of(dir / "merged" / "summary.csv");
  ASSERT_EQ(summary.size(), 2u);
  const auto header = split_csv(summary[0]);
  const auto row = split_csv(summary[1]);
  auto col = [&](const std::string& name) {
    return row[static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin())];
  };
  EXPECT_NEAR(std::stod(col("mean_f1")), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(std::stod(col("std_f1")), std::sqrt(13.0 / 300.0), 1e-12);
  EXPECT_EQ(col("n_seeds"), "3");
  EXPECT_EQ(col("blocks"), "[0]");

  const auto fig = lines_of(dir / "merged" / "fig2_series.csv");
  ASSERT_EQ(fig.size(), 2u);
  EXPECT_EQ(fig[0], "eta,method,mean_f1,std_f1");
  const auto fr = split_csv(fig[1]);
  EXPECT_NEAR(std::stod(fr[0]), 0.8, 1e-12);
  EXPECT_EQ(fr[1], "mora");
  EXPECT_NEAR(std::stod(fr[2]), 2.0 / 3.0, 1e-12);
}

TEST_F(HarnessTest, ReportOfSingleSeedRunHasZeroStd) {
  json doc = tiny_config();
  doc["sweep"]["seeds"] = {1};
  cmd_train(parse_experiment(doc), opts("single"));
  EXPECT_EQ(cmd_report(dir / "single", dir / "single"), 1u);
  const auto rows = lines_of(dir / "single" / "summary.csv");
  ASSERT_EQ(rows.size(), 2u);
  const auto header = split_csv(rows[0]);
  const auto row = split_csv(rows[1]);
  const auto idx = static_cast<std::size_t>(std::find(header.begin(), header.end(), "std_f1") - header.begin());
  EXPECT_EQ(std::stod(row[idx]), 0.0);
}

TEST_F(HarnessTest, CorruptOrMissingReportsAreNamed) {
  fs::create_directories(dir / "bad");
  std::ofstream(dir / "bad" / "report.json") << "{\"command\": \"train\"";
  try {
    cmd_report(dir / "bad", dir / "out");
    ADD_FAILURE() << "accepted a corrupt report";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("report.json"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cmd_report(dir / "absent", dir / "out"), IoError);
  fs::create_directories(dir / "empty");
  EXPECT_THROW(cmd_report(dir / "empty", dir / "out"), IoError);
}

TEST_F(HarnessTest, TamperedMeansAreRejected) {
  json doc = tiny_config();
  doc["sweep"]["seeds"] = {0};
  cmd_train(parse_experiment(doc), opts("tamper"));
  json report = json::parse(read_file(dir / "tamper" / "report.json"));
  report["variants"][0]["summary"][0]["mean_f1"] = 0.123456;
  std::ofstream(dir / "tamper" / "report.json") << report.dump();
  EXPECT_THROW(cmd_report(dir / "tamper", dir / "out"), ParseError);
}
