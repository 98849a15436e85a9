#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "mora/error.hpp"
#include "mora/gradcheck.hpp"
#include "mora/model.hpp"
#include "mora/training.hpp"

using namespace mora;
using namespace mora::testing;

namespace {

constexpr MissingPattern kPatterns[] = {MissingPattern::complete(), MissingPattern::image_only(),
                                        MissingPattern::text_only()};

ModelConfig toy_config(AdapterKind kind = AdapterKind::mora) {
  ModelConfig c;
  c.hidden_dim = 16;
  c.num_blocks = 1;
  c.num_heads = 2;
  c.vocab_size = 20;
  c.max_text_len = 4;
  c.image_grid = 2;
  c.patch_dim = 3;
  c.num_labels = 3;
  c.adapter.kind = kind;
  c.adapter.rank = 2;
  return c;
}

Sample random_sample(Rng& rng, const ModelConfig& cfg, MissingPattern pattern) {
  Sample s;
  s.image = random_matrix(rng, cfg.num_patches(), cfg.patch_dim);
  for (Index t = 0; t < cfg.max_text_len; ++t) s.text.push_back(1 + static_cast<int>(rng() % (cfg.vocab_size - 1)));
  s.pattern = pattern;
  s.labels = RowVector::Zero(cfg.num_labels);
  for (Index l = 0; l < cfg.num_labels; ++l) s.labels(l) = static_cast<double>(rng() % 2);
  install_dummies(s, cfg.sample_shape());
  return s;
}

// Gives every adapter up-projection nonzero values so the adapted path matters.
void perturb_adapters(MultimodalEncoder& m, std::uint64_t seed) {
  Rng rng(seed);
  for (NamedTensor& p : m.parameters())
    if (p.name.starts_with("mora.") || p.name.starts_with("lora."))
      p.tensor.mutable_value() = random_matrix(rng, p.tensor.rows(), p.tensor.cols(), 0.3);
}

const Matrix& entry(const Checkpoint& ck, const std::string& name) {
  const Matrix* m = ck.find(name);
  if (!m) throw std::runtime_error("missing " + name);
  return *m;
}

Eigen::MatrixXd layer_norm_oracle(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& gain,
                                  const Eigen::RowVectorXd& bias, double eps) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double mu = 0;
    for (Index j = 0; j < x.cols(); ++j) mu += x(i, j);
    mu /= static_cast<double>(x.cols());
    double var = 0;
    for (Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<double>(x.cols());
    for (Index j = 0; j < x.cols(); ++j) out(i, j) = (x(i, j) - mu) / std::sqrt(var + eps) * gain(j) + bias(j);
  }
  return out;
}

double gelu_oracle(double v) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
}

Eigen::MatrixXd affine(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w, const Eigen::RowVectorXd& b) {
  Eigen::MatrixXd out(x.rows(), w.rows());
  for (Index i = 0; i < x.rows(); ++i)
    for (Index o = 0; o < w.rows(); ++o) {
      double acc = b(o);
      for (Index j = 0; j < x.cols(); ++j) acc += x(i, j) * w(o, j);
      out(i, o) = acc;
    }
  return out;
}

// Straight-line single-sample forward written against the checkpoint names
// only, sharing no code with the encoder.
Eigen::RowVectorXd forward_oracle(const ModelConfig& cfg, const Checkpoint& ck, const Sample& s) {
  const Index d = cfg.hidden_dim, P = cfg.num_patches(), T = cfg.max_text_len, H = cfg.num_heads;
  const Index hd = d / H;
  Eigen::MatrixXd x(1 + P + T, d);
  x.row(0) = entry(ck, "embed.cls").row(0);
  const bool img = s.pattern.has(Modality::image), txt = s.pattern.has(Modality::text);
  for (Index p = 0; p < P; ++p)
    for (Index j = 0; j < d; ++j) {
      double acc = entry(ck, "embed.patch.bias")(0, j) + entry(ck, "embed.type")(0, j) +
                   entry(ck, "embed.image_pos")(p, j);
      for (Index c = 0; c < cfg.patch_dim; ++c)
        acc += (img ? s.image(p, c) : 0.0) * entry(ck, "embed.patch.weight")(j, c);
      x(1 + p, j) = acc;
    }
  for (Index t = 0; t < T; ++t) {
    const int id = txt ? s.text[static_cast<std::size_t>(t)] : 0;
    for (Index j = 0; j < d; ++j)
      x(1 + P + t, j) =
          entry(ck, "embed.text")(id, j) + entry(ck, "embed.type")(1, j) + entry(ck, "embed.text_pos")(t, j);
  }

  for (Index b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    auto w = [&](const std::string& n) { return entry(ck, p + n); };
    const Eigen::MatrixXd h = layer_norm_oracle(x, w("ln1.gain"), w("ln1.bias"), cfg.ln_eps);
    auto proj = [&](const char* name) {
      Eigen::MatrixXd W = w(std::string("attn.") + name + ".weight");
      const std::string key = "mora." + std::to_string(b) + "." + name + ".";
      if (ck.find(key + "A")) {
        Eigen::MatrixXd up = Eigen::MatrixXd::Zero(d, cfg.adapter.rank);
        if (img) up += entry(ck, key + "B_img");
        if (txt) up += entry(ck, key + "B_txt");
        W += up * entry(ck, key + "A");
      }
      return affine(h, W, w(std::string("attn.") + name + ".bias"));
    };
    const Eigen::MatrixXd q = proj("query"), k = proj("key"), v = proj("value");
    Eigen::MatrixXd heads(x.rows(), d);
    for (Index head = 0; head < H; ++head) {
      for (Index i = 0; i < x.rows(); ++i) {
        std::vector<double> score(static_cast<std::size_t>(x.rows()));
        double mx = -1e300;
        for (Index j = 0; j < x.rows(); ++j) {
          double dot = 0;
          for (Index c = 0; c < hd; ++c) dot += q(i, head * hd + c) * k(j, head * hd + c);
          score[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, score[static_cast<std::size_t>(j)]);
        }
        double z = 0;
        for (double& sc : score) z += (sc = std::exp(sc - mx));
        for (Index c = 0; c < hd; ++c) {
          double acc = 0;
          for (Index j = 0; j < x.rows(); ++j) acc += score[static_cast<std::size_t>(j)] / z * v(j, head * hd + c);
          heads(i, head * hd + c) = acc;
        }
      }
    }
    x += affine(heads, w("attn.out.weight"), w("attn.out.bias"));
    Eigen::MatrixXd f = affine(layer_norm_oracle(x, w("ln2.gain"), w("ln2.bias"), cfg.ln_eps), w("mlp.fc1.weight"),
                               w("mlp.fc1.bias"));
    f = f.unaryExpr(&gelu_oracle);
    x += affine(f, w("mlp.fc2.weight"), w("mlp.fc2.bias"));
  }
  Eigen::MatrixXd cls =
      layer_norm_oracle(x.topRows(1), entry(ck, "final_ln.gain"), entry(ck, "final_ln.bias"), cfg.ln_eps);
  Eigen::MatrixXd hidden =
      affine(cls, entry(ck, "classifier.fc1.weight"), entry(ck, "classifier.fc1.bias")).unaryExpr(&gelu_oracle);
  return affine(hidden, entry(ck, "classifier.fc2.weight"), entry(ck, "classifier.fc2.bias")).row(0);
}

std::int64_t closed_form_classifier(const ModelConfig& c) {
  const std::int64_t d = c.hidden_dim;
  return (2 * d * d + 2 * d) + (c.num_labels * 2 * d + c.num_labels);
}

std::int64_t closed_form_adapters(const ModelConfig& c) {
  if (c.adapter.kind == AdapterKind::none) return 0;
  const std::int64_t d = c.hidden_dim, r = c.adapter.rank;
  const std::int64_t ups = c.adapter.kind == AdapterKind::mora ? 2 : 1;
  const auto matrices = static_cast<std::int64_t>(c.adapter.target_blocks.size() * c.adapter.target_projections.size());
  return matrices * (r * d + ups * d * r);
}

std::int64_t closed_form_total(const ModelConfig& c) {
  const std::int64_t d = c.hidden_dim, h = c.mlp_ratio * d;
  const std::int64_t embed = c.vocab_size * d + (d * c.patch_dim + d) + 2 * d + c.num_patches() * d +
                             c.max_text_len * d + d;
  const std::int64_t block = 2 * d + 4 * (d * d + d) + 2 * d + (h * d + h) + (d * h + d);
  return embed + c.num_blocks * block + 2 * d + closed_form_classifier(c) + closed_form_adapters(c);
}

}  // namespace

TEST(Embed, FixedLengthForEveryPattern) {
  ModelConfig cfg;
  MultimodalEncoder m(cfg, 1);
  Rng rng(2);
  for (auto p : kPatterns) {
    const Tensor e = m.embed_sample(random_sample(rng, cfg, p));
    EXPECT_EQ(e.rows(), 1 + 16 + 8);
    EXPECT_EQ(e.cols(), cfg.hidden_dim);
  }
}

TEST(Embed, MissingImageDummyIsDeterministicAndPositionDependent) {
  ModelConfig cfg = toy_config();
  MultimodalEncoder m(cfg, 3);
  Rng rng(4);
  Sample a = random_sample(rng, cfg, MissingPattern::text_only());
  Sample b = random_sample(rng, cfg, MissingPattern::text_only());
  b.text = a.text;
  EXPECT_EQ(m.embed_sample(a).value(), m.embed_sample(b).value());

  Sample present = a;
  present.pattern = MissingPattern::complete();
  present.image = random_matrix(rng, cfg.num_patches(), cfg.patch_dim);
  const Matrix dummy_rows = m.embed_sample(a).value().middleRows(1, cfg.num_patches());
  const Matrix real_rows = m.embed_sample(present).value().middleRows(1, cfg.num_patches());
  for (Index p = 0; p < cfg.num_patches(); ++p) EXPECT_NE(dummy_rows.row(p), real_rows.row(p));
  EXPECT_NE(dummy_rows.row(0), dummy_rows.row(1));
}

TEST(Embed, OutOfVocabularyTokenIsIngestionError) {
  ModelConfig cfg = toy_config();
  MultimodalEncoder m(cfg, 3);
  Rng rng(4);
  Sample s = random_sample(rng, cfg, MissingPattern::complete());
  s.text[1] = static_cast<int>(cfg.vocab_size);
  EXPECT_THROW(m.embed_sample(s), IngestionError);
  s.text[1] = -1;
  EXPECT_THROW(m.embed_sample(s), IngestionError);
  s.pattern = MissingPattern::image_only();
  EXPECT_NO_THROW(m.embed_sample(s));
}

TEST(Forward, FreshAdaptersGiveIdenticalLogits) {
  ModelConfig with = toy_config(AdapterKind::mora);
  ModelConfig without = toy_config(AdapterKind::none);
  with.num_blocks = without.num_blocks = 2;
  MultimodalEncoder a(with, 7), b(without, 7);
  Rng rng(8);
  for (int i = 0; i < 30; ++i) {
    const Sample s = random_sample(rng, with, kPatterns[i % 3]);
    Graph g1(false), g2(false);
    EXPECT_EQ(a.forward(g1, s).value(), b.forward(g2, s).value());
  }
}

TEST(Forward, MatchesStraightLineOracle) {
  for (AdapterKind kind : {AdapterKind::mora, AdapterKind::none}) {
    const ModelConfig cfg = toy_config(kind);
    MultimodalEncoder m(cfg, 11);
    perturb_adapters(m, 12);
    const Checkpoint ck = m.state();
    Rng rng(13);
    for (int i = 0; i < 6; ++i) {
      const Sample s = random_sample(rng, cfg, kPatterns[i % 3]);
      Graph g(false);
      const Matrix got = m.forward(g, s).value();
      const Eigen::RowVectorXd want = forward_oracle(cfg, ck, s);
      ASSERT_EQ(got.cols(), cfg.num_labels);
      EXPECT_LT((got.row(0) - want).cwiseAbs().maxCoeff(), 1e-10) << to_string(s.pattern);
    }
  }
}

TEST(Forward, IsPureAndRepeatable) {
  const ModelConfig cfg = toy_config();
  MultimodalEncoder m(cfg, 5);
  perturb_adapters(m, 6);
  Rng rng(7);
  const Sample s = random_sample(rng, cfg, MissingPattern::complete());
  Graph g1, g2(false);
  EXPECT_EQ(m.forward(g1, s).value(), m.forward(g2, s).value());
}

TEST(Forward, PermutingClassifierRowsPermutesLogits) {
  const ModelConfig cfg = toy_config();
  MultimodalEncoder m(cfg, 5);
  Rng rng(9);
  Tensor w2 = m.classifier().w2, b2 = m.classifier().b2;
  b2.mutable_value() = random_matrix(rng, 1, cfg.num_labels);
  const Sample s = random_sample(rng, cfg, MissingPattern::image_only());
  Graph g(false);
  const Matrix before = m.forward(g, s).value();
  const std::vector<Index> perm{2, 0, 1};
  Matrix pw(w2.rows(), w2.cols()), pb(1, b2.cols());
  for (Index i = 0; i < 3; ++i) {
    pw.row(i) = w2.value().row(perm[static_cast<std::size_t>(i)]);
    pb(0, i) = b2.value()(0, perm[static_cast<std::size_t>(i)]);
  }
  w2.mutable_value() = pw;
  b2.mutable_value() = pb;
  const Matrix after = m.forward(g, s).value();
  for (Index i = 0; i < 3; ++i) EXPECT_EQ(after(0, i), before(0, perm[static_cast<std::size_t>(i)]));
}

TEST(Freeze, OnlyAdaptersAndClassifierTrain) {
  ModelConfig cfg = toy_config();
  MultimodalEncoder m(cfg, 1);
  EXPECT_FALSE(m.backbone_frozen());
  m.freeze_backbone();
  EXPECT_TRUE(m.backbone_frozen());
  std::set<std::string> names;
  for (const NamedTensor& p : m.trainable_parameters()) names.insert(p.name);
  const std::set<std::string> expected{"classifier.fc1.weight", "classifier.fc1.bias", "classifier.fc2.weight",
                                       "classifier.fc2.bias",   "mora.0.query.A",        "mora.0.query.B_img",
                                       "mora.0.query.B_txt",    "mora.0.value.A",        "mora.0.value.B_img",
                                       "mora.0.value.B_txt"};
  EXPECT_EQ(names, expected);
  const auto counts = m.count_params();
  m.freeze_backbone();
  EXPECT_EQ(m.count_params().trainable, counts.trainable);
  std::set<std::string> again;
  for (const NamedTensor& p : m.trainable_parameters()) again.insert(p.name);
  EXPECT_EQ(again, expected);
}

TEST(Freeze, GradientsReachOnlyTrainableTensors) {
  ModelConfig cfg = toy_config();
  cfg.num_blocks = 2;
  MultimodalEncoder m(cfg, 2);
  m.freeze_backbone();
  perturb_adapters(m, 3);
  Rng rng(4);
  const Sample s = random_sample(rng, cfg, MissingPattern::image_only());
  Graph g;
  const Sample* batch[] = {&s};
  backward(batch_loss(g, m, batch), g);
  for (const NamedTensor& p : m.parameters()) {
    if (!p.tensor.requires_grad()) {
      EXPECT_FALSE(p.tensor.has_grad()) << p.name;
      continue;
    }
    if (p.name.ends_with("B_txt"))
      EXPECT_TRUE(p.tensor.grad().isZero(0.0)) << p.name;
    else if (p.name.starts_with("classifier.") && p.name.ends_with("weight"))
      EXPECT_GT(p.tensor.grad().cwiseAbs().maxCoeff(), 0.0) << p.name;
  }
}

TEST(Freeze, TrainingStepLeavesBackboneBitIdentical) {
  ModelConfig cfg = toy_config();
  MultimodalEncoder m(cfg, 2);
  m.freeze_backbone();
  const Checkpoint before = m.state();
  Rng rng(5);
  std::vector<Sample> samples;
  for (auto p : kPatterns) samples.push_back(random_sample(rng, cfg, p));
  std::vector<const Sample*> batch;
  for (const Sample& s : samples) batch.push_back(&s);
  auto params = trainable_params(m);
  OptimizerState st = init_optimizer_state(params);
  Graph g;
  backward(batch_loss(g, m, batch), g);
  adamw_step(params, st, 1e-2, TrainConfig{});
  const Checkpoint after = m.state();
  ASSERT_EQ(before.entries.size(), after.entries.size());
  bool trainable_moved = false;
  for (std::size_t i = 0; i < before.entries.size(); ++i) {
    const std::string& name = before.entries[i].first;
    const bool trainable = name.starts_with("classifier.") || name.starts_with("mora.");
    if (trainable)
      trainable_moved |= before.entries[i].second != after.entries[i].second;
    else
      EXPECT_EQ(before.entries[i].second, after.entries[i].second) << name;
  }
  EXPECT_TRUE(trainable_moved);
}

TEST(Forward, FullModelGradientsPassFiniteDifferences) {
  ModelConfig cfg = toy_config();
  MultimodalEncoder m(cfg, 21);
  m.freeze_backbone();
  perturb_adapters(m, 22);
  Rng rng(23);
  std::vector<Sample> samples;
  for (auto p : kPatterns) samples.push_back(random_sample(rng, cfg, p));
  std::vector<const Sample*> batch;
  for (const Sample& s : samples) batch.push_back(&s);
  for (NamedTensor& p : m.trainable_parameters()) {
    ScalarFn f = [&](Graph& g, const Tensor&) { return batch_loss(g, m, batch); };
    EXPECT_LT(finite_diff_check(f, p.tensor), 1e-4) << p.name;
  }
}

TEST(Params, LayoutMatchesInstantiatedModel) {
  for (AdapterKind kind : {AdapterKind::mora, AdapterKind::lora, AdapterKind::none}) {
    ModelConfig cfg;
    cfg.adapter.kind = kind;
    MultimodalEncoder m(cfg, 1);
    m.freeze_backbone();
    const auto layout = parameter_layout(cfg);
    const auto params = m.parameters();
    ASSERT_EQ(layout.size(), params.size());
    for (std::size_t i = 0; i < layout.size(); ++i) {
      EXPECT_EQ(layout[i].name, params[i].name);
      EXPECT_EQ(layout[i].rows, params[i].tensor.rows()) << layout[i].name;
      EXPECT_EQ(layout[i].cols, params[i].tensor.cols()) << layout[i].name;
      EXPECT_EQ(layout[i].trainable, params[i].tensor.requires_grad()) << layout[i].name;
      if (layout[i].trainable) EXPECT_EQ(layout[i].decay, params[i].decay) << layout[i].name;
    }
    EXPECT_EQ(count_params(layout).total, m.count_params().total);
    EXPECT_EQ(count_params(layout).trainable, m.count_params().trainable);
  }
}

TEST(Params, CountsMatchClosedForm) {
  for (AdapterKind kind : {AdapterKind::mora, AdapterKind::lora, AdapterKind::none}) {
    ModelConfig cfg;
    cfg.adapter.kind = kind;
    const ParamCounts c = count_params(parameter_layout(cfg));
    EXPECT_EQ(c.total, closed_form_total(cfg));
    EXPECT_EQ(c.trainable, closed_form_classifier(cfg) + closed_form_adapters(cfg));
  }
}

TEST(Params, LargeConfigStaysUnderBudget) {
  ModelConfig cfg;
  cfg.hidden_dim = 768;
  cfg.num_blocks = 12;
  cfg.num_heads = 12;
  cfg.mlp_ratio = 4;
  cfg.vocab_size = 30522;
  cfg.max_text_len = 40;
  cfg.image_grid = 12;
  cfg.patch_dim = 768;
  cfg.num_labels = 20;
  cfg.adapter.rank = 4;
  const ParamCounts c = count_params(parameter_layout(cfg));
  EXPECT_EQ(c.total, closed_form_total(cfg));
  EXPECT_EQ(c.trainable, closed_form_classifier(cfg) + closed_form_adapters(cfg));
  EXPECT_LT(c.ratio(), 0.016);
}

TEST(Params, DoublingRankAddsRankTimesInPlusTwoOutPerMatrix) {
  ModelConfig cfg;
  cfg.adapter.rank = 4;
  const auto base = count_params(parameter_layout(cfg)).trainable;
  cfg.adapter.rank = 8;
  const auto doubled = count_params(parameter_layout(cfg)).trainable;
  const std::int64_t d = cfg.hidden_dim, r = 4, matrices = 2;
  EXPECT_EQ(doubled - base, matrices * r * (d + 2 * d));
}

TEST(Params, NoAdaptersLeavesOnlyClassifierTrainable) {
  ModelConfig cfg;
  cfg.adapter.kind = AdapterKind::none;
  MultimodalEncoder m(cfg, 1);
  m.freeze_backbone();
  EXPECT_EQ(m.count_params().trainable, closed_form_classifier(cfg));
  for (const NamedTensor& p : m.trainable_parameters()) EXPECT_TRUE(p.name.starts_with("classifier.")) << p.name;
}

TEST(Params, BlockZeroOnlyCostsLessThanAllBlocks) {
  ModelConfig cfg;
  const double one = count_params(parameter_layout(cfg)).ratio();
  cfg.adapter.target_blocks = {0, 1};
  EXPECT_LT(one, count_params(parameter_layout(cfg)).ratio());
}

TEST(Config, RejectsInvalidAdapterPlacement) {
  ModelConfig cfg;
  cfg.adapter.rank = cfg.hidden_dim + 1;
  EXPECT_THROW(MultimodalEncoder(cfg, 1), ConfigError);
  cfg.adapter.rank = cfg.hidden_dim;
  EXPECT_NO_THROW(MultimodalEncoder(cfg, 1));
  cfg.adapter.target_blocks = {static_cast<int>(cfg.num_blocks)};
  EXPECT_THROW(MultimodalEncoder(cfg, 1), ConfigError);
  ModelConfig heads;
  heads.num_heads = 5;
  EXPECT_THROW(heads.validate(), ConfigError);
}

TEST(State, RoundTripsAndRejectsMismatches) {
  ModelConfig cfg = toy_config();
  MultimodalEncoder a(cfg, 1), b(cfg, 2);
  perturb_adapters(a, 3);
  b.load_state(a.state());
  EXPECT_EQ(a.state(), b.state());
  Rng rng(4);
  const Sample s = random_sample(rng, cfg, MissingPattern::complete());
  Graph g(false);
  EXPECT_EQ(a.forward(g, s).value(), b.forward(g, s).value());

  Checkpoint unknown;
  unknown.entries.emplace_back("nope", Matrix::Zero(1, 1));
  EXPECT_THROW(b.load_state(unknown), ParseError);
  Checkpoint wrong;
  wrong.entries.emplace_back("classifier.fc1.bias", Matrix::Zero(1, 3));
  EXPECT_THROW(b.load_state(wrong), ParseError);
}

TEST(State, LoraAndMoraShareDownProjectionInit) {
  ModelConfig m = toy_config(AdapterKind::mora), l = toy_config(AdapterKind::lora);
  MultimodalEncoder a(m, 9), b(l, 9);
  EXPECT_EQ(*a.state().find("mora.0.query.A"), *b.state().find("lora.0.query.A"));
  EXPECT_EQ(*a.state().find("classifier.fc1.weight"), *b.state().find("classifier.fc1.weight"));
}
