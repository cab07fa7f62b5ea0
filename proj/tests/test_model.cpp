#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "hierpath/error.hpp"
#include "hierpath/model.hpp"
#include "hierpath/training.hpp"
#include "oracles.hpp"

using namespace hierpath;
namespace fs = std::filesystem;

namespace {

// Toy: 3×8×8 input, blocks of 2 and 3 channels (maps 2×4×4 and 3×2×2), p = 4,
// hidden 4, and a two-level tree with N = 4.
ModelConfig toy(HeadKind kind) {
  ModelConfig c = load_config(std::string(HIERPATH_CONFIG_DIR) + "/toy.json");
  c.head.kind = kind;
  if (kind == HeadKind::general) c.head.layers = 1;
  return c;
}

ClassTree toy_tree() { return ClassTree::parse("r\t-\nA\tr\nB\tr\na\tA\nb\tB\n"); }

ClassTree ragged_tree() { return ClassTree::parse("r\t-\nA\tr\nB\tr\na\tA\nb\tB\nx\tb\ny\tx\n"); }

Tensor image(std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor(Shape{3, size, size}, rng, 0, 1);
}

std::size_t lstm_count(std::size_t in, std::size_t h) { return 4 * h * (in + h + 1); }

void expect_gradients(ModelBundle& m, std::span<const Sample> samples) {
  for (const auto& g : gradient_check(m, samples)) {
    EXPECT_LT(g.max_relative_error, 1e-4) << g.name;
  }
}

}  // namespace

TEST(Backbone, ShapesFollowFormulas) {
  BackboneConfig c;
  const CnnBackbone b = CnnBackbone::create(c, 1);
  ASSERT_EQ(b.shapes.size(), 4u);
  std::size_t w = c.image_size;
  for (std::size_t l = 0; l < 4; ++l) {
    w = pool_output_extent(conv_output_extent(w, c.kernel, 1, c.padding), c.pool, c.pool);
    EXPECT_EQ(b.shapes[l], (Shape{c.channels[l], w, w}));
  }
  Tape tape;
  const auto maps = cnn_forward(tape, b, tape.constant(image(32, 1)));
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(maps[l].shape(), b.shapes[l]);
  EXPECT_THROW(cnn_forward(tape, b, tape.constant(Tensor(Shape{3, 16, 16}))), DimensionError);
}

TEST(Backbone, ZeroInputZeroFeatures) {
  CnnBackbone b = CnnBackbone::create(BackboneConfig{}, 2);
  Tape tape;
  for (Var m : cnn_forward(tape, b, tape.constant(Tensor(Shape{3, 32, 32})))) {
    for (double v : m.value().values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backbone, UnitOneByOneIsRelu) {
  BackboneConfig c;
  c.in_channels = 1;
  c.image_size = 5;
  c.channels = {1};
  c.kernel = 1;
  c.padding = 0;
  c.pool = 0;
  CnnBackbone b = CnnBackbone::create(c, 3);
  b.weights[0] = Tensor(Shape{1, 1, 1, 1}, 1.0);
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor(Shape{1, 5, 5}, rng);
  Tape tape;
  const Tensor a = cnn_forward(tape, b, tape.constant(x))[0].value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(a[i], std::max(0.0, x[i]));
}

TEST(Model, ToyParameterCounts) {
  const std::size_t cnn = (2 * 3 * 9 + 2) + (3 * 2 * 9 + 3);
  const std::size_t converters = (2 * 2 + 1 * 4 + 2 * 4) + (2 * 3 + 1 * 2 + 2 * 2);
  ModelBundle fpl = build_model(toy(HeadKind::fpl), toy_tree(), 1);
  const std::size_t rnn = 2 * lstm_count(4, 4) + 2 * lstm_count(8, 4) + (4 * 8 + 4) + 4 * 4;
  EXPECT_EQ(fpl.parameter_count(), cnn + converters + rnn);
  EXPECT_EQ(fpl.parameter_count(), 897u);

  ModelBundle gen = build_model(toy(HeadKind::general), toy_tree(), 1);
  const std::size_t s2s = 2 * lstm_count(4, 4) + (4 * 8 + 4) + 3 * 4 + lstm_count(3, 4) + (4 * 4 + 4);
  EXPECT_EQ(gen.parameter_count(), cnn + converters + s2s);
  EXPECT_EQ(gen.parameter_count(), 625u);

  ModelBundle flat = build_model(toy(HeadKind::flat), toy_tree(), 1);
  EXPECT_EQ(flat.parameter_count(), cnn + 4 * 3 + 4);
}

TEST(Model, FplOutputsAndConfigErrors) {
  ModelBundle m = build_model(toy(HeadKind::fpl), toy_tree(), 1);
  Tape tape;
  const auto out = fpl_forward(tape, m, tape.constant(image(8, 1)));
  ASSERT_EQ(out.size(), 2u);
  for (Var o : out) EXPECT_EQ(o.size(), 4u);
  EXPECT_THROW(build_model(toy(HeadKind::fpl), ragged_tree(), 1), ConfigError);
  ModelConfig wrong = toy(HeadKind::fpl);
  wrong.schedule.steps = {{2}, {1}};
  EXPECT_THROW(build_model(wrong, toy_tree(), 1), ConfigError);
}

TEST(Model, ZeroedResidualArcMatchesPlainHead) {
  ModelConfig plain_cfg = toy(HeadKind::fpl);
  plain_cfg.head.residual = false;
  ModelBundle plain = build_model(plain_cfg, toy_tree(), 5);
  ModelBundle resi = build_model(toy(HeadKind::fpl), toy_tree(), 5);
  // ξ starts at the identity; with the alignment branch zeroed the arc is inert.
  EXPECT_TRUE(resi.rnn.xi.same_values(Tensor::identity(4)));
  std::fill(resi.rnn.align.values().begin(), resi.rnn.align.values().end(), 0.0);
  const Tensor x = image(8, 2);
  Tape t1, t2;
  const auto a = fpl_forward(t1, plain, t1.constant(x));
  const auto b = fpl_forward(t2, resi, t2.constant(x));
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_TRUE(a[t].value().same_values(b[t].value())) << "step " << t;
  }
}

TEST(Model, GeneralStepsAndNoPadding) {
  ModelBundle m = build_model(toy(HeadKind::general), ragged_tree(), 1);
  EXPECT_EQ(m.steps, 2u);
  const Tensor x = image(8, 3);
  Tape tape;
  Var in = tape.constant(x);
  EXPECT_EQ(general_forward(tape, m, in, 1).size(), 1u);
  const auto four = general_forward(tape, m, in, 4);
  ASSERT_EQ(four.size(), 4u);
  const auto two = general_forward(tape, m, in, 2);
  // Shorter decodes are exact prefixes of longer ones.
  for (std::size_t t = 0; t < 2; ++t) EXPECT_TRUE(two[t].value().same_values(four[t].value()));
  EXPECT_THROW(general_forward(tape, m, in, 5), UsageError);
}

TEST(Loss, PathLossWorkedValues) {
  Tape tape;
  const std::vector<Var> uniform{tape.constant(Tensor(Shape{4})), tape.constant(Tensor(Shape{4}))};
  const LabelPath y{1, 3};
  EXPECT_NEAR(path_loss(uniform, y).value().item(), 2 * std::log(4.0), 1e-12);
  const std::vector<double> w{2, 1};
  EXPECT_NEAR(path_loss(uniform, y, w).value().item(), 3 * std::log(4.0), 1e-12);

  std::mt19937_64 rng(6);
  const std::vector<Var> rand{tape.constant(oracle::random_tensor(Shape{4}, rng)),
                              tape.constant(oracle::random_tensor(Shape{4}, rng))};
  const double a = cross_entropy(rand[0], 0).value().item(), b = cross_entropy(rand[1], 2).value().item();
  EXPECT_NEAR(path_loss(rand, y, w).value().item(), 2 * a + b, 1e-12);
  EXPECT_GE(a, 0.0);

  // Levels and weights permuted together leave the loss unchanged.
  const std::vector<Var> swapped{rand[1], rand[0]};
  const std::vector<double> ws{1, 2};
  EXPECT_NEAR(path_loss(swapped, LabelPath{3, 1}, ws).value().item(), 2 * a + b, 1e-12);

  const std::vector<Var> margin{tape.constant(Tensor::vector({60, 0, 0, 0})), tape.constant(Tensor::vector({0, 0, 60, 0}))};
  EXPECT_LT(path_loss(margin, y).value().item(), 1e-20);
  EXPECT_THROW(path_loss(std::span<const Var>(uniform).first(1), y), UsageError);
}

TEST(Loss, MultilabelWorkedValues) {
  Tape tape;
  const std::vector<Var> zeros{tape.constant(Tensor(Shape{5})), tape.constant(Tensor(Shape{5}))};
  const std::vector<Tensor> targets{Tensor::vector({1, 0, 0, 0, 0}), Tensor::vector({0, 1, 1, 0, 0})};
  EXPECT_NEAR(multilabel_loss(zeros, targets).value().item(), 2 * 5 * std::log(2.0), 1e-12);

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Var> outs;
    std::vector<Tensor> tgt;
    double want = 0;
    for (int t = 0; t < 3; ++t) {
      const Tensor z = oracle::random_tensor(Shape{6}, rng, -4, 4);
      Tensor y(Shape{6});
      for (std::size_t i = 0; i < 6; ++i) {
        y[i] = static_cast<double>(rng() % 2);
        const double s = oracle::sig(z[i]);
        want -= y[i] * std::log(s) + (1 - y[i]) * std::log(1 - s);
      }
      outs.push_back(tape.constant(z));
      tgt.push_back(y);
    }
    EXPECT_NEAR(multilabel_loss(outs, tgt).value().item(), want, 1e-10);
  }
  EXPECT_THROW(multilabel_loss(zeros, std::span<const Tensor>(targets).first(1)), UsageError);

  // Masked: each level only scores its own nodes.
  const std::vector<Tensor> masks{Tensor::vector({1, 1, 0, 0, 0}), Tensor::vector({0, 0, 1, 1, 1})};
  EXPECT_NEAR(multilabel_loss(zeros, targets, masks).value().item(), 5 * std::log(2.0), 1e-12);
  const std::vector<Var> loud{tape.constant(Tensor::vector({0, 0, 50, 50, 50})),
                              tape.constant(Tensor::vector({50, 50, 0, 0, 0}))};
  EXPECT_NEAR(multilabel_loss(loud, targets, masks).value().item(),
              multilabel_loss(zeros, targets, masks).value().item(), 1e-12);
  EXPECT_THROW(multilabel_loss(zeros, targets, std::span<const Tensor>(masks).first(1)), UsageError);
}

TEST(Loss, LevelMasks) {
  const ClassTree tree = ragged_tree();
  const auto m = level_masks(tree, 4);
  ASSERT_EQ(m.size(), 4u);
  std::vector<double> total(tree.num_classes(), 0.0);
  for (std::size_t t = 0; t < 4; ++t) {
    for (NodeId v = 1; v <= tree.num_classes(); ++v) {
      EXPECT_EQ(m[t][v - 1], tree.depth(v) == t + 1 ? 1.0 : 0.0);
      total[v - 1] += m[t][v - 1];
    }
  }
  for (double c : total) EXPECT_EQ(c, 1.0);
}

TEST(Loss, LevelTargets) {
  const ClassTree tree = ragged_tree();
  const std::vector<LabelPath> paths{{1, 3}, {2, 4, 5, 6}};
  const auto t = level_targets(paths, tree, 4);
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t[0].values(), (std::vector<double>{1, 1, 0, 0, 0, 0}));
  EXPECT_EQ(t[1].values(), (std::vector<double>{0, 0, 1, 1, 0, 0}));
  EXPECT_EQ(t[3].values(), (std::vector<double>{0, 0, 0, 0, 0, 1}));
}

TEST(Model, FlatBaseline) {
  ModelBundle m = build_model(toy(HeadKind::flat), toy_tree(), 1);
  Tape tape;
  Var o = flat_baseline_forward(tape, m, tape.constant(image(8, 4)));
  EXPECT_EQ(o.size(), 4u);
  double s = 0;
  for (double v : softmax(o).value().values()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(ModelGradient, Fpl) {
  ModelBundle m = build_model(toy(HeadKind::fpl), toy_tree(), 2);
  const std::vector<Sample> s{{"a", image(8, 5), {{1, 3}}}, {"b", image(8, 6), {{2, 4}}}};
  expect_gradients(m, s);
}

TEST(ModelGradient, FplConvAndPoolConverters) {
  for (ConversionKind kind : {ConversionKind::conv, ConversionKind::pool}) {
    ModelConfig c = toy(HeadKind::fpl);
    c.conversion.kind = kind;
    ModelBundle m = build_model(c, toy_tree(), 2);
    const std::vector<Sample> s{{"a", image(8, 5), {{1, 3}}}};
    expect_gradients(m, s);
  }
}

TEST(ModelGradient, General) {
  ModelBundle m = build_model(toy(HeadKind::general), ragged_tree(), 3);
  const std::vector<Sample> s{{"a", image(8, 7), {{1, 3}}}, {"b", image(8, 8), {{2, 4, 5, 6}}}};
  expect_gradients(m, s);
}

TEST(ModelGradient, GeneralMultilabel) {
  ModelConfig c = toy(HeadKind::general);
  c.head.multilabel = true;
  ModelBundle m = build_model(c, ragged_tree(), 3);
  const std::vector<Sample> s{{"a", image(8, 9), {{1, 3}, {2, 4, 5}}}};
  expect_gradients(m, s);
}

TEST(ModelGradient, Flat) {
  ModelBundle m = build_model(toy(HeadKind::flat), toy_tree(), 4);
  const std::vector<Sample> s{{"a", image(8, 10), {{1, 3}}}};
  expect_gradients(m, s);
}

TEST(Checkpoint, RoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "hierpath_ckpt_test";
  fs::remove_all(dir);
  ModelBundle m = build_model(toy(HeadKind::general), ragged_tree(), 6);
  save_checkpoint(m, dir.string(), 17);
  ModelBundle back = load_checkpoint(dir.string());
  EXPECT_EQ(back.seed, 6u);
  EXPECT_EQ(back.parameter_count(), m.parameter_count());
  const Tensor x = image(8, 11);
  const auto a = infer_logits(m, x), b = infer_logits(back, x);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_TRUE(a[t].same_values(b[t]));

  std::ifstream in(dir / "manifest.json");
  Json manifest = Json::parse(in);
  EXPECT_EQ(manifest["schema_version"], kSchemaVersion);
  EXPECT_EQ(manifest["step"], 17);

  std::ofstream(dir / "tree.txt") << "r\t-\nonly\tr\n";
  EXPECT_THROW(load_checkpoint(dir.string()), LoadError);
  fs::remove_all(dir);
}
