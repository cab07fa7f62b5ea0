#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <limits>

#include "hierpath/data.hpp"
#include "hierpath/error.hpp"
#include "hierpath/training.hpp"

using namespace hierpath;

namespace {

ClassTree small_tree() {
  return ClassTree::parse("r\t-\nA\tr\nB\tr\na1\tA\na2\tA\nb1\tB\nb2\tB\n");
}

std::vector<Sample> small_data(std::size_t per_leaf, std::uint64_t seed, bool multilabel = false) {
  SyntheticRecipe r;
  r.per_leaf = per_leaf;
  r.seed = seed;
  r.multilabel = multilabel;
  return generate_samples(small_tree(), r);
}

ModelConfig small_config(HeadKind kind) {
  ModelConfig c;
  c.head.kind = kind;
  c.head.hidden = 8;
  c.head.layers = 1;
  c.head.decoder_hidden = 8;
  c.head.embedding = 4;
  c.conversion.p = 16;
  c.training.epochs = 4;
  c.training.batch_size = 8;
  return c;
}

std::vector<double> flat_params(ModelBundle& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor->values().begin(), p.tensor->values().end());
  return out;
}

}  // namespace

TEST(Phases, DefaultAlternating) {
  const auto p = default_alternating_schedule(4);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].epochs, 1u);
  EXPECT_EQ(p[1].epochs, 1u);
  EXPECT_EQ(p[2].epochs, 2u);
  EXPECT_TRUE(p[0].freeze_cnn);
  EXPECT_FALSE(p[0].freeze_head);
  EXPECT_FALSE(p[1].freeze_cnn);
  EXPECT_TRUE(p[1].freeze_head);
  EXPECT_FALSE(p[2].freeze_cnn || p[2].freeze_head);
  const auto twenty = default_alternating_schedule(20);
  EXPECT_EQ(twenty[0].epochs + twenty[1].epochs + twenty[2].epochs, 20u);
  EXPECT_EQ(twenty[2].epochs, 2 * twenty[0].epochs);
  EXPECT_THROW(default_alternating_schedule(2), ConfigError);
}

TEST(Phases, Validation) {
  const std::vector<Phase> all_frozen{{2, true, true}};
  EXPECT_THROW(validate_phases(all_frozen), ConfigError);
  const std::vector<Phase> empty_phase{{0, false, false}};
  EXPECT_THROW(validate_phases(empty_phase), ConfigError);
  const std::vector<Phase> p{{1, true, false}, {2, false, false}};
  EXPECT_EQ(phase_for_epoch(p, 0), 0u);
  EXPECT_EQ(phase_for_epoch(p, 1), 1u);
  EXPECT_EQ(phase_for_epoch(p, 2), 1u);
}

TEST(Phases, EveryParameterHasOneOwner) {
  for (HeadKind kind : {HeadKind::fpl, HeadKind::general, HeadKind::flat}) {
    ModelBundle m = build_model(small_config(kind), small_tree(), 1);
    std::size_t cnn = 0, head = 0;
    for (const auto& p : m.parameters()) (p.component == Component::cnn ? cnn : head) += 1;
    EXPECT_EQ(cnn, 2 * m.backbone.num_layers());
    EXPECT_GT(head, 0u);
  }
}

TEST(TrainEpoch, ZeroLearningRateLeavesParameters) {
  ModelConfig c = small_config(HeadKind::fpl);
  c.training.lr = 0;
  ModelBundle m = build_model(c, small_tree(), 1);
  const auto before = flat_params(m);
  const auto data = small_data(4, 1);
  TrainState state;
  const auto phases = resolve_phases(c.training);
  const double loss = train_epoch(m, data, phases, state, 1);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
  EXPECT_EQ(flat_params(m), before);
}

TEST(TrainEpoch, FrozenComponentsKeepTheirBytes) {
  ModelConfig c = small_config(HeadKind::fpl);
  ModelBundle m = build_model(c, small_tree(), 2);
  const auto data = small_data(4, 2);
  const auto phases = resolve_phases(c.training);
  TrainState state;

  const auto cnn0 = component_hash(m, Component::cnn), head0 = component_hash(m, Component::head);
  train_epoch(m, data, phases, state, 3);  // head trains, CNN frozen
  EXPECT_EQ(component_hash(m, Component::cnn), cnn0);
  const auto head1 = component_hash(m, Component::head);
  EXPECT_NE(head1, head0);

  train_epoch(m, data, phases, state, 3);  // CNN trains, head frozen
  EXPECT_EQ(component_hash(m, Component::head), head1);
  EXPECT_NE(component_hash(m, Component::cnn), cnn0);
}

TEST(TrainEpoch, SeededRunsAreBitIdentical) {
  for (OptimizerKind opt : {OptimizerKind::sgd, OptimizerKind::adam}) {
    ModelConfig c = small_config(HeadKind::general);
    c.training.optimizer = opt;
    c.training.lr = opt == OptimizerKind::adam ? 1e-3 : 0.01;
    const auto data = small_data(4, 4);
    std::vector<std::vector<double>> results;
    std::vector<std::vector<double>> curves;
    for (int run = 0; run < 2; ++run) {
      ModelBundle m = build_model(c, small_tree(), 7);
      std::vector<double> curve;
      fit(m, data, data, 11, [&](const EpochLog& log) { curve.push_back(log.loss); });
      results.push_back(flat_params(m));
      curves.push_back(curve);
    }
    EXPECT_EQ(results[0], results[1]);
    EXPECT_EQ(curves[0], curves[1]);
  }
}

TEST(TrainEpoch, ThreadCountDoesNotChangeResult) {
  const auto data = small_data(4, 5);
  std::vector<std::vector<double>> results;
  for (std::size_t threads : {1u, 3u}) {
    ModelConfig c = small_config(HeadKind::fpl);
    c.training.threads = threads;
    ModelBundle m = build_model(c, small_tree(), 8);
    TrainState state;
    train_epoch(m, data, resolve_phases(c.training), state, 2);
    results.push_back(flat_params(m));
  }
  EXPECT_EQ(results[0], results[1]);
}

TEST(TrainEpoch, NonFiniteLossAborts) {
  ModelConfig c = small_config(HeadKind::fpl);
  ModelBundle m = build_model(c, small_tree(), 1);
  m.rnn.proj_b[0] = std::numeric_limits<double>::quiet_NaN();
  const auto data = small_data(2, 1);
  TrainState state;
  try {
    train_epoch(m, data, resolve_phases(c.training), state, 1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

TEST(Fit, LossFallsOverFirstPhaseAndFitsSeparableData) {
  ModelConfig c = small_config(HeadKind::fpl);
  c.training.epochs = 8;
  ModelBundle m = build_model(c, small_tree(), 3);
  const auto data = small_data(30, 6);
  std::vector<EpochLog> logs;
  fit(m, data, data, 1, [&](const EpochLog& l) { logs.push_back(l); });
  ASSERT_EQ(logs.size(), 8u);
  // First phase holds epochs 1-2; allow 5% noise between epoch averages.
  EXPECT_LE(logs[1].loss, logs[0].loss * 1.05);
  EXPECT_LT(logs.back().loss, logs.front().loss);
  const EvalResult r = evaluate(m, data, EvalMode::fpl);
  EXPECT_EQ(r.path.score, 1.0);
  EXPECT_EQ(r.node.score, 1.0);
}

TEST(Evaluate, ModeChecks) {
  ModelBundle fpl = build_model(small_config(HeadKind::fpl), small_tree(), 1);
  const auto data = small_data(1, 1);
  EXPECT_THROW(evaluate(fpl, data, EvalMode::general), ConfigError);
  EXPECT_THROW(evaluate(fpl, data, EvalMode::multilabel), ConfigError);
  EXPECT_EQ(default_eval_mode(fpl), EvalMode::fpl);

  ModelConfig ml = small_config(HeadKind::general);
  ml.head.multilabel = true;
  ModelBundle m = build_model(ml, small_tree(), 1);
  EXPECT_EQ(default_eval_mode(m), EvalMode::multilabel);
  EXPECT_THROW(evaluate(m, data, EvalMode::multilabel), UsageError);
  const EvalResult r = evaluate(m, data, EvalMode::multilabel, data);
  ASSERT_TRUE(r.threshold);
  EXPECT_EQ(r.path.kind, "path_f1");
  EXPECT_EQ(r.path.threshold, r.threshold->tau);
}

TEST(Evaluate, FlatLiftsFinalNode) {
  ModelBundle m = build_model(small_config(HeadKind::flat), small_tree(), 1);
  const auto data = small_data(2, 1);
  const EvalResult r = evaluate(m, data, EvalMode::flat);
  for (std::size_t i = 0; i < r.predictions.size(); ++i) {
    ASSERT_EQ(r.predictions[i].size(), 1u);
    const LabelPath& p = r.predictions[i][0];
    EXPECT_EQ(p, m.tree.path_to(p.back()));
  }
}

TEST(Evaluate, PathMatchImpliesNodesCorrect) {
  ModelConfig c = small_config(HeadKind::fpl);
  ModelBundle m = build_model(c, small_tree(), 5);
  const auto data = small_data(5, 9);
  fit(m, data, {}, 1);
  const EvalResult r = evaluate(m, data, EvalMode::fpl);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const LabelPath& pred = r.predictions[i][0];
    if (pred != data[i].paths[0]) continue;
    const std::vector<LabelPath> one_pred{pred}, one_truth{data[i].paths[0]};
    const MetricsReport n = node_accuracy(one_pred, one_truth);
    EXPECT_EQ(n.numerator, n.denominator);
  }
}

TEST(Threads, EnvironmentCapsWorkers) {
  ::setenv("HIERPATH_THREADS", "2", 1);
  EXPECT_EQ(resolve_threads(8), 2u);
  EXPECT_EQ(resolve_threads(1), 1u);
  ::unsetenv("HIERPATH_THREADS");
  EXPECT_EQ(resolve_threads(8), 8u);
  EXPECT_EQ(resolve_threads(0), 1u);
}
