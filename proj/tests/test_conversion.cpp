#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "hierpath/conversion.hpp"
#include "hierpath/error.hpp"
#include "oracles.hpp"

using namespace hierpath;

namespace {

std::vector<oracle::ConvTuple> as_tuples(const std::vector<ConvSolution>& s) {
  std::vector<oracle::ConvTuple> out;
  for (const auto& c : s) out.emplace_back(c.filter, c.filters, c.stride, c.padding, c.case_id);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<oracle::PoolTuple> as_tuples(const std::vector<PoolSolution>& s) {
  std::vector<oracle::PoolTuple> out;
  for (const auto& c : s) out.emplace_back(c.window, c.stride, c.case_id);
  std::sort(out.begin(), out.end());
  return out;
}

Tensor ones_factor(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}, 1.0); }

}  // namespace

TEST(Schedule, Validation) {
  EXPECT_NO_THROW(validate_schedule(LayerSchedule{{{1}, {2}, {3}, {4}}}, 4, 4));
  EXPECT_NO_THROW(validate_schedule(LayerSchedule{{{1, 2}, {3}}}, 4, 2));
  try {
    validate_schedule(LayerSchedule{{{2}, {1}}}, 4, 2);
    FAIL();
  } catch (const ScheduleError& e) {
    EXPECT_NE(std::string(e.what()).find("(1, 2)"), std::string::npos) << e.what();
  }
  EXPECT_THROW(validate_schedule(LayerSchedule{{{1}, {}}}, 4, 2), ScheduleError);
  EXPECT_THROW(validate_schedule(LayerSchedule{{{1}, {5}}}, 4, 2), ScheduleError);
  EXPECT_THROW(validate_schedule(LayerSchedule{{{1}, {2}}}, 4, 3), ScheduleError);
  EXPECT_NO_THROW(validate_schedule(LayerSchedule{{{3}, {1}}}, 4, 2, ScheduleOrder::decreasing));
}

TEST(Schedule, Defaults) {
  using Steps = std::vector<std::vector<std::size_t>>;
  EXPECT_EQ(default_schedule(4, 3, false).steps, (Steps{{2}, {3}, {4}}));
  EXPECT_EQ(default_schedule(4, 3, true).steps, (Steps{{4}, {3}, {2}}));
  EXPECT_THROW(default_schedule(2, 3, false), ScheduleError);
}

TEST(LinearConvert, IdentityFactorsFlatten) {
  std::mt19937_64 rng(1);
  Tensor a = oracle::random_tensor(Shape{2, 3, 4}, rng);
  Tape tape;
  Var out = linear_convert(tape.constant(a), tape.constant(Tensor::identity(2)),
                           tape.constant(Tensor::identity(3)), tape.constant(Tensor::identity(4)));
  EXPECT_EQ(out.shape(), (Shape{24}));
  EXPECT_EQ(out.value().values(), a.values());
}

TEST(LinearConvert, OnesFactorsSum) {
  std::mt19937_64 rng(2);
  Tensor a = oracle::random_tensor(Shape{2, 3, 3}, rng);
  Tape tape;
  Var out = linear_convert(tape.constant(a), tape.constant(ones_factor(1, 2)),
                           tape.constant(ones_factor(1, 3)), tape.constant(ones_factor(1, 3)));
  double total = 0;
  for (double v : a.values()) total += v;
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out.value()[0], total, 1e-12);
}

TEST(LinearConvert, MatchesComposedModeProducts) {
  std::mt19937_64 rng(3);
  Tensor a = oracle::random_tensor(Shape{3, 4, 5}, rng);
  Tensor u1 = oracle::random_tensor(Shape{2, 3}, rng), u2 = oracle::random_tensor(Shape{2, 4}, rng),
         u3 = oracle::random_tensor(Shape{3, 5}, rng);
  Tape tape;
  Var out = linear_convert(tape.constant(a), tape.constant(u1), tape.constant(u2), tape.constant(u3));
  const Tensor want = oracle::mode_product(oracle::mode_product(oracle::mode_product(a, u1, 1), u2, 2), u3, 3);
  EXPECT_LE(oracle::max_abs_diff(out.value(), want.reshaped(Shape{want.size()})), 1e-12);
}

TEST(ConvConvert, Case1And2Shapes) {
  Tape tape;
  Var a7 = tape.constant(Tensor(Shape{3, 7, 7}, 0.1));
  Var f7 = tape.constant(Tensor(Shape{256, 3, 7, 7}, 0.01));
  EXPECT_EQ(conv_convert(a7, f7, nullptr, ConvSpec{7, 256, 1, 0}, 256).size(), 256u);
  Var a8 = tape.constant(Tensor(Shape{3, 8, 8}, 0.1));
  Var f2 = tape.constant(Tensor(Shape{16, 3, 2, 2}, 0.01));
  EXPECT_EQ(conv_convert(a8, f2, nullptr, ConvSpec{2, 16, 2, 0}, 256).size(), 256u);
  EXPECT_THROW(conv_convert(a8, f2, nullptr, ConvSpec{2, 16, 2, 0}, 300), DimensionError);
}

TEST(PoolConvert, Shapes) {
  Tape tape;
  Var big = tape.constant(Tensor(Shape{512, 14, 14}, 0.5));
  Var out = pool_convert(big, PoolSpec{7, 7, PoolKind::avg}, tape.constant(Tensor::identity(512)),
                         tape.constant(Tensor::identity(2)), tape.constant(Tensor::identity(2)));
  EXPECT_EQ(out.size(), 2048u);

  Var tiny = tape.constant(Tensor(Shape{1, 2, 2}, {1, 2, 3, 4}));
  Var one = tape.constant(Tensor::identity(1));
  EXPECT_EQ(pool_convert(tiny, PoolSpec{2, 2, PoolKind::avg}, one, one, one).size(), 1u);

  Var constant = tape.constant(Tensor(Shape{2, 6, 6}, 0.75));
  Var pooled = pool2d(constant, 3, 3, PoolKind::avg);
  for (double v : pooled.value().values()) EXPECT_DOUBLE_EQ(v, 0.75);

  EXPECT_THROW(pool_convert(tiny, PoolSpec{3, 1, PoolKind::avg}, one, one, one), DimensionError);
}

TEST(PoolConvert, OnlyFactorsAreTrainable) {
  const ConversionSpec spec = make_conversion_spec(ConversionKind::pool, Shape{8, 8, 8}, 32);
  Converter c = Converter::create(spec, 1);
  std::size_t count = 0;
  for (auto& [name, t] : c.parameters()) count += t->size();
  EXPECT_EQ(count, c.u1.size() + c.u2.size() + c.u3.size());
  Tape tape;
  EXPECT_EQ(c.forward(tape, tape.constant(Tensor(Shape{8, 8, 8}, 0.2))).size(), 32u);
}

TEST(Aggregate, Mean) {
  Tape tape;
  Var a = tape.constant(Tensor::vector({1, 3})), b = tape.constant(Tensor::vector({3, 1}));
  const std::vector<Var> one{a};
  EXPECT_EQ(aggregate_step(one).value().values(), (std::vector<double>{1, 3}));
  const std::vector<Var> two{a, b};
  EXPECT_EQ(aggregate_step(two).value().values(), (std::vector<double>{2, 2}));
  const std::vector<Var> copies{a, a, a};
  EXPECT_EQ(aggregate_step(copies).value().values(), (std::vector<double>{1, 3}));
  EXPECT_THROW(aggregate_step(std::vector<Var>{}), ScheduleError);
}

TEST(Aggregate, PermutationInvariant) {
  std::mt19937_64 rng(4);
  Tape tape;
  std::vector<Var> vs;
  for (int i = 0; i < 4; ++i) vs.push_back(tape.constant(oracle::random_tensor(Shape{6}, rng)));
  const Tensor base = aggregate_step(vs).value();
  std::sort(vs.begin(), vs.end(), [](Var x, Var y) { return x.id < y.id; });
  while (std::next_permutation(vs.begin(), vs.end(), [](Var x, Var y) { return x.id < y.id; })) {
    EXPECT_LE(oracle::max_abs_diff(aggregate_step(vs).value(), base), 1e-15);
  }
}

TEST(ConvSolver, WorkedTuples) {
  const auto seven = solve_conv_dims(64, 7, 7, 256);
  EXPECT_NE(std::find(seven.begin(), seven.end(), ConvSolution{7, 256, 1, 0, 1}), seven.end());
  const auto eight = solve_conv_dims(64, 8, 8, 1024);
  EXPECT_NE(std::find(eight.begin(), eight.end(), ConvSolution{2, 64, 2, 0, 2}), eight.end());
  EXPECT_THROW(solve_conv_dims(3, 8, 9, 64), UsageError);
}

TEST(ConvSolver, SortedByFGZK) {
  const auto s = solve_conv_dims(16, 12, 12, 144);
  for (std::size_t i = 1; i < s.size(); ++i) {
    EXPECT_LE(std::tie(s[i - 1].filter, s[i - 1].stride, s[i - 1].padding, s[i - 1].filters),
              std::tie(s[i].filter, s[i].stride, s[i].padding, s[i].filters));
  }
}

TEST(ConvSolver, MatchesBruteForceSmallGrid) {
  for (std::size_t W = 1; W <= 12; ++W) {
    for (std::size_t p : {1u, 4u, 16u, 36u, 64u, 100u, 144u, 256u, 288u}) {
      const auto got = solve_conv_dims(8, W, W, p);
      EXPECT_EQ(as_tuples(got), oracle::brute_conv(W, p)) << "W=" << W << " p=" << p;
      for (const auto& s : got) {
        const std::size_t side = conv_output_extent(W, s.filter, s.stride, s.padding);
        EXPECT_EQ(s.filters * side * side, p);
      }
    }
  }
}

TEST(PoolSolver, WorkedTuples) {
  const auto a = solve_pool_dims(512, 14, 14, 2048);
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a.front(), (PoolSolution{7, 7, 1}));
  const auto b = solve_pool_dims(256, 7, 7, 256);
  ASSERT_FALSE(b.empty());
  EXPECT_EQ(b.front(), (PoolSolution{7, 7, 1}));
  EXPECT_THROW(solve_pool_dims(3, 8, 9, 64), UsageError);
}

TEST(PoolSolver, MatchesBruteForceSmallGrid) {
  for (std::size_t W = 1; W <= 16; ++W) {
    for (std::size_t D : {1u, 2u, 4u, 16u}) {
      for (std::size_t p : {1u, 4u, 16u, 64u, 256u}) {
        const auto got = solve_pool_dims(D, W, W, p);
        EXPECT_EQ(as_tuples(got), oracle::brute_pool(D, W, p)) << "D=" << D << " W=" << W << " p=" << p;
        for (const auto& s : got) {
          const std::size_t side = pool_output_extent(W, s.window, s.stride);
          EXPECT_EQ(D * side * side, p);
        }
      }
    }
  }
}

TEST(Factors, ProductIsP) {
  for (std::size_t D : {1u, 3u, 8u, 64u}) {
    for (std::size_t p : {1u, 7u, 12u, 64u, 100u, 4096u}) {
      const FactorShape f = allocate_factors(D, p);
      EXPECT_EQ(f.product(), p);
      EXPECT_LE(f.m, D);
      EXPECT_LE(f.n, f.v);
    }
  }
  EXPECT_EQ(allocate_factors(64, 64).m, 64u);
}

TEST(Converter, EveryKindProducesP) {
  for (ConversionKind kind : {ConversionKind::linear, ConversionKind::conv, ConversionKind::pool}) {
    for (const Shape& s : {Shape{8, 16, 16}, Shape{16, 8, 8}, Shape{32, 4, 4}, Shape{64, 2, 2}}) {
      const ConversionSpec spec = make_conversion_spec(kind, s, 64);
      Converter c = Converter::create(spec, 9);
      Tape tape;
      EXPECT_EQ(c.forward(tape, tape.constant(Tensor(s, 0.3))).size(), 64u) << to_string(kind);
    }
  }
}

TEST(Converter, GradientsAllKinds) {
  std::mt19937_64 rng(6);
  for (ConversionKind kind : {ConversionKind::linear, ConversionKind::conv, ConversionKind::pool}) {
    const Shape s{4, 4, 4};
    Converter c = Converter::create(make_conversion_spec(kind, s, 16), 3);
    std::vector<Tensor> in{oracle::random_tensor(s, rng)};
    for (auto& [name, t] : c.parameters()) in.push_back(*t);
    const auto f = [&](Tape& tape, const std::vector<Var>& v) {
      Var out;
      if (kind == ConversionKind::conv) out = conv_convert(v[0], v[1], &v[2], c.spec.conv, 16);
      else if (kind == ConversionKind::linear) out = linear_convert(v[0], v[1], v[2], v[3]);
      else out = pool_convert(v[0], c.spec.pool, v[1], v[2], v[3]);
      return oracle::probe(tape, out);
    };
    EXPECT_LT(oracle::gradient_error(f, in), 1e-4) << to_string(kind);
  }
}
