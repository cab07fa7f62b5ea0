#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hierpath/error.hpp"
#include "hierpath/recurrent.hpp"
#include "oracles.hpp"

using namespace hierpath;

namespace {

double gram_error(const Tensor& q) {
  const std::size_t r = q.extent(0), c = q.extent(1);
  const bool cols = r >= c;
  const std::size_t k = cols ? c : r, len = cols ? r : c;
  double worst = 0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      double dot = 0;
      for (std::size_t i = 0; i < len; ++i) {
        dot += cols ? q.at({i, a}) * q.at({i, b}) : q.at({a, i}) * q.at({b, i});
      }
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  }
  return worst;
}

void zero_all(NamedParams& params) {
  for (auto& [name, t] : params) std::fill(t->values().begin(), t->values().end(), 0.0);
}

// One LSTM cell on scalars, gate rows (input, forget, output, candidate).
struct ScalarCell {
  double wi[4], wh[4], b[4];
  std::pair<double, double> step(double x, double h, double c) const {
    double z[4];
    for (int k = 0; k < 4; ++k) z[k] = wi[k] * x + wh[k] * h + b[k];
    const double i = oracle::sig(z[0]), f = oracle::sig(z[1]), o = oracle::sig(z[2]), g = std::tanh(z[3]);
    const double c2 = f * c + i * g;
    return {o * std::tanh(c2), c2};
  }
  void load(LstmParams& p) const {
    for (int k = 0; k < 4; ++k) {
      p.w_input[k] = wi[k];
      p.w_hidden[k] = wh[k];
      p.bias[k] = b[k];
    }
  }
};

}  // namespace

TEST(OrthogonalInit, WorkedShapes) {
  EXPECT_LT(gram_error(orthogonal_init(4, 4, 1)), 1e-6);
  EXPECT_LT(gram_error(orthogonal_init(6, 3, 1)), 1e-6);
  EXPECT_LT(gram_error(orthogonal_init(3, 6, 1)), 1e-6);
  EXPECT_TRUE(orthogonal_init(5, 2, 42).same_values(orthogonal_init(5, 2, 42)));
  EXPECT_FALSE(orthogonal_init(5, 2, 42).same_values(orthogonal_init(5, 2, 43)));
}

TEST(OrthogonalInit, RandomShapes) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 1 + rng() % 40, c = 1 + rng() % 40;
    EXPECT_LT(gram_error(orthogonal_init(r, c, rng())), 1e-6) << r << "x" << c;
  }
}

TEST(Lstm, ShapesFollowGateLayout) {
  LstmParams p = LstmParams::create(5, 3, 1);
  EXPECT_EQ(p.w_input.shape(), (Shape{12, 5}));
  EXPECT_EQ(p.w_hidden.shape(), (Shape{12, 3}));
  EXPECT_EQ(p.bias.shape(), (Shape{12}));
  for (std::size_t k = 3; k < 6; ++k) EXPECT_EQ(p.bias[k], 1.0);  // forget gate
  Tape tape;
  EXPECT_THROW(lstm_step(tape, p, tape.constant(Tensor(Shape{4})), zero_state(tape, 3)), DimensionError);
}

TEST(RnnForward, ZeroWeightsGiveZeroOutputs) {
  RnnStack stack = RnnStack::create(4, 3, 2, 5, false, 1);
  NamedParams params;
  stack.append_parameters("rnn", params);
  zero_all(params);
  std::mt19937_64 rng(2);
  Tape tape;
  std::vector<Var> u;
  for (int t = 0; t < 3; ++t) u.push_back(tape.constant(oracle::random_tensor(Shape{4}, rng)));
  const RnnOutput out = rnn_forward(tape, stack, u);
  ASSERT_EQ(out.outputs.size(), 3u);
  for (Var o : out.outputs) {
    EXPECT_EQ(o.size(), 5u);
    for (double v : o.value().values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(RnnForward, SingleStepMatchesScalarCell) {
  RnnStack stack = RnnStack::create(1, 1, 1, 2, false, 3);
  const ScalarCell fwd{{0.4, -0.3, 0.8, 1.1}, {0.2, 0.5, -0.6, 0.9}, {0.1, 1.0, -0.2, 0.05}};
  const ScalarCell bwd{{-0.7, 0.6, 0.3, -0.5}, {0.1, -0.2, 0.4, 0.3}, {0.0, 1.0, 0.3, -0.1}};
  fwd.load(stack.layers[0].forward);
  bwd.load(stack.layers[0].backward);
  stack.proj_w = Tensor::matrix(2, 2, {0.5, -1.5, 2.0, 0.25});
  stack.proj_b = Tensor::vector({0.1, -0.2});
  const double x = 0.7;
  Tape tape;
  const std::vector<Var> u{tape.constant(Tensor::vector({x}))};
  const RnnOutput out = rnn_forward(tape, stack, u);
  const double hf = fwd.step(x, 0, 0).first, hb = bwd.step(x, 0, 0).first;
  EXPECT_NEAR(out.outputs[0].value()[0], 0.5 * hf - 1.5 * hb + 0.1, 1e-14);
  EXPECT_NEAR(out.outputs[0].value()[1], 2.0 * hf + 0.25 * hb - 0.2, 1e-14);
}

TEST(RnnForward, TwoStepsMatchScalarCells) {
  RnnStack stack = RnnStack::create(1, 1, 1, 1, false, 3);
  const ScalarCell fwd{{0.4, -0.3, 0.8, 1.1}, {0.2, 0.5, -0.6, 0.9}, {0.1, 1.0, -0.2, 0.05}};
  const ScalarCell bwd{{-0.7, 0.6, 0.3, -0.5}, {0.1, -0.2, 0.4, 0.3}, {0.0, 1.0, 0.3, -0.1}};
  fwd.load(stack.layers[0].forward);
  bwd.load(stack.layers[0].backward);
  stack.proj_w = Tensor::matrix(1, 2, {1.0, 0.0});
  stack.proj_b = Tensor::vector({0.0});
  Tape tape;
  const std::vector<Var> u{tape.constant(Tensor::vector({0.3})), tape.constant(Tensor::vector({-0.9}))};
  const RnnOutput out = rnn_forward(tape, stack, u);
  const auto [h1, c1] = fwd.step(0.3, 0, 0);
  const auto h2 = fwd.step(-0.9, h1, c1).first;
  EXPECT_NEAR(out.outputs[0].value()[0], h1, 1e-14);
  EXPECT_NEAR(out.outputs[1].value()[0], h2, 1e-14);
  const auto [b2, bc2] = bwd.step(-0.9, 0, 0);
  EXPECT_NEAR(out.top_states[0].value()[1], bwd.step(0.3, b2, bc2).first, 1e-14);
}

TEST(RnnForward, GradientThroughStack) {
  RnnStack stack = RnnStack::create(3, 4, 2, 3, true, 5);
  std::mt19937_64 rng(3);
  std::vector<Tensor> u;
  for (int t = 0; t < 2; ++t) u.push_back(oracle::random_tensor(Shape{3}, rng));
  NamedParams params;
  stack.append_parameters("rnn", params);
  std::vector<Tensor*> ptrs;
  for (auto& [name, t] : params) {
    if (name != "rnn.align") ptrs.push_back(t);
  }
  const auto loss = [&](Tape& tape) {
    std::vector<Var> in;
    for (const auto& x : u) in.push_back(tape.constant(x));
    const RnnOutput out = rnn_forward(tape, stack, in);
    Var total = oracle::probe(tape, out.outputs[0], 1);
    return add(total, oracle::probe(tape, out.outputs[1], 2));
  };
  EXPECT_LT(oracle::owned_gradient_error(loss, ptrs), 1e-4);
}

TEST(RnnForward, InputLengthMismatch) {
  RnnStack stack = RnnStack::create(3, 2, 1, 2, false, 1);
  Tape tape;
  const std::vector<Var> u{tape.constant(Tensor(Shape{4}))};
  EXPECT_THROW(rnn_forward(tape, stack, u), DimensionError);
}

TEST(RnnForward, BoundedStatesOverLongSequences) {
  LstmParams p = LstmParams::create(3, 6, 4);
  std::mt19937_64 rng(4);
  Tape tape;
  LstmState s = zero_state(tape, 6);
  for (int t = 0; t < 100; ++t) s = lstm_step(tape, p, tape.constant(oracle::random_tensor(Shape{3}, rng, -5, 5)), s);
  for (double v : s.h.value().values()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_LE(std::abs(v), 1.0);
  }
  for (double v : s.c.value().values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Residual, ZeroXiGivesAlignedInputExactly) {
  std::mt19937_64 rng(5);
  Tensor u = oracle::random_tensor(Shape{6}, rng), o = oracle::random_tensor(Shape{4}, rng);
  Tensor align = oracle::random_tensor(Shape{4, 6}, rng);
  Tape tape;
  Var out = residual_output(tape.constant(u), tape.constant(o), tape.constant(align), tape.constant(Tensor(Shape{4, 4})));
  Var aligned = matmul(tape.constant(align), tape.constant(u));
  EXPECT_TRUE(out.value().same_values(aligned.value()));
}

TEST(Residual, ZeroInputGivesXiBranch) {
  std::mt19937_64 rng(6);
  Tensor o = oracle::random_tensor(Shape{4}, rng), xi = oracle::random_tensor(Shape{4, 4}, rng);
  Tape tape;
  Var out = residual_output(tape.constant(Tensor(Shape{6})), tape.constant(o),
                            tape.constant(oracle::random_tensor(Shape{4, 6}, rng)), tape.constant(xi));
  EXPECT_TRUE(out.value().same_values(matmul(tape.constant(xi), tape.constant(o)).value()));
}

TEST(Residual, SumOfBranches) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor u = oracle::random_tensor(Shape{5}, rng), o = oracle::random_tensor(Shape{3}, rng);
    Tensor align = oracle::random_tensor(Shape{3, 5}, rng), xi = oracle::random_tensor(Shape{3, 3}, rng);
    Tape tape;
    const Tensor got = residual_output(tape.constant(u), tape.constant(o), tape.constant(align), tape.constant(xi)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double a = 0, z = 0;
      for (std::size_t j = 0; j < 5; ++j) a += align.at({r, j}) * u[j];
      for (std::size_t j = 0; j < 3; ++j) z += xi.at({r, j}) * o[j];
      EXPECT_NEAR(got[r], a + z, 1e-12);
    }
  }
}

TEST(Residual, RnnStackWithZeroedArc) {
  RnnStack stack = RnnStack::create(4, 3, 1, 5, true, 9);
  std::fill(stack.xi.values().begin(), stack.xi.values().end(), 0.0);
  std::mt19937_64 rng(8);
  Tape tape;
  std::vector<Var> u;
  for (int t = 0; t < 3; ++t) u.push_back(tape.constant(oracle::random_tensor(Shape{4}, rng)));
  const RnnOutput out = rnn_forward(tape, stack, u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_TRUE(out.outputs[t].value().same_values(matmul(tape.constant(stack.align), u[t]).value()));
  }
  EXPECT_FALSE(stack.align.requires_grad());
}

TEST(Seq2Seq, EncoderStateFromFinalDirections) {
  Seq2SeqParams p = Seq2SeqParams::create(4, 3, 2, 5, 2, 6, 11);
  std::mt19937_64 rng(9);
  Tape tape;
  std::vector<Var> u;
  for (int t = 0; t < 3; ++t) u.push_back(tape.constant(oracle::random_tensor(Shape{4}, rng)));
  const LstmState s = s2s_encode(tape, p, u);
  EXPECT_EQ(s.h.size(), 5u);
  for (double v : s.c.value().values()) EXPECT_EQ(v, 0.0);

  std::vector<Var> xs = u;
  BiLstmOutput layer;
  for (const auto& l : p.encoder) {
    layer = bilstm_forward(tape, l, xs);
    xs = layer.states;
  }
  const Var both[] = {layer.final_forward.h, layer.final_backward.h};
  Var b = tape.constant(p.reduce_b);
  const Var want = linear(tape.constant(p.reduce_w), concat(both), &b);
  EXPECT_TRUE(s.h.value().same_values(want.value()));
}

TEST(Seq2Seq, ZeroWeightsAndDeterminism) {
  Seq2SeqParams p = Seq2SeqParams::create(3, 2, 1, 4, 2, 5, 1);
  NamedParams params;
  p.append_parameters("s2s", params);
  {
    Seq2SeqParams q = Seq2SeqParams::create(3, 2, 1, 4, 2, 5, 1);
    NamedParams qp;
    q.append_parameters("s2s", qp);
    zero_all(qp);
    Tape tape;
    const std::vector<Var> u{tape.constant(Tensor(Shape{3}))};
    LstmState s = s2s_encode(tape, q, u);
    for (double v : s.h.value().values()) EXPECT_EQ(v, 0.0);
    Var prev = tape.constant(Tensor(Shape{5}));
    for (int t = 0; t < 3; ++t) {
      DecodeStep d = s2s_decode_step(tape, q, prev, s);
      for (double v : d.output.value().values()) EXPECT_EQ(v, 0.0);
      prev = d.output;
      s = d.state;
    }
  }
  std::mt19937_64 rng(10);
  const Tensor x = oracle::random_tensor(Shape{3}, rng), y = oracle::random_tensor(Shape{5}, rng);
  Tape t1, t2;
  const std::vector<Var> u1{t1.constant(x)}, u2{t2.constant(x)};
  const DecodeStep a = s2s_decode_step(t1, p, t1.constant(y), s2s_encode(t1, p, u1));
  const DecodeStep b = s2s_decode_step(t2, p, t2.constant(y), s2s_encode(t2, p, u2));
  EXPECT_TRUE(a.output.value().same_values(b.output.value()));
}

TEST(Seq2Seq, FullStackGradient) {
  Seq2SeqParams p = Seq2SeqParams::create(3, 4, 1, 4, 3, 4, 12);
  std::mt19937_64 rng(11);
  std::vector<Tensor> u;
  for (int t = 0; t < 2; ++t) u.push_back(oracle::random_tensor(Shape{3}, rng));
  NamedParams params;
  p.append_parameters("s2s", params);
  std::vector<Tensor*> ptrs;
  for (auto& [name, t] : params) ptrs.push_back(t);
  const auto loss = [&](Tape& tape) {
    std::vector<Var> in;
    for (const auto& x : u) in.push_back(tape.constant(x));
    LstmState s = s2s_encode(tape, p, in);
    Var prev = tape.constant(Tensor(Shape{4}));
    Var total = tape.constant(Tensor::scalar(0));
    for (std::size_t t = 0; t < 2; ++t) {
      DecodeStep d = s2s_decode_step(tape, p, prev, s);
      total = add(total, cross_entropy(d.output, t + 1));
      prev = softmax(d.output);
      s = d.state;
    }
    return total;
  };
  EXPECT_LT(oracle::owned_gradient_error(loss, ptrs), 1e-4);
}
